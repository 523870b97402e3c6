#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "apt/inversion.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

using namespace apt;

namespace {

GeneratorConfig micro_config() {
  GeneratorConfig cfg;
  cfg.d_z = 4;
  cfg.num_classes = 3;
  cfg.s_dim = 8;
  cfg.map_hidden = 8;
  cfg.base_channels = 6;
  cfg.img_channels = 3;
  cfg.img_size = 4;
  cfg.base_size = 4;
  return cfg;
}

InversionConfig micro_inversion(int iters) {
  InversionConfig cfg;
  cfg.iterations = iters;
  cfg.warmup_iters = 10;
  cfg.cosine_tail_iters = 40;
  cfg.lr_max = 0.05;
  cfg.lambda_n = 10.0;  // resolution-scaled: the 1e4 default suits 32x32 planes
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("lr schedule closed forms") {
  InversionConfig cfg;  // 1000 iters, 50 warmup, 250 tail, lr_max 0.05
  CHECK(lr_schedule(0, cfg) == 0.0);
  CHECK(lr_schedule(25, cfg) == doctest::Approx(0.025).epsilon(1e-12));
  CHECK(lr_schedule(50, cfg) == 0.05);
  CHECK(lr_schedule(300, cfg) == 0.05);
  CHECK(lr_schedule(749, cfg) == 0.05);
  CHECK(lr_schedule(750, cfg) == doctest::Approx(0.05).epsilon(1e-12));  // tail start
  double expect_last = 0.05 * 0.5 * (1.0 + std::cos(std::numbers::pi * 249.0 / 250.0));
  CHECK(lr_schedule(999, cfg) == doctest::Approx(expect_last).epsilon(1e-12));
  CHECK_THROWS_AS(lr_schedule(1000, cfg), std::out_of_range);
  CHECK_THROWS_AS(lr_schedule(-1, cfg), std::out_of_range);

  InversionConfig bad;
  bad.warmup_iters = 600;
  bad.cosine_tail_iters = 600;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = InversionConfig{};
  bad.lr_max = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("inversion config json round trip") {
  InversionConfig cfg;
  cfg.iterations = 123;
  cfg.lambda_n = 5.0;
  cfg.seed = 77;
  InversionConfig back = InversionConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
}

TEST_CASE("class mean style is deterministic and broadcast") {
  Generator g(micro_config(), 7);
  RandomStream rs1(11), rs2(11);
  Tensor a = class_mean_style(g, 1, 64, rs1);
  Tensor b = class_mean_style(g, 1, 64, rs2);
  CHECK(max_abs_diff(a, b) == 0.0);
  CHECK(a.shape() == Shape{2, 8});
  for (int s = 0; s < 8; ++s) CHECK(a[s] == a[8 + s]);  // identical rows
  RandomStream rs3(11);
  Tensor c = class_mean_style(g, 2, 64, rs3);
  CHECK(max_abs_diff(a, c) > 0.0);
}

TEST_CASE("self-inversion recovers a generator-realizable image") {
  GeneratorConfig gc = micro_config();
  Generator g(gc, 21);
  PerceptualNet net(3, 4, 3, 22);
  RandomStream rs(23);
  Tensor z({gc.d_z});
  rs.fill_normal(z);
  Tensor w0 = g.map_latent(z, 1);
  Tensor x = g.synthesize_image(w0, g.zero_noise());

  // Copies to prove theta stays untouched.
  std::vector<Tensor> before;
  for (const auto& [name, v] : g.synthesis_params().items()) before.push_back(v->value);

  InversionConfig cfg = micro_inversion(200);
  PivotState pivot = invert(x, 1, g, net, cfg, "img-7");

  size_t k = 0;
  for (const auto& [name, v] : g.synthesis_params().items())
    CHECK(max_abs_diff(before[k++], v->value) == 0.0);

  CHECK(pivot.image_id == "img-7");
  CHECK(pivot.trace.size() == 200);
  CHECK(pivot.w_p.shape() == Shape{2, 8});
  CHECK(pivot.n.size() == 2);
  CHECK(pivot.final_loss <= 1e-2);
  CHECK(pivot.optimizer.find("beta1=0") != std::string::npos);

  // final_loss is the composite of the last trace entry.
  auto [lp, nr] = pivot.trace.back();
  CHECK(pivot.final_loss == lp + cfg.lambda_n * nr);

  // Reconstruction is visually exact at micro scale.
  Tensor recon = g.synthesize_image(pivot.w_p, pivot.n);
  CHECK(max_abs_diff(recon, x) < 0.15);
}

TEST_CASE("inversion is deterministic and improves the objective") {
  GeneratorConfig gc = micro_config();
  Generator g(gc, 31);
  PerceptualNet net(3, 4, 3, 32);
  RandomStream rs(33);
  Tensor x({1, 3, 4, 4});
  for (int64_t i = 0; i < x.size(); ++i) x[i] = 1.8 * rs.uniform() - 0.9;

  InversionConfig cfg = micro_inversion(150);
  PivotState p1 = invert(x, 0, g, net, cfg, "a");
  PivotState p2 = invert(x, 0, g, net, cfg, "a");
  CHECK(max_abs_diff(p1.w_p, p2.w_p) == 0.0);
  CHECK(p1.final_loss == p2.final_loss);
  CHECK(p1.trace == p2.trace);

  // Composite at the end is well below the start.
  double first = p1.trace.front().first + cfg.lambda_n * p1.trace.front().second;
  CHECK(p1.final_loss < first);
  CHECK(p1.trace.front().first > p1.trace.back().first);  // lpips itself shrinks

  // Smoothed trace (window 50) is non-increasing from iteration 100 on.
  auto smoothed = [&](int i) {
    double s = 0.0;
    for (int k = i - 49; k <= i; ++k)
      s += p1.trace[k].first + cfg.lambda_n * p1.trace[k].second;
    return s / 50.0;
  };
  for (int i = 100; i + 1 < static_cast<int>(p1.trace.size()); ++i)
    CHECK(smoothed(i + 1) <= smoothed(i) + 1e-12);
}

TEST_CASE("pivot state round trips through its container") {
  GeneratorConfig gc = micro_config();
  Generator g(gc, 41);
  PerceptualNet net(3, 4, 3, 42);
  Tensor x = g.synthesize_image(g.map_latent(Tensor::full({4}, 0.3), 2), g.zero_noise());
  PivotState pivot = invert(x, 2, g, net, micro_inversion(60), "rt-1");

  std::string path = "test_pivot_rt.aptc";
  pivot.save(path);
  PivotState back = PivotState::load(path);
  CHECK(back.image_id == pivot.image_id);
  CHECK(back.final_loss == pivot.final_loss);
  CHECK(back.seed == pivot.seed);
  CHECK(back.optimizer == pivot.optimizer);
  CHECK(back.trace == pivot.trace);
  CHECK(max_abs_diff(back.w_p, pivot.w_p) == 0.0);
  REQUIRE(back.n.size() == pivot.n.size());
  for (size_t l = 0; l < back.n.size(); ++l) CHECK(max_abs_diff(back.n[l], pivot.n[l]) == 0.0);
  std::remove(path.c_str());
}
