#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "apt/losses.hpp"

#include <cmath>

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

Tensor rand_image(Shape s, uint64_t seed, double lo = -0.9, double hi = 0.9) {
  RandomStream rs(seed);
  Tensor t(std::move(s));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * rs.uniform();
  return t;
}

// Plain-loop reimplementation of one pyramid level's shift-product terms.
double brute_shift_terms(const std::vector<std::vector<double>>& m) {
  int H = static_cast<int>(m.size()), W = static_cast<int>(m[0].size());
  double sy = 0.0, sx = 0.0;
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      sy += m[i][j] * m[(i + H - 1) % H][j];
      sx += m[i][j] * m[i][(j + W - 1) % W];
    }
  sy /= H * W;
  sx /= H * W;
  return sy * sy + sx * sx;
}

}  // namespace

TEST_CASE("loss weights defaults match pinned values") {
  LossWeights w;
  CHECK(w.lambda_l2_p == 0.1);
  CHECK(w.lambda_l2_r == 0.1);
  CHECK(w.lambda_ce == 0.01);
  CHECK(w.lambda_pg == 0.005);
  CHECK(w.lambda_n == 1e4);
  LossWeights back = LossWeights::from_json(w.to_json());
  CHECK(back.to_json() == w.to_json());
}

TEST_CASE("perceptual distance with identity tap equals normalized mse") {
  // Single-channel 2x2 inputs, identity tap: the definition reduces to the
  // mean squared difference of channel-normalized (here: sign-like) values.
  Tensor x({1, 1, 2, 2});
  x[0] = 1.0; x[1] = -2.0; x[2] = 0.5; x[3] = 4.0;
  Tensor y({1, 1, 2, 2});
  y[0] = 2.0; y[1] = 1.0; y[2] = -0.5; y[3] = 4.0;
  TapFn identity = [](const VarPtr& v) { return std::vector<VarPtr>{v}; };
  double got = perceptual_distance_taps(constant(x), constant(y), identity)->value.item();

  double expect = 0.0;
  for (int k = 0; k < 4; ++k) {
    double nx = x[k] / std::sqrt(x[k] * x[k] + 1e-10);
    double ny = y[k] / std::sqrt(y[k] * y[k] + 1e-10);
    expect += (nx - ny) * (nx - ny);
  }
  expect /= 4.0;
  CHECK(got == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("perceptual distance identity and symmetry") {
  PerceptualNet net(3, 8, 4, 3);
  Tensor x = rand_image({1, 3, 8, 8}, 1);
  Tensor y = rand_image({1, 3, 8, 8}, 2);
  CHECK(perceptual_distance(constant(x), constant(x), net)->value.item() == 0.0);
  double xy = perceptual_distance(constant(x), constant(y), net)->value.item();
  double yx = perceptual_distance(constant(y), constant(x), net)->value.item();
  CHECK(xy > 0.0);
  CHECK(xy == doctest::Approx(yx).epsilon(1e-12));
  Tensor bad = rand_image({1, 3, 4, 4}, 3);
  CHECK_THROWS_AS(perceptual_distance(constant(x), constant(bad), net), std::invalid_argument);
}

TEST_CASE("l2 distance oracles") {
  Tensor x({1, 1, 2, 2});
  CHECK(l2_distance(constant(x), constant(x))->value.item() == 0.0);
  Tensor ones = Tensor::full({1, 1, 2, 2}, 1.0);
  CHECK(l2_distance(constant(x), constant(ones))->value.item() == doctest::Approx(1.0));

  Tensor a = rand_image({2, 3, 4, 4}, 4);
  Tensor b = rand_image({2, 3, 4, 4}, 5);
  double brute = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) brute += (a[i] - b[i]) * (a[i] - b[i]);
  brute /= static_cast<double>(a.size());
  CHECK(l2_distance(constant(a), constant(b))->value.item() == doctest::Approx(brute).epsilon(1e-12));
}

TEST_CASE("noise reg is positive on constant maps and sign-invariant") {
  auto ones = leaf(Tensor::full({1, 1, 4, 4}, 1.0), false, "");
  double v = noise_reg({ones})->value.item();
  CHECK(v > 0.0);
  CHECK(v == doctest::Approx(4.0).epsilon(1e-12));  // two levels, two unit terms each

  Tensor n = rand_image({1, 1, 8, 8}, 6, -1.0, 1.0);
  Tensor flipped = n;
  flipped.scale_inplace(-1.0);
  CHECK(noise_reg({constant(n)})->value.item() ==
        doctest::Approx(noise_reg({constant(flipped)})->value.item()).epsilon(1e-12));
}

TEST_CASE("noise reg matches brute-force pyramid computation on a fixed 4x4 map") {
  Tensor n({1, 1, 4, 4});
  const double vals[16] = {0.3,  -1.2, 0.7,  0.1,  2.0, -0.4, 0.05, -0.9,
                           -0.6, 1.1,  -1.5, 0.8,  0.2, 0.9,  -0.3, 1.4};
  std::vector<std::vector<double>> level(4, std::vector<double>(4));
  for (int i = 0; i < 16; ++i) {
    n[i] = vals[i];
    level[i / 4][i % 4] = vals[i];
  }
  double brute = brute_shift_terms(level);
  std::vector<std::vector<double>> pooled(2, std::vector<double>(2));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      pooled[i][j] = 0.25 * (level[2 * i][2 * j] + level[2 * i][2 * j + 1] +
                             level[2 * i + 1][2 * j] + level[2 * i + 1][2 * j + 1]);
  brute += brute_shift_terms(pooled);
  CHECK(noise_reg({constant(n)})->value.item() == doctest::Approx(brute).epsilon(1e-12));
}

TEST_CASE("loss_pt composition") {
  PerceptualNet net(3, 8, 4, 7);
  Tensor x = rand_image({1, 3, 8, 8}, 8);
  Tensor y = rand_image({1, 3, 8, 8}, 9);
  LossWeights w;

  CHECK(loss_pt(constant(x), constant(x), net, w)->value.item() == 0.0);

  LossWeights nol2 = w;
  nol2.lambda_l2_p = 0.0;
  CHECK(loss_pt(constant(x), constant(y), net, nol2)->value.item() ==
        perceptual_distance(constant(x), constant(y), net)->value.item());

  double lp_out = 0.0, l2_out = 0.0;
  double total = loss_pt(constant(x), constant(y), net, w, &lp_out, &l2_out)->value.item();
  double lp = perceptual_distance(constant(x), constant(y), net)->value.item();
  double l2 = l2_distance(constant(x), constant(y))->value.item();
  CHECK(lp_out == lp);
  CHECK(l2_out == l2);
  CHECK(std::abs(total - (lp + w.lambda_l2_p * l2)) <= 1e-12);
}

TEST_CASE("loss_R composition") {
  PerceptualNet net(3, 8, 4, 7);
  Tensor x = rand_image({1, 3, 8, 8}, 10);
  Tensor y = rand_image({1, 3, 8, 8}, 11);
  LossWeights w;
  w.lambda_l2_r = 0.25;
  double total = loss_R(constant(x), constant(y), net, w)->value.item();
  double lp = perceptual_distance(constant(x), constant(y), net)->value.item();
  double l2 = l2_distance(constant(x), constant(y))->value.item();
  CHECK(std::abs(total - (lp + 0.25 * l2)) <= 1e-12);
  CHECK(loss_R(constant(x), constant(x), net, w)->value.item() == 0.0);
}

TEST_CASE("locality sample arithmetic") {
  Generator g(micro_config(), 19);
  RandomStream rs(20);
  Tensor z({4});
  rs.fill_normal(z);
  Tensor w_z = g.map_latent(z, 1);

  // alpha = 0 keeps the pivot.
  Tensor w_p = w_z;
  w_p[3] += 7.0;
  Tensor same = locality_sample(w_p, z, 1, 0.0, g);
  CHECK(max_abs_diff(same, w_p) == 0.0);

  // Direction (2, 0, ..., 0) with alpha = 1 moves exactly (1, 0, ..., 0).
  Tensor w_p2 = w_z;
  w_p2[0] -= 2.0;
  Tensor moved = locality_sample(w_p2, z, 1, 1.0, g);
  CHECK(moved[0] == doctest::Approx(w_p2[0] + 1.0).epsilon(1e-12));
  for (int64_t i = 1; i < moved.size(); ++i) CHECK(moved[i] == w_p2[i]);

  // Degenerate direction refuses.
  CHECK_THROWS_AS(locality_sample(w_z, z, 1, 1.0, g), std::runtime_error);
}

TEST_CASE("locality sample distance is exactly alpha over random draws") {
  Generator g(micro_config(), 23);
  RandomStream rs(24);
  Tensor base_z({4});
  rs.fill_normal(base_z);
  Tensor w_p = g.map_latent(base_z, 0);
  w_p[5] += 0.37;
  for (double alpha : {0.5, 2.0, 30.0}) {
    for (int i = 0; i < 100; ++i) {
      Tensor w_r = locality_draw(w_p, 0, alpha, g, rs);
      Tensor d = w_r;
      d.add_inplace(w_p, -1.0);
      CHECK(std::abs(frobenius_norm(d) - alpha) <= 1e-6);
    }
  }
}

TEST_CASE("loss_rec with untouched weights reduces to the pivot term") {
  GeneratorConfig cfg = micro_config();
  Generator g(cfg, 31);
  PerceptualNet net(3, 4, 3, 32);
  RandomStream rs(33);
  Tensor z({cfg.d_z});
  rs.fill_normal(z);
  Tensor w_p = g.map_latent(z, 2);
  w_p[0] += 0.2;  // ensure w_p != w_z for the locality direction
  NoiseMaps nm = g.sample_noise(rs);
  std::vector<VarPtr> noise;
  for (auto& n : nm) noise.push_back(constant(n));
  Tensor x = rand_image({1, 3, 4, 4}, 34);
  LossWeights lw;

  Tensor z2({cfg.d_z});
  rs.fill_normal(z2);
  auto [rec, bd] = loss_rec(constant(x), w_p, noise, g, g, z2, 2, 1.0, net, lw);

  CHECK(bd.l_r == 0.0);  // identical weights synthesize identical x_r and x_r*
  Tensor x_p_star = g.synthesize_image(w_p, nm);
  double lpt = loss_pt(constant(x), constant(x_p_star), net, lw)->value.item();
  CHECK(bd.l_pt == doctest::Approx(lpt).epsilon(1e-12));
  CHECK(std::abs(bd.l_rec - (bd.l_pt + bd.l_r)) <= 1e-12);
  CHECK(rec->value.item() == bd.l_rec);
  CHECK(bd.lpips + lw.lambda_l2_p * bd.l2 == doctest::Approx(bd.l_pt).epsilon(1e-12));
}

TEST_CASE("loss_rec detects tuned weights through the locality term") {
  GeneratorConfig cfg = micro_config();
  Generator g(cfg, 41);
  Generator tuned(cfg, 41);
  tuned.synthesis_params().copy_values_from(g.synthesis_params());
  tuned.mapping_params().copy_values_from(g.mapping_params());
  tuned.synthesis_params().get("torgb.b")->value[0] += 0.3;

  PerceptualNet net(3, 4, 3, 42);
  RandomStream rs(43);
  Tensor z({cfg.d_z});
  rs.fill_normal(z);
  Tensor w_p = g.map_latent(z, 0);
  w_p[1] -= 0.4;
  std::vector<VarPtr> noise;
  for (auto& n : g.sample_noise(rs)) noise.push_back(constant(n));
  Tensor x = rand_image({1, 3, 4, 4}, 44);
  Tensor z2({cfg.d_z});
  rs.fill_normal(z2);
  auto [rec, bd] = loss_rec(constant(x), w_p, noise, g, tuned, z2, 0, 1.0, net, LossWeights{});
  CHECK(bd.l_r > 0.0);
  CHECK(rec->value.item() == bd.l_rec);
}

TEST_CASE("fooling loss closed forms") {
  Tensor onehot({1, 10});
  onehot[3] = 1.0;
  CHECK(fooling_loss(constant(onehot), 3)->value.item() == 0.0);

  Tensor uniform = Tensor::full({1, 10}, 0.1);
  CHECK(fooling_loss(constant(uniform), 7)->value.item() ==
        doctest::Approx(std::log(10.0)).epsilon(1e-12));

  RandomStream rs(50);
  Tensor p({1, 6});
  double s = 0.0;
  for (int i = 0; i < 6; ++i) {
    p[i] = rs.uniform() + 0.01;
    s += p[i];
  }
  p.scale_inplace(1.0 / s);
  for (int c = 0; c < 6; ++c)
    CHECK(fooling_loss(constant(p), c)->value.item() ==
          doctest::Approx(-std::log(p[c])).epsilon(1e-12));

  Tensor zerop({1, 4});
  zerop[0] = 1.0;
  CHECK(fooling_loss(constant(zerop), 2)->value.item() ==
        doctest::Approx(-std::log(1e-12)).epsilon(1e-12));
  CHECK_THROWS_AS(fooling_loss(constant(zerop), 9), std::invalid_argument);
}

TEST_CASE("projected gan loss closed forms") {
  GeneratorConfig cfg = micro_config();
  DiscriminatorSet ds(cfg, 51);
  Tensor x = rand_image({1, 3, 4, 4}, 52);

  // Rig both heads to produce fixed scores regardless of the image.
  auto rig = [&](double logit) {
    for (int i = 0; i < ds.scales(); ++i) {
      std::string p = "d" + std::to_string(i) + ".";
      ds.params().get(p + "head.w")->value.fill(0.0);
      ds.params().get(p + "head.b")->value[0] = logit;
    }
  };

  rig(-800.0);  // sigmoid underflows to exactly 0
  CHECK(projected_gan_loss(constant(x), ds)->value.item() == 0.0);

  double p_real = 1.0 - std::exp(-1.0);
  rig(std::log(p_real / (1.0 - p_real)));
  CHECK(projected_gan_loss(constant(x), ds)->value.item() == doctest::Approx(-2.0).epsilon(1e-9));

  rig(800.0);  // sigmoid saturates at 1; the 1-D term is clamped
  CHECK(std::isfinite(projected_gan_loss(constant(x), ds)->value.item()));

  // Brute force against the discriminator's own score list.
  DiscriminatorSet fresh(cfg, 53);
  auto scores = fresh.discriminate(constant(x));
  double brute = 0.0;
  for (auto& sc : scores) brute += std::log(1.0 - sc->value.item());
  CHECK(projected_gan_loss(constant(x), fresh)->value.item() ==
        doctest::Approx(brute).epsilon(1e-12));
}

TEST_CASE("apt total composition") {
  LossBreakdown rec;
  rec.lpips = 0.21;
  rec.l2 = 0.4;
  rec.l_pt = 0.25;
  rec.l_r = 0.05;
  rec.l_rec = 0.3;
  auto l_rec = constant(Tensor::scalar(0.3));
  auto l_ce = constant(Tensor::scalar(2.0));
  auto l_pg = constant(Tensor::scalar(-1.5));

  LossWeights w;
  auto [total, bd] = apt_total(l_rec, rec, l_ce, l_pg, w);
  CHECK(std::abs(total->value.item() - (0.3 + 0.01 * 2.0 + 0.005 * -1.5)) <= 1e-12);
  CHECK(bd.total == total->value.item());
  CHECK(bd.l_ce == 2.0);
  CHECK(bd.l_pg == -1.5);
  CHECK(bd.l_rec == 0.3);

  LossWeights off;
  off.lambda_ce = 0.0;
  off.lambda_pg = 0.0;
  auto [t2, bd2] = apt_total(l_rec, rec, l_ce, l_pg, off);
  CHECK(t2->value.item() == 0.3);
  CHECK(bd2.total == 0.3);
}

TEST_CASE("breakdown json round trip") {
  LossBreakdown bd;
  bd.lpips = 0.1; bd.l2 = 0.2; bd.l_pt = 0.12; bd.l_r = 0.03;
  bd.l_rec = 0.15; bd.l_ce = 2.5; bd.l_pg = -0.4; bd.total = 0.173;
  LossBreakdown back = LossBreakdown::from_json(bd.to_json());
  CHECK(back.to_json() == bd.to_json());
}

TEST_CASE("apt total gradients through theta match finite differences") {
  GeneratorConfig cfg = micro_config();
  Generator original(cfg, 71);
  Generator tuned(cfg, 71);
  tuned.mapping_params().copy_values_from(original.mapping_params());
  tuned.synthesis_params().copy_values_from(original.synthesis_params());
  PerceptualNet net(3, 4, 3, 72);
  net.params().freeze();
  DiscriminatorSet ds(cfg, 73);
  ds.params().freeze();
  PreprocessSpec prep;
  prep.crop = 4;
  prep.mean = Tensor({3});
  prep.stddev = Tensor::full({3}, 1.0);
  Classifier clf("micro", "cnn", 3, 4, 3, prep, 74);
  clf.params().freeze();
  original.mapping_params().freeze();
  original.synthesis_params().freeze();
  tuned.mapping_params().freeze();

  RandomStream rs(75);
  Tensor z({cfg.d_z});
  rs.fill_normal(z);
  Tensor w_p = original.map_latent(z, 1);
  w_p[2] += 0.3;
  std::vector<VarPtr> noise;
  for (auto& n : original.sample_noise(rs)) noise.push_back(constant(n));
  Tensor x = rand_image({1, 3, 4, 4}, 76);
  Tensor z2({cfg.d_z});
  rs.fill_normal(z2);
  LossWeights lw;

  auto build = [&] {
    auto [rec, rec_bd] = loss_rec(constant(x), w_p, noise, original, tuned, z2, 1, 1.0, net, lw);
    auto x_p_star = tuned.synthesize_code(constant(w_p), noise);
    auto ce = fooling_loss(clf.probabilities(x_p_star), 0);
    auto pg = projected_gan_loss(x_p_star, ds);
    auto [total, bd] = apt_total(rec, rec_bd, ce, pg, lw);
    return total;
  };

  auto root = build();
  backward(root);
  int checked = 0;
  for (const auto& name : {"torgb.w", "l1.conv.w", "l0.style.w", "l0.bias", "const"}) {
    auto p = tuned.synthesis_params().get(name);
    REQUIRE(p->grad.size() == p->value.size());
    int64_t step = std::max<int64_t>(1, p->value.size() / 4);
    for (int64_t i = 0; i < p->value.size(); i += step) {
      double h = 1e-3, orig = p->value[i];
      p->value[i] = orig + h;
      double fp = build()->value.item();
      p->value[i] = orig - h;
      double fm = build()->value.item();
      p->value[i] = orig;
      double fd = (fp - fm) / (2 * h);
      double err = std::abs(p->grad[i] - fd) / std::max(1.0, std::abs(fd));
      CHECK_MESSAGE(err < 1e-3, "param=", std::string(name), " i=", i, " ad=", p->grad[i], " fd=", fd);
      ++checked;
    }
  }
  CHECK(checked >= 15);
}
