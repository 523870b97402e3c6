#include "apt/inversion.hpp"

#include "apt/nn.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace apt {

void InversionConfig::validate() const {
  if (iterations <= 0 || lr_max <= 0.0) throw std::invalid_argument("inversion: bad budget");
  if (warmup_iters < 0 || cosine_tail_iters < 0 ||
      warmup_iters + cosine_tail_iters > iterations)
    throw std::invalid_argument("inversion: warmup + tail must fit inside the budget");
  if (lambda_n < 0.0) throw std::invalid_argument("inversion: lambda_n < 0");
}

nlohmann::json InversionConfig::to_json() const {
  return {{"iterations", iterations},
          {"lr_max", lr_max},
          {"warmup_iters", warmup_iters},
          {"cosine_tail_iters", cosine_tail_iters},
          {"lambda_n", lambda_n},
          {"seed", seed}};
}

InversionConfig InversionConfig::from_json(const nlohmann::json& j) {
  InversionConfig c;
  c.iterations = j.at("iterations");
  c.lr_max = j.at("lr_max");
  c.warmup_iters = j.at("warmup_iters");
  c.cosine_tail_iters = j.at("cosine_tail_iters");
  c.lambda_n = j.at("lambda_n");
  c.seed = j.at("seed");
  return c;
}

double lr_schedule(int iter, const InversionConfig& cfg) {
  if (iter < 0 || iter >= cfg.iterations) throw std::out_of_range("lr_schedule iteration");
  if (iter < cfg.warmup_iters)
    return cfg.lr_max * static_cast<double>(iter) / cfg.warmup_iters;
  int tail_start = cfg.iterations - cfg.cosine_tail_iters;
  if (iter < tail_start) return cfg.lr_max;
  double p = static_cast<double>(iter - tail_start) / cfg.cosine_tail_iters;
  return cfg.lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

Tensor class_mean_style(const Generator& g, int label, int draws, RandomStream& rs) {
  if (draws <= 0) throw std::invalid_argument("class_mean_style: draws must be positive");
  const GeneratorConfig& cfg = g.config();
  Tensor acc({cfg.num_layers(), cfg.s_dim});
  Tensor z({cfg.d_z});
  for (int m = 0; m < draws; ++m) {
    rs.fill_normal(z);
    acc.add_inplace(g.map_latent(z, label), 1.0);
  }
  acc.scale_inplace(1.0 / draws);
  return acc;
}

PivotState invert(const Tensor& x, int label, const Generator& g, const PerceptualNet& net,
                  const InversionConfig& cfg, const std::string& image_id) {
  cfg.validate();
  const GeneratorConfig& gc = g.config();
  Tensor target = x.ndim() == 3 ? x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}) : x;
  if (target.ndim() != 4 || target.dim(0) != 1)
    throw std::invalid_argument("invert expects a single image");

  RandomStream rs(derive_seed(cfg.seed, "invert.init"));
  const int kMeanDraws = 512;
  Tensor mean_code = class_mean_style(g, label, kMeanDraws, rs);
  Tensor row({1, gc.s_dim});
  for (int s = 0; s < gc.s_dim; ++s) row[s] = mean_code[s];  // all rows identical

  VarPtr w = leaf(std::move(row), true, "w");
  std::vector<VarPtr> noise;
  for (Tensor& plane : g.sample_noise(rs)) noise.push_back(leaf(std::move(plane), true, "n"));

  std::vector<VarPtr> opt_params = noise;
  opt_params.push_back(w);
  Adam opt(opt_params, {cfg.lr_max, 0.0, 0.999, 1e-8});  // momentum-free variant
  const std::string optimizer_tag = "adam(beta1=0,beta2=0.999)";

  VarPtr x_const = constant(target);
  std::vector<std::pair<double, double>> trace;
  trace.reserve(cfg.iterations);
  double last_composite = 0.0;
  const int L = gc.num_layers();
  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<VarPtr> styles(L, w);
    VarPtr x_hat = g.synthesize(styles, noise);
    VarPtr lp = perceptual_distance(x_const, x_hat, net);
    VarPtr nr = noise_reg(noise);
    VarPtr loss = add(lp, scale(nr, cfg.lambda_n));
    last_composite = loss->value.item();
    trace.emplace_back(lp->value.item(), nr->value.item());
    if (!std::isfinite(last_composite))
      throw InversionError("inversion diverged at iteration " + std::to_string(it), trace);
    opt.zero_grad();
    backward(loss);
    opt.set_lr(lr_schedule(it, cfg));
    opt.step();
  }

  PivotState pivot;
  pivot.image_id = image_id;
  pivot.w_p = Tensor({L, gc.s_dim});
  for (int l = 0; l < L; ++l)
    for (int s = 0; s < gc.s_dim; ++s) pivot.w_p[l * gc.s_dim + s] = w->value[s];
  for (const VarPtr& nv : noise) pivot.n.push_back(nv->value);
  pivot.final_loss = last_composite;
  pivot.trace = std::move(trace);
  pivot.seed = cfg.seed;
  pivot.optimizer = optimizer_tag;
  return pivot;
}

void PivotState::save(const std::string& path) const {
  Checkpoint ck;
  nlohmann::json jt = nlohmann::json::array();
  for (const auto& [lp, nr] : trace) jt.push_back({lp, nr});
  ck.meta = {{"kind", "pivot"},       {"image_id", image_id}, {"final_loss", final_loss},
             {"seed", seed},          {"optimizer", optimizer}, {"trace", jt}};
  ck.add("w_p", w_p);
  for (size_t l = 0; l < n.size(); ++l) ck.add("noise." + std::to_string(l), n[l]);
  save_checkpoint(path, ck);
}

PivotState PivotState::load(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "pivot") throw std::runtime_error(path + ": not a pivot file");
  PivotState p;
  p.image_id = ck.meta.at("image_id");
  p.final_loss = ck.meta.at("final_loss");
  p.seed = ck.meta.at("seed");
  p.optimizer = ck.meta.at("optimizer");
  for (const auto& pair : ck.meta.at("trace"))
    p.trace.emplace_back(double(pair.at(0)), double(pair.at(1)));
  p.w_p = ck.tensor("w_p");
  for (size_t l = 0;; ++l) {
    const NamedArray* arr = ck.find("noise." + std::to_string(l));
    if (!arr) break;
    p.n.push_back(arr->data);
  }
  return p;
}

}  // namespace apt
