#include "apt/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace apt {

nlohmann::json LossWeights::to_json() const {
  return {{"lambda_n", lambda_n},
          {"lambda_l2_p", lambda_l2_p},
          {"lambda_l2_r", lambda_l2_r},
          {"lambda_ce", lambda_ce},
          {"lambda_pg", lambda_pg}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  LossWeights w;
  w.lambda_n = j.at("lambda_n");
  w.lambda_l2_p = j.at("lambda_l2_p");
  w.lambda_l2_r = j.at("lambda_l2_r");
  w.lambda_ce = j.at("lambda_ce");
  w.lambda_pg = j.at("lambda_pg");
  return w;
}

nlohmann::json LossBreakdown::to_json() const {
  return {{"lpips", lpips}, {"l2", l2},     {"l_pt", l_pt}, {"l_r", l_r},
          {"l_rec", l_rec}, {"l_ce", l_ce}, {"l_pg", l_pg}, {"total", total}};
}

LossBreakdown LossBreakdown::from_json(const nlohmann::json& j) {
  LossBreakdown b;
  b.lpips = j.at("lpips");
  b.l2 = j.at("l2");
  b.l_pt = j.at("l_pt");
  b.l_r = j.at("l_r");
  b.l_rec = j.at("l_rec");
  b.l_ce = j.at("l_ce");
  b.l_pg = j.at("l_pg");
  b.total = j.at("total");
  return b;
}

VarPtr perceptual_distance_taps(const VarPtr& x, const VarPtr& y, const TapFn& taps) {
  if (!x->value.same_shape(y->value))
    throw std::invalid_argument("perceptual_distance: shape mismatch " +
                                shape_str(x->value.shape()) + " vs " + shape_str(y->value.shape()));
  auto fx = taps(x);
  auto fy = taps(y);
  if (fx.size() != fy.size() || fx.empty())
    throw std::invalid_argument("perceptual_distance: tap lists disagree");
  VarPtr total;
  for (size_t t = 0; t < fx.size(); ++t) {
    auto nx = unit_normalize_channels(fx[t]);
    auto ny = unit_normalize_channels(fy[t]);
    auto diff = sub(nx, ny);
    const auto& s = diff->value.shape();
    double spatial = static_cast<double>(s[0]) * s[2] * s[3];  // batch and positions
    auto term = scale(sum_all(mul(diff, diff)), 1.0 / spatial);
    total = total ? add(total, term) : term;
  }
  return total;
}

VarPtr perceptual_distance(const VarPtr& x, const VarPtr& y, const PerceptualNet& net) {
  return perceptual_distance_taps(x, y, [&net](const VarPtr& v) { return net.embed(v); });
}

VarPtr l2_distance(const VarPtr& x, const VarPtr& y) {
  if (!x->value.same_shape(y->value))
    throw std::invalid_argument("l2_distance: shape mismatch");
  auto diff = sub(x, y);
  return mean_all(mul(diff, diff));
}

VarPtr noise_reg(const std::vector<VarPtr>& maps) {
  if (maps.empty()) throw std::invalid_argument("noise_reg: no maps");
  VarPtr total;
  for (const auto& m : maps) {
    if (m->value.ndim() != 4) throw std::invalid_argument("noise_reg: maps must be 4-d");
    VarPtr level = m;
    while (true) {
      int h = level->value.dim(2), w = level->value.dim(3);
      if (h < 2 || w < 2) break;
      auto dy = mean_all(mul(level, roll2d(level, 1, 0)));
      auto dx = mean_all(mul(level, roll2d(level, 0, 1)));
      auto term = add(mul(dy, dy), mul(dx, dx));
      total = total ? add(total, term) : term;
      if (h < 4 || w < 4 || h % 2 || w % 2) break;
      level = avgpool2(level);
    }
  }
  if (!total) throw std::invalid_argument("noise_reg: all maps too small");
  return total;
}

VarPtr loss_pt(const VarPtr& x, const VarPtr& x_p_star, const PerceptualNet& net,
               const LossWeights& w, double* lpips_out, double* l2_out) {
  auto lp = perceptual_distance(x, x_p_star, net);
  auto l2 = l2_distance(x, x_p_star);
  if (lpips_out) *lpips_out = lp->value.item();
  if (l2_out) *l2_out = l2->value.item();
  return add(lp, scale(l2, w.lambda_l2_p));
}

VarPtr loss_R(const VarPtr& x_r, const VarPtr& x_r_star, const PerceptualNet& net,
              const LossWeights& w) {
  auto lp = perceptual_distance(x_r, x_r_star, net);
  auto l2 = l2_distance(x_r, x_r_star);
  return add(lp, scale(l2, w.lambda_l2_r));
}

Tensor locality_sample(const Tensor& w_p, const Tensor& z, int label, double alpha,
                       const Generator& g) {
  if (alpha < 0.0) throw std::invalid_argument("locality_sample: alpha must be nonnegative");
  Tensor w_z = g.map_latent(z, label);
  if (!w_z.same_shape(w_p)) throw std::invalid_argument("locality_sample: style shape mismatch");
  Tensor dir = w_z;
  dir.add_inplace(w_p, -1.0);
  double nrm = frobenius_norm(dir);
  if (nrm == 0.0) throw std::runtime_error("locality_sample: degenerate direction (w_z == w_p)");
  Tensor w_r = w_p;
  w_r.add_inplace(dir, alpha / nrm);
  return w_r;
}

Tensor locality_draw(const Tensor& w_p, int label, double alpha, const Generator& g,
                     RandomStream& rs) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    Tensor z({g.config().d_z});
    rs.fill_normal(z);
    try {
      return locality_sample(w_p, z, label, alpha, g);
    } catch (const std::runtime_error&) {
      continue;  // degenerate direction: resample
    }
  }
  throw std::runtime_error("locality_draw: could not find a non-degenerate direction");
}

std::pair<VarPtr, LossBreakdown> loss_rec(const VarPtr& x, const Tensor& w_p,
                                          const std::vector<VarPtr>& noise,
                                          const Generator& original, const Generator& tuned,
                                          const Tensor& z, int label, double alpha,
                                          const PerceptualNet& net, const LossWeights& w,
                                          VarPtr* x_p_star_out) {
  auto x_p_star = tuned.synthesize_code(constant(w_p), noise);
  if (x_p_star_out) *x_p_star_out = x_p_star;

  Tensor w_r = locality_sample(w_p, z, label, alpha, original);
  NoiseMaps noise_values;
  noise_values.reserve(noise.size());
  for (const auto& n : noise) noise_values.push_back(n->value);
  Tensor x_r = original.synthesize_image(w_r, noise_values);
  auto x_r_star = tuned.synthesize_code(constant(w_r), noise);

  LossBreakdown bd;
  auto pt = loss_pt(x, x_p_star, net, w, &bd.lpips, &bd.l2);
  auto r = loss_R(constant(x_r), x_r_star, net, w);
  auto rec = add(pt, r);
  bd.l_pt = pt->value.item();
  bd.l_r = r->value.item();
  bd.l_rec = rec->value.item();
  if (!std::isfinite(bd.l_rec)) throw std::runtime_error("loss_rec: non-finite value");
  return {rec, bd};
}

VarPtr fooling_loss(const VarPtr& probs, int c_any) {
  if (probs->value.ndim() != 2 || probs->value.dim(0) != 1)
    throw std::invalid_argument("fooling_loss: expects a single probability row");
  if (c_any < 0 || c_any >= probs->value.dim(1))
    throw std::invalid_argument("fooling_loss: class out of range");
  return neg(log_clamped(pick(probs, c_any), 1e-12));
}

VarPtr projected_gan_loss(const VarPtr& x, const DiscriminatorSet& discs) {
  auto scores = discs.discriminate(x);
  VarPtr total;
  auto one = constant(Tensor::full({x->value.dim(0), 1}, 1.0));
  for (const auto& s : scores) {
    auto term = mean_all(log_clamped(sub(one, s), 1e-12));
    total = total ? add(total, term) : term;
  }
  return total;
}

std::pair<VarPtr, LossBreakdown> apt_total(const VarPtr& l_rec_term, const LossBreakdown& rec_parts,
                                           const VarPtr& l_ce_term, const VarPtr& l_pg_term,
                                           const LossWeights& w) {
  auto total = add(add(l_rec_term, scale(l_ce_term, w.lambda_ce)), scale(l_pg_term, w.lambda_pg));
  LossBreakdown bd = rec_parts;
  bd.l_ce = l_ce_term->value.item();
  bd.l_pg = l_pg_term->value.item();
  bd.total = total->value.item();
  if (!std::isfinite(bd.total)) throw std::runtime_error("apt_total: non-finite value");
  return {total, bd};
}

}  // namespace apt
