#pragma once

#include "apt/models.hpp"

#include <functional>
#include <utility>

namespace apt {

struct LossWeights {
  double lambda_n = 1e4;
  double lambda_l2_p = 0.1;
  double lambda_l2_r = 0.1;
  double lambda_ce = 0.01;
  double lambda_pg = 0.005;

  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
};

// Per-term values of one tuning-loss evaluation. lpips/l2 are the components
// of the pivot reconstruction term.
struct LossBreakdown {
  double lpips = 0.0;
  double l2 = 0.0;
  double l_pt = 0.0;
  double l_r = 0.0;
  double l_rec = 0.0;
  double l_ce = 0.0;
  double l_pg = 0.0;
  double total = 0.0;

  nlohmann::json to_json() const;
  static LossBreakdown from_json(const nlohmann::json& j);
};

// Feature extractor interface: lets tests supply an identity tap while the
// pipeline supplies the frozen perceptual network.
using TapFn = std::function<std::vector<VarPtr>(const VarPtr&)>;

// Per tap: channel-unit-normalize both feature stacks, square the difference,
// average spatially (and over batch), sum over taps.
VarPtr perceptual_distance_taps(const VarPtr& x, const VarPtr& y, const TapFn& taps);
VarPtr perceptual_distance(const VarPtr& x, const VarPtr& y, const PerceptualNet& net);

// Mean squared pixel error.
VarPtr l2_distance(const VarPtr& x, const VarPtr& y);

// Penalizes 1-pixel-shift autocorrelation of each noise plane at every
// pyramid level (halving until the plane is 2x2).
VarPtr noise_reg(const std::vector<VarPtr>& maps);

VarPtr loss_pt(const VarPtr& x, const VarPtr& x_p_star, const PerceptualNet& net,
               const LossWeights& w, double* lpips_out = nullptr, double* l2_out = nullptr);
VarPtr loss_R(const VarPtr& x_r, const VarPtr& x_r_star, const PerceptualNet& net,
              const LossWeights& w);

// w_r = w_p + alpha * (w_z - w_p) / ||w_z - w_p||_F with w_z = map(z, c).
// Throws if the direction is degenerate (w_z == w_p).
Tensor locality_sample(const Tensor& w_p, const Tensor& z, int label, double alpha,
                       const Generator& g);
// Draws z itself and resamples on a degenerate direction.
Tensor locality_draw(const Tensor& w_p, int label, double alpha, const Generator& g,
                     RandomStream& rs);

// L_rec = L_pt + L_R with x_p* = G(w_p, n; theta_hat), x_r = G(w_r, n; theta),
// x_r* = G(w_r, n; theta_hat). The caller draws z (fresh per iteration).
// x_p_star_out, when given, receives the synthesized pivot image node so the
// caller can attach further terms without a second synthesis pass.
std::pair<VarPtr, LossBreakdown> loss_rec(const VarPtr& x, const Tensor& w_p,
                                          const std::vector<VarPtr>& noise,
                                          const Generator& original, const Generator& tuned,
                                          const Tensor& z, int label, double alpha,
                                          const PerceptualNet& net, const LossWeights& w,
                                          VarPtr* x_p_star_out = nullptr);

// -log p[c_any] on a single probability row, clamped at 1e-12.
VarPtr fooling_loss(const VarPtr& probs, int c_any);

// Sum over scales of log(1 - D_l(x)); discriminator weights are expected to be
// frozen so gradients reach x only.
VarPtr projected_gan_loss(const VarPtr& x, const DiscriminatorSet& discs);

// total = L_rec + lambda_ce * L_CE + lambda_pg * L_PG, composed in this order.
std::pair<VarPtr, LossBreakdown> apt_total(const VarPtr& l_rec_term, const LossBreakdown& rec_parts,
                                           const VarPtr& l_ce_term, const VarPtr& l_pg_term,
                                           const LossWeights& w);

}  // namespace apt
