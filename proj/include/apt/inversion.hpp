#pragma once

#include "apt/losses.hpp"

#include <string>
#include <utility>
#include <vector>

namespace apt {

struct InversionConfig {
  int iterations = 1000;
  double lr_max = 0.05;
  int warmup_iters = 50;
  int cosine_tail_iters = 250;
  double lambda_n = 1e4;
  uint64_t seed = 1;

  void validate() const;  // throws invalid_argument
  nlohmann::json to_json() const;
  static InversionConfig from_json(const nlohmann::json& j);
};

// Result of stage-1 inversion: the frozen pivot for generator tuning.
struct PivotState {
  std::string image_id;
  Tensor w_p;    // (L, s_dim) — the shared style row expanded to all layers
  NoiseMaps n;   // one (1, 1, H, W) plane per layer
  double final_loss = 0.0;
  std::vector<std::pair<double, double>> trace;  // (lpips, noise_reg) per iteration
  uint64_t seed = 0;
  std::string optimizer;  // recorded optimizer variant

  void save(const std::string& path) const;
  static PivotState load(const std::string& path);
};

// Divergence during inversion; carries the partial trace for diagnostics.
struct InversionError : std::runtime_error {
  InversionError(const std::string& msg, std::vector<std::pair<double, double>> t)
      : std::runtime_error(msg), trace(std::move(t)) {}
  std::vector<std::pair<double, double>> trace;
};

// Linear warmup 0 -> lr_max, constant plateau, cosine decay to 0 over the
// final tail.
double lr_schedule(int iter, const InversionConfig& cfg);

// Mean style code over `draws` sampled latents for one class.
Tensor class_mean_style(const Generator& g, int label, int draws, RandomStream& rs);

// Optimizes one shared style row (broadcast across layers) plus the noise
// planes to reconstruct x; the generator itself is never touched.
PivotState invert(const Tensor& x, int label, const Generator& g, const PerceptualNet& net,
                  const InversionConfig& cfg, const std::string& image_id);

}  // namespace apt
