#pragma once

#include "apt/dataset.hpp"
#include "apt/inversion.hpp"

#include <map>
#include <string>
#include <vector>

namespace apt {

// Generator-tuning attack settings. `ablation` selects which objective terms
// are built: "full", "no-L_rec", "no-L_CE", "no-L_PG", or "latent-only"
// (the baseline that optimizes (w_p, n) with generator weights frozen).
struct AttackConfig {
  LossWeights weights;
  double d = 0.2;
  double alpha = 5.0;
  double lr = 3e-4;
  int max_iters = 1000;
  std::string classifier_id;
  uint64_t seed = 1;
  bool resample_c_any = false;  // default: one fooling target drawn per attack
  std::string ablation = "full";

  void validate() const;  // throws invalid_argument
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
};

enum class StopReason { fooled_within_d, hit_distance_bound, max_iters };
std::string to_string(StopReason r);
StopReason stop_reason_from_string(const std::string& s);

// Outcome of one attack. `trace[t]` is the objective breakdown evaluated at
// the state after t optimizer steps (so trace.size() == iterations_used + 1
// unless the objective blew up), and `fooled_trace[t]` is the target
// classifier's verdict on the reconstruction at that state. The emitted image
// is kept in memory; campaigns persist it and fill `emitted_ref`.
struct AttackRecord {
  std::string image_id;  // empty for non-manipulation records
  int true_class = -1;
  int c_any = -1;
  StopReason stop_reason = StopReason::max_iters;
  bool failed = false;           // nothing satisfied the emission bound
  bool non_manipulation = false; // sampled image, not a manipulation of a real one
  std::string error;             // set when the objective became non-finite
  std::string emitted_ref;
  int emitted_iter = -1;
  double l_pt_at_emission = 0.0; // NaN when nothing was emitted
  int iterations_used = 0;
  std::vector<LossBreakdown> trace;
  std::vector<uint8_t> fooled_trace;
  std::map<std::string, bool> fooled;  // per evaluated classifier, on the emitted image
  double conf_before = 0.0;
  double conf_after = 0.0;  // NaN when nothing was emitted
  Tensor emitted;           // (C, H, W); empty when failed

  nlohmann::json to_json(bool include_trace = true) const;
  static AttackRecord from_json(const nlohmann::json& j);
};

// Uniform draw over the num_classes - 1 labels other than true_class.
int choose_fool_target(int true_class, int num_classes, RandomStream& rs);

// Stage 2: tunes a private copy of the generator weights under the full
// objective, stopping on the first of (a) fooled with L_pt <= d, (b) L_pt >= d,
// (c) max_iters. Candidate iterates are the post-step states; the emitted image
// is the most recent candidate with L_pt <= d that misclassifies, else the most
// recent with L_pt <= d, else the attack is marked failed.
AttackRecord apt_attack(const Tensor& x, int true_class, const PivotState& pivot,
                        const Generator& g, const AttackConfig& cfg, const Classifier& clf,
                        const DiscriminatorSet& discs, const PerceptualNet& net,
                        uint64_t rng_seed);

// Same loop with gradients applied to (w_p, n); generator weights stay frozen.
AttackRecord latent_only_attack(const Tensor& x, int true_class, const PivotState& pivot,
                                const Generator& g, const AttackConfig& cfg,
                                const Classifier& clf, const DiscriminatorSet& discs,
                                const PerceptualNet& net, uint64_t rng_seed);

// Non-manipulation baseline: starts from a random sample of class `label` and
// optimizes only the latent to fool the classifier. No source image, so the
// distance bound does not apply.
AttackRecord random_sample_attack(int label, const Generator& g, const AttackConfig& cfg,
                                  const Classifier& clf, uint64_t rng_seed);

// Fresh-forward check of the emission bound; never reads the trace.
double recompute_emission_lpt(const Tensor& x, const Tensor& emitted, const PerceptualNet& net,
                              const LossWeights& w);

struct CampaignConfig {
  std::string campaign_id = "campaign";
  AttackConfig attack;
  InversionConfig inversion;
  int workers = 1;
  std::string out_dir;    // runs/<campaign-id>; empty keeps everything in memory
  std::string pivot_dir;  // optional stage-1 cache; loaded when present, saved when computed
  nlohmann::json extra_meta;

  void validate() const;
  nlohmann::json to_json() const;
  static CampaignConfig from_json(const nlohmann::json& j);
};

struct CampaignResult {
  std::vector<AttackRecord> records;      // ordered by image id
  std::vector<std::string> skipped_ids;   // inputs the target already misclassifies
  int total_images = 0;
  std::string manifest_path;  // empty when nothing was persisted
};

// Globally unique image id: <dataset-id>-img-<index>, safe as a file name.
std::string campaign_image_id(const std::string& dataset_id, int dataset_index);

// Runs one attack per correctly-classified input (inverting inline unless a
// cached pivot exists), evaluates emitted images against the target and every
// transfer classifier, enforces the emission bound by recomputation, and
// writes runs/<id>/{manifest.jsonl, campaign.json, images/, traces/} when
// out_dir is set. Work items are independent; `workers` threads produce
// records identical to serial execution.
CampaignResult run_campaign(const Dataset& data, const std::vector<int>& indices,
                            const Generator& g, const DiscriminatorSet& discs,
                            const PerceptualNet& net, const Classifier& target,
                            const std::vector<const Classifier*>& transfer,
                            const CampaignConfig& cfg);

}  // namespace apt
