#pragma once

#include "apt/attack.hpp"
#include "apt/evaluate.hpp"
#include "apt/pretrain.hpp"

#include <string>
#include <vector>

namespace apt {

// Fine-tuning schedule for hardening a classifier on its own attack images.
// `apt_fraction` is the share of every batch drawn from the attack set
// (0 = clean images only, 1 = attack images only).
struct FinetuneConfig {
  double lr = 1e-3;
  int epochs = 5;
  int batch_size = 32;
  double apt_fraction = 0.5;
  uint64_t seed = 1;
  std::string out_path;  // checkpoint destination; empty keeps it in memory

  void validate() const;  // lr > 0, epochs >= 0, batch_size > 0, fraction in [0, 1]
  nlohmann::json to_json() const;
  static FinetuneConfig from_json(const nlohmann::json& j);
};

// Attack emissions relabeled with the true classes of their source images;
// failed runs contribute nothing. `source_ids` aligns row-for-row with
// `data` and feeds the leakage check in before_after_eval.
struct FinetuneSet {
  std::string campaign_id;
  Dataset data;
  std::vector<std::string> source_ids;
};

// `reference` supplies the dataset id, class count and image geometry the
// emissions must match.
FinetuneSet build_finetune_set(const std::string& campaign_id, const Dataset& reference,
                               const std::vector<AttackRecord>& records);

// Continues training from `base` on batches that mix attack images with clean
// ones per cfg.apt_fraction. Returns a fresh classifier named
// <base-id>-apt-ft-<campaign-id>; `base` itself is never touched, and zero
// epochs reduces to a re-checkpoint of its weights. When cfg.out_path is set,
// the checkpoint (campaign id recorded in its metadata) and a JSON-lines
// epoch log are written.
Classifier finetune(const Classifier& base, const FinetuneSet& apt, const Dataset& clean,
                    const FinetuneConfig& cfg);

// Accuracy/confidence of two classifiers on one held-out attack set plus a
// clean split, with after-minus-before deltas.
struct RobustnessDelta {
  std::string before_id, after_id, campaign_id;
  AccConf before_attacked, after_attacked;
  AccConf before_clean, after_clean;
  double attacked_accuracy_delta = 0.0;
  double attacked_confidence_delta = 0.0;
  double clean_accuracy_delta = 0.0;

  nlohmann::json to_json() const;
  static RobustnessDelta from_json(const nlohmann::json& j);
  std::string render_text() const;
};

// Scores `before` and `after` on the same held-out records (failed runs are
// skipped) and the same clean split. Throws if any held-out image id also
// appears in `finetune_source_ids`: the held-out campaign must be disjoint
// from the images the finetune trained on.
RobustnessDelta before_after_eval(const Classifier& before, const Classifier& after,
                                  const std::string& campaign_id,
                                  const std::vector<AttackRecord>& held_out,
                                  const Dataset& clean_test,
                                  const std::vector<std::string>& finetune_source_ids);

}  // namespace apt
