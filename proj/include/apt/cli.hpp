#pragma once

#include "apt/robustify.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace apt {

// One classifier to pretrain; the first entry is the conventional attack
// target, later ones serve as transfer models.
struct ClassifierSpec {
  std::string id = "target";
  std::string arch = "cnn";
  int epochs = 12;
  int batch_size = 16;
  double lr = 1e-3;
  uint64_t seed = 1;  // derived from the global seed, never set directly
};

struct PretrainSpec {
  int epochs = 12;
  int batch_size = 16;
  double lr = 1e-3;
  double lr_d = 2e-4;  // discriminators only
  uint64_t seed = 1;   // derived
};

// The whole pipeline configuration. Every stage seed is derived from the
// single global seed, so one --seed value pins every RNG stream downstream;
// stage sections therefore have no seed keys of their own.
struct RunConfig {
  uint64_t seed = 1;
  std::string output_root = "aptbench-home";  // APTBENCH_HOME overrides

  std::string dataset_id = "shapes10";
  int per_class = 100;
  int img_size = 32;
  uint64_t dataset_seed = 1;  // derived

  GeneratorConfig model;

  PretrainSpec gan;
  std::vector<ClassifierSpec> classifiers;  // default: target (cnn) + transfer (mlp)
  PretrainSpec perceptual;

  InversionConfig inversion;

  AttackConfig attack;  // classifier_id defaults to the first classifier spec
  std::string attack_split = "test";
  int attack_count = -1;  // -1 = every image in the split
  std::string campaign_id = "main";

  FinetuneConfig finetune;      // out_path is chosen by the finetune command
  int finetune_train_count = -1;  // train-split images to attack; -1 = all

  std::string eval_judge;  // class-preservation judge; "" = first non-target

  int ablate_count = 8;
  std::vector<double> sweep_d = {0.2, 0.3, 0.4};
  int sweep_count = 8;

  // Fully populated defaults with derived seeds and tied dimensions resolved.
  static RunConfig defaults();
  // Strict parse: starts from defaults(), rejects unknown keys at every level,
  // re-derives seeds, then validates.
  static RunConfig from_json(const nlohmann::json& j);
  // Re-derives stage seeds and tied dimensions from the global fields. Called
  // after any change to `seed`, `img_size` or the classifier list.
  void finalize();
  void validate() const;
  // The resolved document (stage seeds included); its hash stamps artifacts.
  nlohmann::json to_json() const;
};

// Content-addressed layout under the home directory. Stage keys hash exactly
// the config sections that influence the stage's outputs, so unrelated edits
// never invalidate an artifact.
struct RunPaths {
  std::filesystem::path home;
  std::string dataset_key, ckpt_key, pivot_key, attack_key;
  std::filesystem::path dataset_dir, ckpt_dir, pivot_dir, attack_dir;
  std::filesystem::path runs_dir() const { return home / "runs"; }
};

RunPaths resolve_paths(const RunConfig& cfg);

// Manifest lines parsed back into records. When `with_images` is set, emitted
// tensors are reloaded from the exact f64 sidecars written by the campaign
// (falling back to the PNGs if a sidecar is missing).
std::vector<AttackRecord> load_campaign_records(const std::filesystem::path& run_dir,
                                                bool with_images);

// Entry point behind the aptbench binary. args excludes argv[0].
// Exit codes: 0 success, 1 validation error, 2 runtime fault.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace apt
