#pragma once

#include "apt/dataset.hpp"
#include "apt/models.hpp"

#include <optional>
#include <string>

namespace apt {

struct TrainConfig {
  std::string dataset_id = "shapes10";
  int epochs = 10;
  int batch_size = 32;
  double lr = 1e-3;     // classifier / perceptual / generator
  double lr_d = 2e-4;   // discriminators
  uint64_t seed = 1;
  std::string out_path;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct GanBundle {
  Generator gen;
  DiscriminatorSet discs;
};

struct GanTrainStats {
  int epochs_run = 0;
  double final_g_loss = 0.0;
  double final_d_loss = 0.0;
};

// Conditional GAN training with the non-saturating objective summed over
// discriminator scales. Writes <out_path> (generator + discriminators in one
// checkpoint) and a JSON-lines epoch log next to it. Aborts on divergence.
GanTrainStats train_gan(const GeneratorConfig& model_cfg, const TrainConfig& cfg,
                        const Dataset& train, GanBundle* out = nullptr);

// Supervised training; metadata records the measured val/test accuracies.
// `arch` is one of the Classifier architecture tags.
double train_classifier(const std::string& id, const std::string& arch, const TrainConfig& cfg,
                        const Dataset& train, const Dataset& val, const Dataset& test,
                        std::optional<Classifier>* out = nullptr);

// Trains the perceptual backbone on the same labels; taps recorded in
// metadata. Returns test accuracy.
double train_perceptual(const TrainConfig& cfg, const Dataset& train, const Dataset& test,
                        std::optional<PerceptualNet>* out = nullptr);

// Fraction of argmax-correct predictions (ties resolve to the lowest index).
double clean_accuracy(const Classifier& clf, const Dataset& ds);

// Preprocessing spec derived from a training split: center crop plus
// per-channel standardization.
PreprocessSpec preprocess_from(const Dataset& train, int crop);

std::string log_path_for(const std::string& checkpoint_path);

}  // namespace apt
