#pragma once

#include "apt/nn.hpp"
#include "apt/serialize.hpp"

#include "json.hpp"

#include <memory>
#include <string>
#include <vector>

namespace apt {

// One noise plane per synthesis layer, shaped (B|1, 1, H_l, W_l).
using NoiseMaps = std::vector<Tensor>;

struct GeneratorConfig {
  int d_z = 16;
  int num_classes = 10;
  int s_dim = 64;
  int map_hidden = 64;
  int base_channels = 32;
  int img_channels = 3;
  int img_size = 32;
  int base_size = 4;

  int num_layers() const;                 // two blocks per resolution
  std::vector<int> layer_channels() const;
  std::vector<int> layer_sizes() const;   // spatial resolution per block
  nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);
};

// Style-based conditional generator. The mapping network turns (z, one-hot c)
// into a style vector shared by all layers; the synthesis network consumes one
// style row and one noise plane per layer. Mapping parameters live apart from
// synthesis parameters and are never tuned after pretraining.
class Generator {
 public:
  Generator(GeneratorConfig cfg, uint64_t seed);

  const GeneratorConfig& config() const { return cfg_; }
  Generator clone() const;  // deep copy: tuning the clone never touches this one
  ParamStore& mapping_params() { return map_; }
  ParamStore& synthesis_params() { return syn_; }
  const ParamStore& mapping_params() const { return map_; }
  const ParamStore& synthesis_params() const { return syn_; }

  // Batched mapping: zc is (B, d_z) with labels alongside; returns (B, s_dim).
  VarPtr map_forward(const VarPtr& z, const std::vector<int>& labels) const;

  // Single-sample style code: the shared style vector broadcast to (L, s_dim).
  Tensor map_latent(const Tensor& z, int label) const;

  // style_rows: L entries, each (B, s_dim); noise: L planes. Returns images
  // (B, C, H, W) in [-1, 1].
  VarPtr synthesize(const std::vector<VarPtr>& style_rows, const std::vector<VarPtr>& noise) const;

  // Single-sample path driven by a (L, s_dim) style-code variable.
  VarPtr synthesize_code(const VarPtr& w, const std::vector<VarPtr>& noise) const;
  Tensor synthesize_image(const Tensor& w, const NoiseMaps& noise) const;

  NoiseMaps sample_noise(RandomStream& rs, int batch = 1) const;
  NoiseMaps zero_noise(int batch = 1) const;

  void save(const std::string& path, const nlohmann::json& extra_meta) const;
  static Generator load(const std::string& path);
  static Generator load(const Checkpoint& ck, const std::string& prefix = "");

 private:
  GeneratorConfig cfg_;
  ParamStore map_;
  ParamStore syn_;
};

// Multi-scale realness critics with a class-projection term used only during
// GAN training; the plain realness score is what attack-time losses consume.
class DiscriminatorSet {
 public:
  DiscriminatorSet(GeneratorConfig cfg, uint64_t seed);

  int scales() const { return 2; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Realness probability per scale, each (B, 1) in (0, 1).
  std::vector<VarPtr> discriminate(const VarPtr& images) const;
  // Class-conditioned logits per scale used by the GAN objective.
  std::vector<VarPtr> score_conditioned(const VarPtr& images, const std::vector<int>& labels) const;

  void save_into(Checkpoint& ck) const;
  static DiscriminatorSet load(const Checkpoint& ck, const GeneratorConfig& cfg);

 private:
  VarPtr trunk(const VarPtr& x, int scale) const;  // pooled features (B, F)
  GeneratorConfig cfg_;
  ParamStore params_;
};

struct PreprocessSpec {
  int crop = 28;
  Tensor mean;  // per channel, in the [-1, 1] pixel domain
  Tensor stddev;
};

// Target classifier with its preprocessing baked in: every classification
// center-crops and normalizes exactly once.
class Classifier {
 public:
  Classifier(std::string id, std::string arch, int img_channels, int img_size, int num_classes,
             PreprocessSpec prep, uint64_t seed);

  const std::string& id() const { return id_; }
  const std::string& arch() const { return arch_; }
  int img_channels() const { return img_channels_; }
  int img_size() const { return img_size_; }
  int num_classes() const { return num_classes_; }
  const PreprocessSpec& preprocess() const { return prep_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  VarPtr logits(const VarPtr& images) const;  // images (B, C, S, S) in [-1, 1]
  VarPtr probabilities(const VarPtr& images) const;
  Tensor probabilities(const Tensor& images) const;
  std::vector<int> predict(const Tensor& images) const;

  void save(const std::string& path, const nlohmann::json& extra_meta) const;
  static Classifier load(const std::string& path);
  static Classifier load(const Checkpoint& ck);

 private:
  std::string id_, arch_;
  int img_channels_, img_size_, num_classes_;
  PreprocessSpec prep_;
  ParamStore params_;
};

// Frozen feature network standing in for the perceptual backbone; trained as a
// classifier, embeddings tapped after each of three conv blocks.
class PerceptualNet {
 public:
  PerceptualNet(int img_channels, int img_size, int num_classes, uint64_t seed);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  int tap_count() const { return 3; }
  std::vector<Shape> tap_shapes(int batch = 1) const;

  std::vector<VarPtr> embed(const VarPtr& images) const;
  VarPtr logits(const VarPtr& images) const;  // training head

  void save(const std::string& path, const nlohmann::json& extra_meta) const;
  static PerceptualNet load(const std::string& path);
  static PerceptualNet load(const Checkpoint& ck);

 private:
  int img_channels_, img_size_, num_classes_;
  ParamStore params_;
};

// Helpers shared across modules.
Tensor one_hot(const std::vector<int>& labels, int num_classes);
int argmax_row(const Tensor& probs, int row);  // ties break to the lowest index
void params_into_checkpoint(const ParamStore& ps, Checkpoint& ck, const std::string& prefix);
void params_from_checkpoint(ParamStore& ps, const Checkpoint& ck, const std::string& prefix);

}  // namespace apt
