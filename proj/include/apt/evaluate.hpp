#pragma once

#include "apt/attack.hpp"

#include <map>
#include <string>
#include <vector>

namespace apt {

struct AccConf {
  double accuracy = 0.0;    // fraction argmax-correct, ties to the lowest index
  double confidence = 0.0;  // mean softmax probability at the true label
  int64_t count = 0;

  nlohmann::json to_json() const;
  static AccConf from_json(const nlohmann::json& j);
};

// Row r of `probs` is a probability vector; labels[r] is its true class.
AccConf accuracy_confidence(const Tensor& probs, const std::vector<int>& labels);
AccConf accuracy_confidence(const Classifier& clf, const std::vector<Tensor>& images,
                            const std::vector<int>& labels);

// Pooled penultimate activations of the frozen perceptual net: (B,C,H,W) -> (B,F).
Tensor perceptual_features(const PerceptualNet& net, const Tensor& images);

// Frechet statistics of a feature set. The covariance uses the unbiased
// (count - 1) denominator and is exactly symmetric by construction.
struct FeatureStats {
  Tensor mean;  // (F)
  Tensor cov;   // (F, F)
  int64_t count = 0;

  void validate() const;  // shape, symmetry within 1e-8, count >= 2
  static FeatureStats from_features(const Tensor& features);  // (B, F), B >= 2
  FeatureStats merged(const FeatureStats& other) const;       // stats of the union
  nlohmann::json to_json() const;
  static FeatureStats from_json(const nlohmann::json& j);
};

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the square root
// taken through a symmetric eigendecomposition of S_a^{1/2} S_b S_a^{1/2}.
// Eigenvalues in [-1e-6 * lambda_max, 0) are treated as rounding noise and
// clamped to zero; anything more negative raises with an eigenvalue report.
double fid(const FeatureStats& a, const FeatureStats& b);

// One row of the transfer study: images generated against `source_id`.
struct TransferSource {
  std::string source_id;
  std::vector<Tensor> images;
  std::vector<int> labels;
};

// Emitted images of the non-failed records, labeled with their true classes.
TransferSource attack_source(const std::string& source_id,
                             const std::vector<AttackRecord>& records);

struct TransferReport {
  std::vector<std::string> source_ids;      // rows
  std::vector<std::string> classifier_ids;  // columns
  Tensor accuracy;                          // (S, E)
  Tensor counts;                            // (S, E)

  bool empty() const { return source_ids.empty(); }
  bool diagonal(int s, int e) const;  // attack source evaluated on itself
  nlohmann::json to_json() const;
  static TransferReport from_json(const nlohmann::json& j);
  std::string render_text() const;
};

TransferReport transfer_matrix(const std::vector<TransferSource>& sources,
                               const std::vector<const Classifier*>& zoo);

// Fraction of emitted images the oracle still assigns the original class.
// The oracle stands in for the user study and must never be an attack target.
double class_preservation_rate(const std::vector<AttackRecord>& records,
                               const Classifier& oracle);

struct ClassifierEval {
  AccConf real;
  AccConf attacked;

  nlohmann::json to_json() const;
  static ClassifierEval from_json(const nlohmann::json& j);
};

struct EvalReport {
  std::map<std::string, ClassifierEval> classifiers;
  std::map<std::string, double> fid_scores;
  TransferReport transfer;  // may be empty
  double class_preservation = std::numeric_limits<double>::quiet_NaN();
  int64_t class_preservation_count = 0;
  nlohmann::json extra;  // campaign ids and other provenance

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  std::string render_text() const;
};

}  // namespace apt
