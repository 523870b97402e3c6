#include "apt/evaluate.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace apt {

namespace {

constexpr int kEvalChunk = 128;  // bounds activation memory on large sets

nlohmann::json number_or_null(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

double number_or_nan(const nlohmann::json& j) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  return j.get<double>();
}

nlohmann::json tensor_rows(const Tensor& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (int64_t r = 0; r < t.dim(0); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int64_t c = 0; c < t.dim(1); ++c) row.push_back(t[r * t.dim(1) + c]);
    rows.push_back(std::move(row));
  }
  return rows;
}

Tensor rows_tensor(const nlohmann::json& rows) {
  int64_t r = static_cast<int64_t>(rows.size());
  int64_t c = r == 0 ? 0 : static_cast<int64_t>(rows.at(0).size());
  Tensor t({static_cast<int>(r), static_cast<int>(c)});
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) t[i * c + j] = rows.at(i).at(j).get<double>();
  return t;
}

Eigen::MatrixXd to_eigen_sym(const Tensor& cov) {
  const int64_t f = cov.dim(0);
  Eigen::MatrixXd m(f, f);
  for (int64_t i = 0; i < f; ++i)
    for (int64_t j = 0; j < f; ++j) m(i, j) = 0.5 * (cov[i * f + j] + cov[j * f + i]);
  return m;
}

// Eigendecomposes a symmetric PSD matrix, clamping rounding-level negative
// eigenvalues to zero and raising on anything genuinely negative.
Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> psd_eigen(const Eigen::MatrixXd& m,
                                                         const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success)
    throw std::runtime_error(std::string("fid: eigendecomposition failed for ") + what);
  const double lmax = es.eigenvalues().maxCoeff();
  const double lmin = es.eigenvalues().minCoeff();
  const double tol = 1e-6 * std::max(lmax, 0.0) + 1e-12;
  if (lmin < -tol) {
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "fid: %s is not PSD (min eigenvalue %.6g, max eigenvalue %.6g)", what, lmin,
                  lmax);
    throw std::invalid_argument(buf);
  }
  return es;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
  auto es = psd_eigen(m, what);
  Eigen::VectorXd d = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
}

Tensor stack_images(const std::vector<Tensor>& images, size_t lo, size_t hi) {
  const Tensor& first = images[lo];
  if (first.ndim() != 3) throw std::invalid_argument("evaluate: images must be (C,H,W)");
  Tensor batch({static_cast<int>(hi - lo), first.dim(0), first.dim(1), first.dim(2)});
  const int64_t stride = first.size();
  for (size_t b = lo; b < hi; ++b) {
    if (images[b].shape() != first.shape())
      throw std::invalid_argument("evaluate: images disagree on shape");
    std::copy(images[b].data(), images[b].data() + stride,
              batch.data() + static_cast<int64_t>(b - lo) * stride);
  }
  return batch;
}

}  // namespace

nlohmann::json AccConf::to_json() const {
  return {{"accuracy", accuracy}, {"confidence", confidence}, {"count", count}};
}

AccConf AccConf::from_json(const nlohmann::json& j) {
  AccConf a;
  a.accuracy = j.at("accuracy");
  a.confidence = j.at("confidence");
  a.count = j.at("count");
  return a;
}

AccConf accuracy_confidence(const Tensor& probs, const std::vector<int>& labels) {
  if (probs.ndim() != 2) throw std::invalid_argument("accuracy_confidence: probs must be (B,K)");
  const int64_t B = probs.dim(0), K = probs.dim(1);
  if (B == 0) throw std::invalid_argument("accuracy_confidence: empty sample set");
  if (static_cast<int64_t>(labels.size()) != B)
    throw std::invalid_argument("accuracy_confidence: labels misaligned with probs");

  int64_t correct = 0;
  double conf_sum = 0.0;
  for (int64_t r = 0; r < B; ++r) {
    if (labels[r] < 0 || labels[r] >= K)
      throw std::invalid_argument("accuracy_confidence: label out of range");
    if (argmax_row(probs, static_cast<int>(r)) == labels[r]) ++correct;
    conf_sum += probs[r * K + labels[r]];
  }
  AccConf out;
  out.accuracy = static_cast<double>(correct) / static_cast<double>(B);
  out.confidence = conf_sum / static_cast<double>(B);
  out.count = B;
  return out;
}

AccConf accuracy_confidence(const Classifier& clf, const std::vector<Tensor>& images,
                            const std::vector<int>& labels) {
  if (images.empty()) throw std::invalid_argument("accuracy_confidence: empty sample set");
  if (labels.size() != images.size())
    throw std::invalid_argument("accuracy_confidence: labels misaligned with images");

  int64_t correct = 0;
  double conf_sum = 0.0;
  for (size_t lo = 0; lo < images.size(); lo += kEvalChunk) {
    size_t hi = std::min(images.size(), lo + size_t(kEvalChunk));
    Tensor probs = clf.probabilities(stack_images(images, lo, hi));
    const int64_t K = probs.dim(1);
    for (size_t b = lo; b < hi; ++b) {
      if (labels[b] < 0 || labels[b] >= K)
        throw std::invalid_argument("accuracy_confidence: label out of range");
      int64_t r = static_cast<int64_t>(b - lo);
      if (argmax_row(probs, static_cast<int>(r)) == labels[b]) ++correct;
      conf_sum += probs[r * K + labels[b]];
    }
  }
  AccConf out;
  out.accuracy = static_cast<double>(correct) / static_cast<double>(images.size());
  out.confidence = conf_sum / static_cast<double>(images.size());
  out.count = static_cast<int64_t>(images.size());
  return out;
}

Tensor perceptual_features(const PerceptualNet& net, const Tensor& images) {
  if (images.ndim() != 4) throw std::invalid_argument("perceptual_features: expected (B,C,H,W)");
  auto taps = net.embed(constant(images));
  return global_avgpool(taps.back())->value;
}

void FeatureStats::validate() const {
  if (mean.ndim() != 1) throw std::invalid_argument("feature stats: mean must be a vector");
  const int64_t f = mean.dim(0);
  if (cov.ndim() != 2 || cov.dim(0) != f || cov.dim(1) != f)
    throw std::invalid_argument("feature stats: covariance must be F x F");
  if (count < 2) throw std::invalid_argument("feature stats: need at least 2 samples");
  for (int64_t i = 0; i < f; ++i)
    for (int64_t j = i + 1; j < f; ++j)
      if (std::abs(cov[i * f + j] - cov[j * f + i]) > 1e-8)
        throw std::invalid_argument("feature stats: covariance is not symmetric");
}

FeatureStats FeatureStats::from_features(const Tensor& features) {
  if (features.ndim() != 2)
    throw std::invalid_argument("feature stats: features must be (B,F)");
  const int64_t B = features.dim(0), F = features.dim(1);
  if (B < 2) throw std::invalid_argument("feature stats: need at least 2 samples");

  FeatureStats s;
  s.count = B;
  s.mean = Tensor({static_cast<int>(F)});
  for (int64_t r = 0; r < B; ++r)
    for (int64_t j = 0; j < F; ++j) s.mean[j] += features[r * F + j];
  for (int64_t j = 0; j < F; ++j) s.mean[j] /= static_cast<double>(B);

  s.cov = Tensor({static_cast<int>(F), static_cast<int>(F)});
  std::vector<double> d(F);
  for (int64_t r = 0; r < B; ++r) {
    for (int64_t j = 0; j < F; ++j) d[j] = features[r * F + j] - s.mean[j];
    for (int64_t i = 0; i < F; ++i)
      for (int64_t j = i; j < F; ++j) s.cov[i * F + j] += d[i] * d[j];
  }
  for (int64_t i = 0; i < F; ++i)
    for (int64_t j = i; j < F; ++j) {
      s.cov[i * F + j] /= static_cast<double>(B - 1);
      s.cov[j * F + i] = s.cov[i * F + j];
    }
  return s;
}

FeatureStats FeatureStats::merged(const FeatureStats& other) const {
  validate();
  other.validate();
  const int64_t F = mean.dim(0);
  if (other.mean.dim(0) != F)
    throw std::invalid_argument("feature stats: merge dimension mismatch");

  const double na = static_cast<double>(count), nb = static_cast<double>(other.count);
  const double n = na + nb;
  FeatureStats out;
  out.count = count + other.count;
  out.mean = Tensor({static_cast<int>(F)});
  std::vector<double> delta(F);
  for (int64_t j = 0; j < F; ++j) {
    delta[j] = other.mean[j] - mean[j];
    out.mean[j] = mean[j] + delta[j] * (nb / n);
  }
  out.cov = Tensor({static_cast<int>(F), static_cast<int>(F)});
  const double cross = na * nb / n;
  for (int64_t i = 0; i < F; ++i)
    for (int64_t j = i; j < F; ++j) {
      double m2 = cov[i * F + j] * (na - 1.0) + other.cov[i * F + j] * (nb - 1.0) +
                  delta[i] * delta[j] * cross;
      out.cov[i * F + j] = m2 / (n - 1.0);
      out.cov[j * F + i] = out.cov[i * F + j];
    }
  return out;
}

nlohmann::json FeatureStats::to_json() const {
  nlohmann::json mu = nlohmann::json::array();
  for (int64_t j = 0; j < mean.size(); ++j) mu.push_back(mean[j]);
  return {{"mean", std::move(mu)}, {"cov", tensor_rows(cov)}, {"count", count}};
}

FeatureStats FeatureStats::from_json(const nlohmann::json& j) {
  FeatureStats s;
  const auto& mu = j.at("mean");
  s.mean = Tensor({static_cast<int>(mu.size())});
  for (int64_t i = 0; i < s.mean.size(); ++i) s.mean[i] = mu.at(i).get<double>();
  s.cov = rows_tensor(j.at("cov"));
  s.count = j.at("count");
  return s;
}

double fid(const FeatureStats& a, const FeatureStats& b) {
  a.validate();
  b.validate();
  const int64_t F = a.mean.dim(0);
  if (b.mean.dim(0) != F) throw std::invalid_argument("fid: feature dimension mismatch");

  Eigen::MatrixXd sa = to_eigen_sym(a.cov);
  Eigen::MatrixXd sb = to_eigen_sym(b.cov);
  psd_eigen(sb, "covariance b");  // PSD contract checked for both inputs
  Eigen::MatrixXd ra = psd_sqrt(sa, "covariance a");

  Eigen::MatrixXd inner = ra * sb * ra;
  inner = 0.5 * (inner + inner.transpose()).eval();
  auto es = psd_eigen(inner, "product matrix");
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  double mean_sq = 0.0;
  for (int64_t j = 0; j < F; ++j) {
    double d = a.mean[j] - b.mean[j];
    mean_sq += d * d;
  }
  return mean_sq + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
}

TransferSource attack_source(const std::string& source_id,
                             const std::vector<AttackRecord>& records) {
  TransferSource s;
  s.source_id = source_id;
  for (const auto& r : records) {
    if (r.failed) continue;
    s.images.push_back(r.emitted);
    s.labels.push_back(r.true_class);
  }
  return s;
}

bool TransferReport::diagonal(int s, int e) const {
  return source_ids.at(static_cast<size_t>(s)) == classifier_ids.at(static_cast<size_t>(e));
}

nlohmann::json TransferReport::to_json() const {
  nlohmann::json diag = nlohmann::json::array();
  for (size_t s = 0; s < source_ids.size(); ++s) {
    nlohmann::json row = nlohmann::json::array();
    for (size_t e = 0; e < classifier_ids.size(); ++e)
      row.push_back(diagonal(static_cast<int>(s), static_cast<int>(e)));
    diag.push_back(std::move(row));
  }
  return {{"source_ids", source_ids},
          {"classifier_ids", classifier_ids},
          {"accuracy", tensor_rows(accuracy)},
          {"counts", tensor_rows(counts)},
          {"diagonal", std::move(diag)}};
}

TransferReport TransferReport::from_json(const nlohmann::json& j) {
  TransferReport r;
  r.source_ids = j.at("source_ids").get<std::vector<std::string>>();
  r.classifier_ids = j.at("classifier_ids").get<std::vector<std::string>>();
  r.accuracy = rows_tensor(j.at("accuracy"));
  r.counts = rows_tensor(j.at("counts"));
  return r;
}

std::string TransferReport::render_text() const {
  std::string out = "transfer accuracy (rows: attack source, cols: evaluated)\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%-16s", "");
  out += buf;
  for (const auto& id : classifier_ids) {
    std::snprintf(buf, sizeof(buf), " %12s", id.c_str());
    out += buf;
  }
  out += "\n";
  for (size_t s = 0; s < source_ids.size(); ++s) {
    std::snprintf(buf, sizeof(buf), "%-16s", source_ids[s].c_str());
    out += buf;
    for (size_t e = 0; e < classifier_ids.size(); ++e) {
      double v = accuracy[static_cast<int64_t>(s) * accuracy.dim(1) + static_cast<int64_t>(e)];
      bool diag = diagonal(static_cast<int>(s), static_cast<int>(e));
      std::snprintf(buf, sizeof(buf), " %s%11.4f", diag ? "*" : " ", v);
      out += buf;
    }
    out += "\n";
  }
  out += "* attack source evaluated on itself\n";
  return out;
}

TransferReport transfer_matrix(const std::vector<TransferSource>& sources,
                               const std::vector<const Classifier*>& zoo) {
  if (zoo.empty()) throw std::invalid_argument("transfer_matrix: empty classifier zoo");
  TransferReport report;
  for (const auto* c : zoo) report.classifier_ids.push_back(c->id());
  const int64_t S = static_cast<int64_t>(sources.size());
  const int64_t E = static_cast<int64_t>(zoo.size());
  report.accuracy = Tensor({static_cast<int>(S), static_cast<int>(E)});
  report.counts = Tensor({static_cast<int>(S), static_cast<int>(E)});
  for (int64_t s = 0; s < S; ++s) {
    const TransferSource& src = sources[static_cast<size_t>(s)];
    if (src.images.empty())
      throw std::invalid_argument("transfer_matrix: source '" + src.source_id + "' has no images");
    report.source_ids.push_back(src.source_id);
    for (int64_t e = 0; e < E; ++e) {
      AccConf ac = accuracy_confidence(*zoo[static_cast<size_t>(e)], src.images, src.labels);
      report.accuracy[s * E + e] = ac.accuracy;
      report.counts[s * E + e] = static_cast<double>(ac.count);
    }
  }
  return report;
}

double class_preservation_rate(const std::vector<AttackRecord>& records,
                               const Classifier& oracle) {
  std::vector<Tensor> images;
  std::vector<int> labels;
  for (const auto& r : records) {
    if (r.failed) continue;
    images.push_back(r.emitted);
    labels.push_back(r.true_class);
  }
  if (images.empty())
    throw std::invalid_argument("class_preservation_rate: no emitted images to judge");
  return accuracy_confidence(oracle, images, labels).accuracy;
}

nlohmann::json ClassifierEval::to_json() const {
  return {{"real", real.to_json()}, {"attacked", attacked.to_json()}};
}

ClassifierEval ClassifierEval::from_json(const nlohmann::json& j) {
  ClassifierEval e;
  e.real = AccConf::from_json(j.at("real"));
  e.attacked = AccConf::from_json(j.at("attacked"));
  return e;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json cls = nlohmann::json::object();
  for (const auto& [id, ev] : classifiers) cls[id] = ev.to_json();
  nlohmann::json j{{"classifiers", std::move(cls)},
                   {"fid", fid_scores},
                   {"class_preservation", number_or_null(class_preservation)},
                   {"class_preservation_count", class_preservation_count}};
  j["transfer"] = transfer.empty() ? nlohmann::json(nullptr) : transfer.to_json();
  if (!extra.is_null()) j["extra"] = extra;
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  for (const auto& [id, ev] : j.at("classifiers").items())
    r.classifiers[id] = ClassifierEval::from_json(ev);
  r.fid_scores = j.at("fid").get<std::map<std::string, double>>();
  if (!j.at("transfer").is_null()) r.transfer = TransferReport::from_json(j.at("transfer"));
  r.class_preservation = number_or_nan(j.at("class_preservation"));
  r.class_preservation_count = j.at("class_preservation_count");
  if (j.contains("extra")) r.extra = j.at("extra");
  return r;
}

std::string EvalReport::render_text() const {
  std::string out;
  char buf[160];
  if (!classifiers.empty()) {
    std::snprintf(buf, sizeof(buf), "%-16s %9s %10s %9s %10s\n", "classifier", "real-acc",
                  "real-conf", "apt-acc", "apt-conf");
    out += buf;
    for (const auto& [id, ev] : classifiers) {
      std::snprintf(buf, sizeof(buf), "%-16s %9.4f %10.4f %9.4f %10.4f\n", id.c_str(),
                    ev.real.accuracy, ev.real.confidence, ev.attacked.accuracy,
                    ev.attacked.confidence);
      out += buf;
    }
  }
  if (!fid_scores.empty()) {
    out += "\nfid\n";
    for (const auto& [name, value] : fid_scores) {
      std::snprintf(buf, sizeof(buf), "  %-22s %12.4f\n", name.c_str(), value);
      out += buf;
    }
  }
  if (!transfer.empty()) {
    out += "\n";
    out += transfer.render_text();
  }
  if (class_preservation_count > 0) {
    std::snprintf(buf, sizeof(buf), "\nclass preservation: %.4f (n=%lld)\n", class_preservation,
                  static_cast<long long>(class_preservation_count));
    out += buf;
  }
  return out;
}

}  // namespace apt
