#include "apt/robustify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace apt {

void FinetuneConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("finetune lr must be positive");
  if (epochs < 0) throw std::invalid_argument("finetune epochs must be >= 0");
  if (batch_size <= 0) throw std::invalid_argument("finetune batch size must be positive");
  if (!(apt_fraction >= 0.0 && apt_fraction <= 1.0))
    throw std::invalid_argument("apt_fraction must lie in [0, 1]");
}

nlohmann::json FinetuneConfig::to_json() const {
  return {{"lr", lr},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"apt_fraction", apt_fraction},
          {"seed", seed},
          {"out_path", out_path}};
}

FinetuneConfig FinetuneConfig::from_json(const nlohmann::json& j) {
  FinetuneConfig c;
  c.lr = j.at("lr");
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  c.apt_fraction = j.at("apt_fraction");
  c.seed = j.at("seed");
  c.out_path = j.value("out_path", "");
  return c;
}

FinetuneSet build_finetune_set(const std::string& campaign_id, const Dataset& reference,
                               const std::vector<AttackRecord>& records) {
  if (reference.count() == 0) throw std::invalid_argument("reference dataset is empty");
  std::vector<const AttackRecord*> kept;
  for (const auto& r : records) {
    if (r.failed) continue;
    if (r.true_class < 0 || r.true_class >= reference.num_classes)
      throw std::invalid_argument("attack record lacks a usable true class");
    kept.push_back(&r);
  }
  FinetuneSet set;
  set.campaign_id = campaign_id;
  set.data.id = reference.id + "-apt-" + campaign_id;
  set.data.num_classes = reference.num_classes;
  if (kept.empty()) return set;

  int C = reference.images.dim(1), H = reference.images.dim(2), W = reference.images.dim(3);
  int64_t stride = static_cast<int64_t>(C) * H * W;
  set.data.images = Tensor({static_cast<int>(kept.size()), C, H, W});
  for (size_t i = 0; i < kept.size(); ++i) {
    const Tensor& img = kept[i]->emitted;
    if (img.size() != stride) throw std::invalid_argument("emitted image geometry mismatch");
    std::copy(img.vec().begin(), img.vec().end(),
              set.data.images.vec().begin() + static_cast<int64_t>(i) * stride);
    set.data.labels.push_back(kept[i]->true_class);
    set.source_ids.push_back(kept[i]->image_id);
  }
  return set;
}

Classifier finetune(const Classifier& base, const FinetuneSet& apt, const Dataset& clean,
                    const FinetuneConfig& cfg) {
  cfg.validate();
  if (clean.count() == 0) throw std::invalid_argument("clean dataset is empty");
  if (clean.num_classes != base.num_classes() || apt.data.num_classes != base.num_classes())
    throw std::invalid_argument("finetune data class count mismatch");

  int n_apt = std::min<int>(cfg.batch_size,
                            static_cast<int>(std::lround(cfg.apt_fraction * cfg.batch_size)));
  if (n_apt > 0 && apt.data.count() == 0)
    throw std::invalid_argument("finetune set is empty but apt_fraction > 0");

  Classifier ft(base.id() + "-apt-ft-" + apt.campaign_id, base.arch(), base.img_channels(),
                base.img_size(), base.num_classes(), base.preprocess(), 0);
  ft.params().copy_values_from(base.params());

  std::ofstream log;
  if (!cfg.out_path.empty()) log.open(log_path_for(cfg.out_path));

  // An epoch shows every attack image once; clean-only schedules fall back to
  // one pass over the clean split.
  int64_t per_epoch = n_apt > 0 ? (apt.data.count() + n_apt - 1) / n_apt
                                : clean.count() / cfg.batch_size;
  if (cfg.epochs > 0 && per_epoch == 0)
    throw std::invalid_argument("batch size exceeds dataset size");

  Adam opt(ft.params().vars(), {cfg.lr, 0.9, 0.999, 1e-8});
  RandomStream rs(derive_seed(cfg.seed, "finetune"));
  std::vector<int64_t> apt_order(apt.data.count());
  std::iota(apt_order.begin(), apt_order.end(), 0);
  std::vector<int64_t> clean_order(clean.count());
  std::iota(clean_order.begin(), clean_order.end(), 0);
  size_t ai = apt_order.size(), ci = clean_order.size();  // force a first shuffle
  auto next_apt = [&]() {
    if (ai == apt_order.size()) { rs.shuffle(apt_order); ai = 0; }
    return apt_order[ai++];
  };
  auto next_clean = [&]() {
    if (ci == clean_order.size()) { rs.shuffle(clean_order); ci = 0; }
    return clean_order[ci++];
  };

  int C = base.img_channels(), S = base.img_size();
  int64_t stride = static_cast<int64_t>(C) * S * S;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  for (int e = 0; e < cfg.epochs; ++e) {
    double epoch_loss = 0.0;
    int64_t correct = 0, seen = 0;
    for (int64_t step = 0; step < per_epoch; ++step) {
      Tensor batch({cfg.batch_size, C, S, S});
      std::vector<int> lb(static_cast<size_t>(cfg.batch_size));
      for (int k = 0; k < cfg.batch_size; ++k) {
        const Dataset& src = k < n_apt ? apt.data : clean;
        int64_t row = k < n_apt ? next_apt() : next_clean();
        std::copy(src.images.vec().begin() + row * stride,
                  src.images.vec().begin() + (row + 1) * stride,
                  batch.vec().begin() + static_cast<int64_t>(k) * stride);
        lb[static_cast<size_t>(k)] = src.labels[static_cast<size_t>(row)];
      }
      VarPtr lg = ft.logits(constant(batch));
      VarPtr loss = cross_entropy(lg, lb);
      if (!std::isfinite(loss->value.item())) throw std::runtime_error("finetune diverged");
      ft.params().zero_grad();
      backward(loss);
      opt.step();
      epoch_loss += loss->value.item();
      for (int k = 0; k < cfg.batch_size; ++k) {
        if (argmax_row(lg->value, k) == lb[static_cast<size_t>(k)]) ++correct;
        ++seen;
      }
    }
    epoch_loss /= static_cast<double>(per_epoch);
    final_loss = epoch_loss;
    if (log.is_open())
      log << nlohmann::json{{"epoch", e},
                            {"loss", epoch_loss},
                            {"train_accuracy", static_cast<double>(correct) / seen}}
                 .dump()
          << "\n";
  }

  if (!cfg.out_path.empty()) {
    ft.save(cfg.out_path, {{"base_id", base.id()},
                           {"campaign_id", apt.campaign_id},
                           {"seed", cfg.seed},
                           {"config_hash", hash_json_hex(cfg.to_json())},
                           {"finetune_images", apt.data.count()},
                           {"final_train_loss", final_loss}});
  }
  return ft;
}

namespace {

AccConf clean_scores(const Classifier& clf, const Dataset& ds) {
  std::vector<Tensor> images;
  images.reserve(static_cast<size_t>(ds.count()));
  for (int64_t i = 0; i < ds.count(); ++i) images.push_back(ds.image(i));
  return accuracy_confidence(clf, images, ds.labels);
}

}  // namespace

RobustnessDelta before_after_eval(const Classifier& before, const Classifier& after,
                                  const std::string& campaign_id,
                                  const std::vector<AttackRecord>& held_out,
                                  const Dataset& clean_test,
                                  const std::vector<std::string>& finetune_source_ids) {
  std::unordered_set<std::string> trained(finetune_source_ids.begin(), finetune_source_ids.end());
  for (const auto& r : held_out)
    if (!r.image_id.empty() && trained.count(r.image_id))
      throw std::invalid_argument("held-out campaign leaks finetune image " + r.image_id);
  TransferSource src = attack_source(campaign_id, held_out);
  if (src.images.empty()) throw std::invalid_argument("held-out campaign emitted no images");
  if (clean_test.count() == 0) throw std::invalid_argument("clean test split is empty");

  RobustnessDelta d;
  d.before_id = before.id();
  d.after_id = after.id();
  d.campaign_id = campaign_id;
  d.before_attacked = accuracy_confidence(before, src.images, src.labels);
  d.after_attacked = accuracy_confidence(after, src.images, src.labels);
  d.before_clean = clean_scores(before, clean_test);
  d.after_clean = clean_scores(after, clean_test);
  d.attacked_accuracy_delta = d.after_attacked.accuracy - d.before_attacked.accuracy;
  d.attacked_confidence_delta = d.after_attacked.confidence - d.before_attacked.confidence;
  d.clean_accuracy_delta = d.after_clean.accuracy - d.before_clean.accuracy;
  return d;
}

nlohmann::json RobustnessDelta::to_json() const {
  return {{"before_id", before_id},
          {"after_id", after_id},
          {"campaign_id", campaign_id},
          {"before_attacked", before_attacked.to_json()},
          {"after_attacked", after_attacked.to_json()},
          {"before_clean", before_clean.to_json()},
          {"after_clean", after_clean.to_json()},
          {"attacked_accuracy_delta", attacked_accuracy_delta},
          {"attacked_confidence_delta", attacked_confidence_delta},
          {"clean_accuracy_delta", clean_accuracy_delta}};
}

RobustnessDelta RobustnessDelta::from_json(const nlohmann::json& j) {
  RobustnessDelta d;
  d.before_id = j.at("before_id");
  d.after_id = j.at("after_id");
  d.campaign_id = j.at("campaign_id");
  d.before_attacked = AccConf::from_json(j.at("before_attacked"));
  d.after_attacked = AccConf::from_json(j.at("after_attacked"));
  d.before_clean = AccConf::from_json(j.at("before_clean"));
  d.after_clean = AccConf::from_json(j.at("after_clean"));
  d.attacked_accuracy_delta = j.at("attacked_accuracy_delta");
  d.attacked_confidence_delta = j.at("attacked_confidence_delta");
  d.clean_accuracy_delta = j.at("clean_accuracy_delta");
  return d;
}

std::string RobustnessDelta::render_text() const {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "robustness before/after (campaign %s)\n", campaign_id.c_str());
  out += buf;
  std::snprintf(buf, sizeof(buf), "  %-20s %s -> %s\n", "classifier", before_id.c_str(),
                after_id.c_str());
  out += buf;
  auto line = [&](const char* name, double b, double a, double delta) {
    std::snprintf(buf, sizeof(buf), "  %-20s %9.4f -> %9.4f  (delta %+.4f)\n", name, b, a, delta);
    out += buf;
  };
  line("attacked accuracy", before_attacked.accuracy, after_attacked.accuracy,
       attacked_accuracy_delta);
  line("attacked confidence", before_attacked.confidence, after_attacked.confidence,
       attacked_confidence_delta);
  line("clean accuracy", before_clean.accuracy, after_clean.accuracy, clean_accuracy_delta);
  return out;
}

}  // namespace apt
