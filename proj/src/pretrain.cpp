#include "apt/pretrain.hpp"

#include "apt/losses.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace apt {

nlohmann::json TrainConfig::to_json() const {
  return {{"dataset_id", dataset_id}, {"epochs", epochs}, {"batch_size", batch_size},
          {"lr", lr},                 {"lr_d", lr_d},     {"seed", seed},
          {"out_path", out_path}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.dataset_id = j.at("dataset_id");
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  c.lr = j.at("lr");
  c.lr_d = j.at("lr_d");
  c.seed = j.at("seed");
  c.out_path = j.value("out_path", "");
  return c;
}

std::string log_path_for(const std::string& checkpoint_path) {
  std::string base = checkpoint_path;
  const std::string ext = ".aptc";
  if (base.size() > ext.size() && base.compare(base.size() - ext.size(), ext.size(), ext) == 0)
    base.resize(base.size() - ext.size());
  return base + ".log.jsonl";
}

PreprocessSpec preprocess_from(const Dataset& train, int crop) {
  auto [mean, stddev] = train.channel_stats();
  PreprocessSpec prep;
  prep.crop = crop;
  prep.mean = mean;
  prep.stddev = stddev;
  return prep;
}

double clean_accuracy(const Classifier& clf, const Dataset& ds) {
  if (ds.count() == 0) throw std::invalid_argument("empty dataset");
  int64_t correct = 0;
  const int64_t B = 64;
  for (int64_t start = 0; start < ds.count(); start += B) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min(start + B, ds.count()); ++i) idx.push_back(i);
    std::vector<int> pred = clf.predict(ds.batch(idx));
    for (size_t k = 0; k < idx.size(); ++k)
      if (pred[k] == ds.labels[idx[k]]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.count());
}

namespace {

void check_train_config(const TrainConfig& cfg) {
  if (cfg.epochs <= 0 || cfg.batch_size <= 0 || cfg.lr <= 0 || cfg.lr_d <= 0)
    throw std::invalid_argument("train config fields must be positive");
}

void append_log(std::ofstream* log, const nlohmann::json& record) {
  if (log && log->is_open()) *log << record.dump() << "\n";
}

// Shared supervised loop for anything with logits + params.
template <typename LogitsFn>
double supervised_train(const LogitsFn& logits_fn, ParamStore& params, const TrainConfig& cfg,
                        const Dataset& train, std::ofstream* log) {
  Adam opt(params.vars(), {cfg.lr, 0.9, 0.999, 1e-8});
  RandomStream rs(derive_seed(cfg.seed, "supervised"));
  std::vector<int64_t> order(train.count());
  std::iota(order.begin(), order.end(), 0);
  double epoch_loss = 0.0;
  for (int e = 0; e < cfg.epochs; ++e) {
    rs.shuffle(order);
    epoch_loss = 0.0;
    int64_t correct = 0, seen = 0, steps = 0;
    for (int64_t start = 0; start + cfg.batch_size <= train.count(); start += cfg.batch_size) {
      std::vector<int64_t> idx(order.begin() + start, order.begin() + start + cfg.batch_size);
      std::vector<int> lb(idx.size());
      for (size_t k = 0; k < idx.size(); ++k) lb[k] = train.labels[idx[k]];
      VarPtr lg = logits_fn(constant(train.batch(idx)));
      VarPtr loss = cross_entropy(lg, lb);
      if (!std::isfinite(loss->value.item()))
        throw std::runtime_error("supervised training diverged");
      params.zero_grad();
      backward(loss);
      opt.step();
      epoch_loss += loss->value.item();
      ++steps;
      for (size_t k = 0; k < idx.size(); ++k) {
        if (argmax_row(lg->value, static_cast<int>(k)) == lb[k]) ++correct;
        ++seen;
      }
    }
    if (steps == 0) throw std::invalid_argument("batch size exceeds dataset size");
    epoch_loss /= steps;
    append_log(log, {{"epoch", e},
                     {"loss", epoch_loss},
                     {"train_accuracy", static_cast<double>(correct) / seen}});
  }
  return epoch_loss;
}

}  // namespace

double train_classifier(const std::string& id, const std::string& arch, const TrainConfig& cfg,
                        const Dataset& train, const Dataset& val, const Dataset& test,
                        std::optional<Classifier>* out) {
  check_train_config(cfg);
  int C = train.images.dim(1), S = train.images.dim(2);
  int crop = S >= 32 ? S - 4 : S;
  Classifier clf(id, arch, C, S, train.num_classes, preprocess_from(train, crop),
                 derive_seed(cfg.seed, "clf." + id));
  std::ofstream log;
  if (!cfg.out_path.empty()) log.open(log_path_for(cfg.out_path));
  double final_loss = supervised_train([&](const VarPtr& x) { return clf.logits(x); },
                                       clf.params(), cfg, train, &log);
  double val_acc = clean_accuracy(clf, val);
  double test_acc = clean_accuracy(clf, test);
  if (!cfg.out_path.empty()) {
    clf.save(cfg.out_path, {{"seed", cfg.seed},
                            {"config_hash", hash_json_hex(cfg.to_json())},
                            {"dataset_id", cfg.dataset_id},
                            {"final_train_loss", final_loss},
                            {"val_accuracy", val_acc},
                            {"test_accuracy", test_acc}});
  }
  if (out) out->emplace(std::move(clf));
  return test_acc;
}

double train_perceptual(const TrainConfig& cfg, const Dataset& train, const Dataset& test,
                        std::optional<PerceptualNet>* out) {
  check_train_config(cfg);
  int C = train.images.dim(1), S = train.images.dim(2);
  PerceptualNet net(C, S, train.num_classes, derive_seed(cfg.seed, "perc"));
  std::ofstream log;
  if (!cfg.out_path.empty()) log.open(log_path_for(cfg.out_path));
  double final_loss = supervised_train([&](const VarPtr& x) { return net.logits(x); },
                                       net.params(), cfg, train, &log);

  // Head-on accuracy for bookkeeping: argmax of the training head.
  int64_t correct = 0;
  for (int64_t start = 0; start < test.count(); start += 64) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min<int64_t>(start + 64, test.count()); ++i) idx.push_back(i);
    Tensor lg = net.logits(constant(test.batch(idx)))->value;
    for (size_t k = 0; k < idx.size(); ++k)
      if (argmax_row(lg, static_cast<int>(k)) == test.labels[idx[k]]) ++correct;
  }
  double test_acc = test.count() ? static_cast<double>(correct) / test.count() : 0.0;

  if (!cfg.out_path.empty()) {
    net.save(cfg.out_path, {{"seed", cfg.seed},
                            {"config_hash", hash_json_hex(cfg.to_json())},
                            {"dataset_id", cfg.dataset_id},
                            {"final_train_loss", final_loss},
                            {"test_accuracy", test_acc}});
  }
  if (out) out->emplace(std::move(net));
  return test_acc;
}

GanTrainStats train_gan(const GeneratorConfig& model_cfg, const TrainConfig& cfg,
                        const Dataset& train, GanBundle* out) {
  check_train_config(cfg);
  if (train.count() < cfg.batch_size)
    throw std::invalid_argument("dataset smaller than one batch");
  Generator gen(model_cfg, derive_seed(cfg.seed, "gan.g"));
  DiscriminatorSet discs(model_cfg, derive_seed(cfg.seed, "gan.d"));

  std::vector<VarPtr> gvars = gen.mapping_params().vars();
  for (const VarPtr& v : gen.synthesis_params().vars()) gvars.push_back(v);
  Adam opt_g(gvars, {cfg.lr, 0.5, 0.999, 1e-8});
  Adam opt_d(discs.params().vars(), {cfg.lr_d, 0.5, 0.999, 1e-8});

  RandomStream rs(derive_seed(cfg.seed, "gan.train"));
  std::vector<int64_t> order(train.count());
  std::iota(order.begin(), order.end(), 0);
  std::ofstream log;
  if (!cfg.out_path.empty()) log.open(log_path_for(cfg.out_path));

  const int B = cfg.batch_size;
  const int L = model_cfg.num_layers();
  GanTrainStats stats;
  for (int e = 0; e < cfg.epochs; ++e) {
    rs.shuffle(order);
    double sum_d = 0.0, sum_g = 0.0;
    int steps = 0;
    // Decaying instance noise keeps the critics from saturating early on.
    double inst = 0.08 * (1.0 - static_cast<double>(e) / cfg.epochs);
    for (int64_t start = 0; start + B <= train.count(); start += B) {
      std::vector<int64_t> idx(order.begin() + start, order.begin() + start + B);
      std::vector<int> lb(idx.size());
      for (size_t k = 0; k < idx.size(); ++k) lb[k] = train.labels[idx[k]];
      Tensor xb = train.batch(idx);

      Tensor z({B, model_cfg.d_z});
      rs.fill_normal(z);
      VarPtr style = gen.map_forward(constant(z), lb);
      std::vector<VarPtr> styles(L, style);
      std::vector<VarPtr> noise;
      for (Tensor& n : gen.sample_noise(rs, B)) noise.push_back(constant(std::move(n)));
      VarPtr fake = gen.synthesize(styles, noise);

      auto jitter = [&](const Tensor& base) {
        Tensor t = base;
        if (inst > 0.0) {
          for (auto& v : t.vec()) v += inst * rs.normal();
        }
        return t;
      };

      // Critic step on detached fakes.
      VarPtr d_loss = nullptr;
      {
        auto s_real = discs.score_conditioned(constant(jitter(xb)), lb);
        auto s_fake = discs.score_conditioned(constant(jitter(fake->value)), lb);
        for (int i = 0; i < discs.scales(); ++i) {
          VarPtr term = add(mean_all(softplus(neg(s_real[i]))), mean_all(softplus(s_fake[i])));
          d_loss = d_loss ? add(d_loss, term) : term;
        }
        discs.params().zero_grad();
        backward(d_loss);
        opt_d.step();
      }

      // Generator step against the updated critics; same instance noise scale.
      VarPtr g_loss = nullptr;
      {
        VarPtr fake_in = fake;
        if (inst > 0.0) {
          Tensor n(fake->value.shape());
          rs.fill_normal(n);
          n.scale_inplace(inst);
          fake_in = add(fake, constant(std::move(n)));
        }
        auto s_fake = discs.score_conditioned(fake_in, lb);
        for (int i = 0; i < discs.scales(); ++i) {
          VarPtr term = mean_all(softplus(neg(s_fake[i])));
          g_loss = g_loss ? add(g_loss, term) : term;
        }
        gen.mapping_params().zero_grad();
        gen.synthesis_params().zero_grad();
        backward(g_loss);
        opt_g.step();
      }

      double dv = d_loss->value.item(), gv = g_loss->value.item();
      if (!std::isfinite(dv) || !std::isfinite(gv))
        throw std::runtime_error("gan training diverged at epoch " + std::to_string(e) +
                                 " (d_loss=" + std::to_string(dv) +
                                 ", g_loss=" + std::to_string(gv) + ")");
      sum_d += dv;
      sum_g += gv;
      ++steps;
    }
    stats.final_d_loss = sum_d / steps;
    stats.final_g_loss = sum_g / steps;
    stats.epochs_run = e + 1;
    append_log(&log, {{"epoch", e}, {"d_loss", stats.final_d_loss}, {"g_loss", stats.final_g_loss}});
  }

  if (!cfg.out_path.empty()) {
    Checkpoint ck;
    ck.meta = {{"kind", "gan"},
               {"config", model_cfg.to_json()},
               {"config_hash", hash_json_hex(model_cfg.to_json())},
               {"train_config", cfg.to_json()},
               {"seed", cfg.seed},
               {"dataset_id", cfg.dataset_id},
               {"epochs", stats.epochs_run},
               {"final_g_loss", stats.final_g_loss},
               {"final_d_loss", stats.final_d_loss}};
    params_into_checkpoint(gen.mapping_params(), ck, "map.");
    params_into_checkpoint(gen.synthesis_params(), ck, "syn.");
    discs.save_into(ck);
    save_checkpoint(cfg.out_path, ck);
  }
  if (out) {
    out->gen.mapping_params().copy_values_from(gen.mapping_params());
    out->gen.synthesis_params().copy_values_from(gen.synthesis_params());
    out->discs.params().copy_values_from(discs.params());
  }
  return stats;
}

}  // namespace apt
