#include "apt/cli.hpp"

#include "apt/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>

namespace apt {

namespace fs = std::filesystem;

namespace {

// Error with a CLI exit code attached: 1 = validation, 2 = runtime fault.
struct CliError : std::runtime_error {
  int code;
  CliError(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

// ---- strict config parsing ----------------------------------------------

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) { known = true; break; }
    if (!known)
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
void take(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void safe_name(const std::string& v, const std::string& what) {
  if (v.empty() || v.find('/') != std::string::npos || v.find("..") != std::string::npos)
    throw std::invalid_argument("config: " + what + " must be a non-empty path-safe name, got '" +
                                v + "'");
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.classifiers = {ClassifierSpec{"target", "cnn", 12, 16, 1e-3, 1},
                   ClassifierSpec{"transfer", "mlp", 12, 16, 1e-3, 1}};
  c.attack.classifier_id = "target";
  c.finalize();
  return c;
}

void RunConfig::finalize() {
  model.num_classes = 10;  // the shapes corpus always has ten classes
  model.img_channels = 3;
  model.img_size = img_size;
  dataset_seed = derive_seed(seed, "dataset");
  gan.seed = derive_seed(seed, "gan");
  perceptual.seed = derive_seed(seed, "perceptual");
  for (auto& spec : classifiers) spec.seed = derive_seed(seed, "classifier." + spec.id);
  inversion.seed = derive_seed(seed, "inversion");
  attack.seed = derive_seed(seed, "attack");
  finetune.seed = derive_seed(seed, "finetune");
  finetune.out_path.clear();  // the finetune command decides where to write
  if (attack.classifier_id.empty() && !classifiers.empty())
    attack.classifier_id = classifiers.front().id;
}

void RunConfig::validate() const {
  if (output_root.empty()) throw std::invalid_argument("config: output_root must not be empty");
  safe_name(dataset_id, "dataset.id");
  safe_name(campaign_id, "attack.campaign_id");
  if (per_class < 1) throw std::invalid_argument("config: dataset.per_class must be >= 1");
  int ratio = model.base_size > 0 ? img_size / model.base_size : 0;
  if (model.base_size < 1 || img_size < model.base_size ||
      img_size != model.base_size * ratio || (ratio & (ratio - 1)) != 0)
    throw std::invalid_argument(
        "config: dataset.img_size must be model.base_size times a power of two");
  if (model.d_z < 1 || model.s_dim < 1 || model.map_hidden < 1 || model.base_channels < 1)
    throw std::invalid_argument("config: model dimensions must be positive");

  if (classifiers.empty())
    throw std::invalid_argument("config: pretrain.classifiers must not be empty");
  std::set<std::string> ids;
  for (const auto& spec : classifiers) {
    safe_name(spec.id, "classifier id");
    if (!ids.insert(spec.id).second)
      throw std::invalid_argument("config: duplicate classifier id '" + spec.id + "'");
    if (spec.arch != "cnn" && spec.arch != "mlp")
      throw std::invalid_argument("config: classifier arch must be cnn or mlp, got '" +
                                  spec.arch + "'");
    if (spec.epochs < 1 || spec.batch_size < 1 || spec.lr <= 0.0)
      throw std::invalid_argument("config: classifier '" + spec.id +
                                  "' training fields must be positive");
  }
  if (gan.epochs < 1 || gan.batch_size < 1 || gan.lr <= 0.0 || gan.lr_d <= 0.0)
    throw std::invalid_argument("config: pretrain.gan fields must be positive");
  if (perceptual.epochs < 1 || perceptual.batch_size < 1 || perceptual.lr <= 0.0)
    throw std::invalid_argument("config: pretrain.perceptual fields must be positive");

  inversion.validate();
  attack.validate();
  finetune.validate();
  if (!ids.count(attack.classifier_id))
    throw std::invalid_argument("config: attack.classifier_id '" + attack.classifier_id +
                                "' is not a configured classifier");
  if (attack_split != "train" && attack_split != "val" && attack_split != "test")
    throw std::invalid_argument("config: attack.split must be train, val or test");
  if (attack_count < -1) throw std::invalid_argument("config: attack.count must be >= -1");
  if (finetune_train_count < -1)
    throw std::invalid_argument("config: finetune.train_count must be >= -1");
  if (!eval_judge.empty() && !ids.count(eval_judge))
    throw std::invalid_argument("config: eval.judge '" + eval_judge +
                                "' is not a configured classifier");
  if (eval_judge == attack.classifier_id && !eval_judge.empty())
    throw std::invalid_argument("config: eval.judge must not be the attack target");
  if (ablate_count < 1) throw std::invalid_argument("config: ablate.count must be >= 1");
  if (sweep_count < 1) throw std::invalid_argument("config: sweep.count must be >= 1");
  if (sweep_d.empty()) throw std::invalid_argument("config: sweep.d_values must not be empty");
  for (double d : sweep_d)
    if (!(d > 0.0)) throw std::invalid_argument("config: sweep.d_values must be positive");
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json cls = nlohmann::json::array();
  for (const auto& spec : classifiers)
    cls.push_back({{"id", spec.id},
                   {"arch", spec.arch},
                   {"epochs", spec.epochs},
                   {"batch_size", spec.batch_size},
                   {"lr", spec.lr},
                   {"seed", spec.seed}});
  nlohmann::json atk = attack.to_json();
  atk["split"] = attack_split;
  atk["count"] = attack_count;
  atk["campaign_id"] = campaign_id;
  nlohmann::json ft = finetune.to_json();
  ft.erase("out_path");
  ft["train_count"] = finetune_train_count;
  return {{"seed", seed},
          {"output_root", output_root},
          {"dataset",
           {{"id", dataset_id},
            {"per_class", per_class},
            {"img_size", img_size},
            {"seed", dataset_seed}}},
          {"model", model.to_json()},
          {"pretrain",
           {{"gan",
             {{"epochs", gan.epochs},
              {"batch_size", gan.batch_size},
              {"lr", gan.lr},
              {"lr_d", gan.lr_d},
              {"seed", gan.seed}}},
            {"classifiers", cls},
            {"perceptual",
             {{"epochs", perceptual.epochs},
              {"batch_size", perceptual.batch_size},
              {"lr", perceptual.lr},
              {"seed", perceptual.seed}}}}},
          {"inversion", inversion.to_json()},
          {"attack", atk},
          {"finetune", ft},
          {"eval", {{"judge", eval_judge}}},
          {"ablate", {{"count", ablate_count}}},
          {"sweep", {{"d_values", sweep_d}, {"count", sweep_count}}}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c = defaults();
  check_keys(j,
             {"seed", "output_root", "dataset", "model", "pretrain", "inversion", "attack",
              "finetune", "eval", "ablate", "sweep"},
             "top level");
  take(j, "seed", c.seed);
  take(j, "output_root", c.output_root);

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    check_keys(d, {"id", "per_class", "img_size"}, "dataset");
    take(d, "id", c.dataset_id);
    take(d, "per_class", c.per_class);
    take(d, "img_size", c.img_size);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, {"d_z", "s_dim", "map_hidden", "base_channels", "base_size"}, "model");
    take(m, "d_z", c.model.d_z);
    take(m, "s_dim", c.model.s_dim);
    take(m, "map_hidden", c.model.map_hidden);
    take(m, "base_channels", c.model.base_channels);
    take(m, "base_size", c.model.base_size);
  }
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    check_keys(p, {"gan", "classifiers", "perceptual"}, "pretrain");
    if (p.contains("gan")) {
      const auto& g = p.at("gan");
      check_keys(g, {"epochs", "batch_size", "lr", "lr_d"}, "pretrain.gan");
      take(g, "epochs", c.gan.epochs);
      take(g, "batch_size", c.gan.batch_size);
      take(g, "lr", c.gan.lr);
      take(g, "lr_d", c.gan.lr_d);
    }
    if (p.contains("classifiers")) {
      if (!p.at("classifiers").is_array())
        throw std::invalid_argument("config: pretrain.classifiers must be an array");
      c.classifiers.clear();
      for (const auto& e : p.at("classifiers")) {
        check_keys(e, {"id", "arch", "epochs", "batch_size", "lr"}, "pretrain.classifiers entry");
        ClassifierSpec spec;
        take(e, "id", spec.id);
        take(e, "arch", spec.arch);
        take(e, "epochs", spec.epochs);
        take(e, "batch_size", spec.batch_size);
        take(e, "lr", spec.lr);
        c.classifiers.push_back(spec);
      }
      if (!c.classifiers.empty()) c.attack.classifier_id = c.classifiers.front().id;
    }
    if (p.contains("perceptual")) {
      const auto& q = p.at("perceptual");
      check_keys(q, {"epochs", "batch_size", "lr"}, "pretrain.perceptual");
      take(q, "epochs", c.perceptual.epochs);
      take(q, "batch_size", c.perceptual.batch_size);
      take(q, "lr", c.perceptual.lr);
    }
  }
  if (j.contains("inversion")) {
    const auto& v = j.at("inversion");
    check_keys(v, {"iterations", "lr_max", "warmup_iters", "cosine_tail_iters", "lambda_n"},
               "inversion");
    take(v, "iterations", c.inversion.iterations);
    take(v, "lr_max", c.inversion.lr_max);
    take(v, "warmup_iters", c.inversion.warmup_iters);
    take(v, "cosine_tail_iters", c.inversion.cosine_tail_iters);
    take(v, "lambda_n", c.inversion.lambda_n);
  }
  if (j.contains("attack")) {
    const auto& a = j.at("attack");
    check_keys(a,
               {"weights", "d", "alpha", "lr", "max_iters", "classifier_id", "resample_c_any",
                "ablation", "split", "count", "campaign_id"},
               "attack");
    if (a.contains("weights")) {
      const auto& w = a.at("weights");
      check_keys(w, {"lambda_n", "lambda_l2_p", "lambda_l2_r", "lambda_ce", "lambda_pg"},
                 "attack.weights");
      take(w, "lambda_n", c.attack.weights.lambda_n);
      take(w, "lambda_l2_p", c.attack.weights.lambda_l2_p);
      take(w, "lambda_l2_r", c.attack.weights.lambda_l2_r);
      take(w, "lambda_ce", c.attack.weights.lambda_ce);
      take(w, "lambda_pg", c.attack.weights.lambda_pg);
    }
    take(a, "d", c.attack.d);
    take(a, "alpha", c.attack.alpha);
    take(a, "lr", c.attack.lr);
    take(a, "max_iters", c.attack.max_iters);
    take(a, "classifier_id", c.attack.classifier_id);
    take(a, "resample_c_any", c.attack.resample_c_any);
    take(a, "ablation", c.attack.ablation);
    take(a, "split", c.attack_split);
    take(a, "count", c.attack_count);
    take(a, "campaign_id", c.campaign_id);
  }
  if (j.contains("finetune")) {
    const auto& f = j.at("finetune");
    check_keys(f, {"lr", "epochs", "batch_size", "apt_fraction", "train_count"}, "finetune");
    take(f, "lr", c.finetune.lr);
    take(f, "epochs", c.finetune.epochs);
    take(f, "batch_size", c.finetune.batch_size);
    take(f, "apt_fraction", c.finetune.apt_fraction);
    take(f, "train_count", c.finetune_train_count);
  }
  if (j.contains("eval")) {
    check_keys(j.at("eval"), {"judge"}, "eval");
    take(j.at("eval"), "judge", c.eval_judge);
  }
  if (j.contains("ablate")) {
    check_keys(j.at("ablate"), {"count"}, "ablate");
    take(j.at("ablate"), "count", c.ablate_count);
  }
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    check_keys(s, {"d_values", "count"}, "sweep");
    take(s, "d_values", c.sweep_d);
    take(s, "count", c.sweep_count);
  }
  c.finalize();
  c.validate();
  return c;
}

// ---- content-addressed layout --------------------------------------------

RunPaths resolve_paths(const RunConfig& cfg) {
  RunPaths p;
  const char* env = std::getenv("APTBENCH_HOME");
  p.home = (env != nullptr && *env != '\0') ? fs::path(env) : fs::path(cfg.output_root);

  nlohmann::json doc = cfg.to_json();
  nlohmann::json key{{"dataset", doc.at("dataset")}};
  p.dataset_key = hash_json_hex(key);
  key["model"] = doc.at("model");
  key["pretrain"] = doc.at("pretrain");
  p.ckpt_key = hash_json_hex(key);
  key["inversion"] = doc.at("inversion");
  p.pivot_key = hash_json_hex(key);
  key["attack"] = doc.at("attack");
  p.attack_key = hash_json_hex(key);

  p.dataset_dir = p.home / "datasets" / (cfg.dataset_id + "-" + p.dataset_key);
  p.ckpt_dir = p.home / "checkpoints" / p.ckpt_key;
  p.pivot_dir = p.home / "pivots" / p.pivot_key;
  p.attack_dir = p.home / "runs" / (cfg.campaign_id + "-" + p.attack_key);
  return p;
}

namespace {

// Stage key for a derived command: the pivot-level document plus the sections
// the command consumes.
std::string derived_key(const RunConfig& cfg, std::initializer_list<const char*> extra_sections,
                        const nlohmann::json& override_attack = {}) {
  nlohmann::json doc = cfg.to_json();
  nlohmann::json key{{"dataset", doc.at("dataset")},
                     {"model", doc.at("model")},
                     {"pretrain", doc.at("pretrain")},
                     {"inversion", doc.at("inversion")}};
  key["attack"] = override_attack.is_null() ? doc.at("attack") : override_attack;
  for (const char* s : extra_sections) key[s] = doc.at(s);
  return hash_json_hex(key);
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw CliError(2, "cannot write " + path.string());
  out << text;
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw CliError(2, "cannot read " + path.string());
  return nlohmann::json::parse(in);
}

// ---- artifact access -------------------------------------------------------

Dataset require_split(const RunPaths& p, const std::string& which) {
  fs::path f = p.dataset_dir / (which + ".aptd");
  if (!fs::exists(f))
    throw CliError(1, "missing dataset split " + f.string() + "; run `aptbench ingest` first");
  return load_dataset(f.string());
}

struct Zoo {
  Generator gen;
  DiscriminatorSet discs;
  PerceptualNet net;
  std::vector<Classifier> classifiers;

  const Classifier& by_id(const std::string& id) const {
    for (const auto& c : classifiers)
      if (c.id() == id) return c;
    throw CliError(2, "classifier '" + id + "' missing from the checkpoint set");
  }
};

fs::path require_checkpoint(const RunPaths& p, const std::string& name) {
  fs::path f = p.ckpt_dir / name;
  if (!fs::exists(f))
    throw CliError(1, "missing checkpoint " + f.string() + "; run `aptbench pretrain` first");
  return f;
}

Zoo load_zoo(const RunConfig& cfg, const RunPaths& p) {
  Checkpoint gan_ck = load_checkpoint(require_checkpoint(p, "gan.aptc").string());
  GeneratorConfig gc = GeneratorConfig::from_json(gan_ck.meta.at("config"));
  Zoo z{Generator::load(gan_ck), DiscriminatorSet::load(gan_ck, gc),
        PerceptualNet::load(require_checkpoint(p, "perceptual.aptc").string()),
        {}};
  for (const auto& spec : cfg.classifiers)
    z.classifiers.push_back(Classifier::load(require_checkpoint(p, spec.id + ".aptc").string()));
  return z;
}

// ---- shared metric helpers -------------------------------------------------

std::vector<int> scope_indices(const Dataset& ds, int count) {
  int64_t n = count < 0 ? ds.count() : std::min<int64_t>(count, ds.count());
  std::vector<int> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = static_cast<int>(i);
  return idx;
}

AccConf dataset_scores(const Classifier& clf, const Dataset& ds) {
  std::vector<Tensor> images;
  images.reserve(static_cast<size_t>(ds.count()));
  for (int64_t i = 0; i < ds.count(); ++i) images.push_back(ds.image(i));
  return accuracy_confidence(clf, images, ds.labels);
}

double fooling_rate(const std::vector<AttackRecord>& records, const std::string& target_id) {
  if (records.empty()) return 0.0;
  int fooled = 0;
  for (const auto& r : records)
    if (!r.failed && r.fooled.count(target_id) && r.fooled.at(target_id)) ++fooled;
  return static_cast<double>(fooled) / static_cast<double>(records.size());
}

// Final objective value per attack: at emission when something was emitted,
// else at the last visited state.
double mean_final_lpt(const std::vector<AttackRecord>& records) {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : records) {
    if (!r.failed && std::isfinite(r.l_pt_at_emission)) {
      sum += r.l_pt_at_emission;
      ++n;
    } else if (!r.trace.empty() && std::isfinite(r.trace.back().l_pt)) {
      sum += r.trace.back().l_pt;
      ++n;
    }
  }
  return n > 0 ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

double mean_realness(const DiscriminatorSet& discs, const std::vector<AttackRecord>& records) {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : records) {
    if (r.failed) continue;
    Shape s = r.emitted.shape();
    VarPtr x = constant(r.emitted.reshaped({1, s[0], s[1], s[2]}));
    std::vector<VarPtr> scores = discs.discriminate(x);
    double acc = 0.0;
    for (const auto& v : scores) acc += v->value.item();
    sum += acc / static_cast<double>(scores.size());
    ++n;
  }
  return n > 0 ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

FeatureStats feature_stats_of(const PerceptualNet& net, const std::vector<Tensor>& images) {
  if (images.size() < 2)
    throw std::invalid_argument("feature stats need at least two images");
  const Shape& s = images.front().shape();
  Tensor batch({static_cast<int>(images.size()), s[0], s[1], s[2]});
  int64_t stride = images.front().size();
  for (size_t i = 0; i < images.size(); ++i)
    std::copy(images[i].vec().begin(), images[i].vec().end(),
              batch.vec().begin() + static_cast<int64_t>(i) * stride);
  return FeatureStats::from_features(perceptual_features(net, batch));
}

std::optional<std::string> preservation_judge(const RunConfig& cfg) {
  if (!cfg.eval_judge.empty()) return cfg.eval_judge;
  for (const auto& spec : cfg.classifiers)
    if (spec.id != cfg.attack.classifier_id) return spec.id;
  return std::nullopt;
}

// ---- campaign execution shared by attack / finetune / ablate / sweep -------

CampaignResult run_campaign_cmd(const RunConfig& cfg, const RunPaths& p, const Dataset& ds,
                                const Zoo& zoo, const AttackConfig& atk,
                                const std::string& campaign_id, int count,
                                const fs::path& out_dir, int workers) {
  CampaignConfig cc;
  cc.campaign_id = campaign_id;
  cc.attack = atk;
  cc.inversion = cfg.inversion;
  cc.workers = workers;
  cc.out_dir = out_dir.string();
  cc.pivot_dir = p.pivot_dir.string();
  cc.extra_meta = {{"config_hash", hash_json_hex(cfg.to_json())}};
  fs::create_directories(p.pivot_dir);
  const Classifier& target = zoo.by_id(atk.classifier_id);
  std::vector<const Classifier*> transfer;
  for (const auto& c : zoo.classifiers)
    if (c.id() != atk.classifier_id) transfer.push_back(&c);
  return run_campaign(ds, scope_indices(ds, count), zoo.gen, zoo.discs, zoo.net, target, transfer,
                      cc);
}

void require_no_collision(const fs::path& marker, bool force, const fs::path& dir) {
  if (!fs::exists(marker)) return;
  if (!force)
    throw CliError(1, "output already exists at " + dir.string() + "; rerun with --force");
  fs::remove_all(dir);
}

// ---- trace plot -------------------------------------------------------------

void put_px(ImageU8& img, int x, int y, uint8_t r, uint8_t g, uint8_t b) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  size_t o = (static_cast<size_t>(y) * img.width + x) * 3;
  img.pixels[o] = r;
  img.pixels[o + 1] = g;
  img.pixels[o + 2] = b;
}

void draw_line(ImageU8& img, double x0, double y0, double x1, double y1, uint8_t r, uint8_t g,
               uint8_t b) {
  double steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0)) * 2.0 + 1.0;
  for (int i = 0; i <= static_cast<int>(steps); ++i) {
    double t = i / steps;
    put_px(img, static_cast<int>(std::lround(x0 + (x1 - x0) * t)),
           static_cast<int>(std::lround(y0 + (y1 - y0) * t)), r, g, b);
  }
}

// Objective trajectories per record with the distance cutoff as a dashed line.
void render_trace_plot(const std::vector<std::vector<double>>& series, double d_cut,
                       const fs::path& out_path) {
  const int W = 640, H = 400, L = 56, R = 12, T = 12, B = 32;
  ImageU8 img;
  img.width = W;
  img.height = H;
  img.channels = 3;
  img.pixels.assign(static_cast<size_t>(W) * H * 3, 255);

  size_t max_len = 2;
  double max_y = d_cut;
  for (const auto& s : series) {
    max_len = std::max(max_len, s.size());
    for (double v : s)
      if (std::isfinite(v)) max_y = std::max(max_y, v);
  }
  if (!(max_y > 0.0)) max_y = 1.0;
  max_y *= 1.05;
  auto px = [&](double iter) { return L + iter / static_cast<double>(max_len - 1) * (W - L - R); };
  auto py = [&](double v) { return H - B - v / max_y * (H - T - B); };

  draw_line(img, L, T, L, H - B, 0, 0, 0);
  draw_line(img, L, H - B, W - R, H - B, 0, 0, 0);
  double yd = py(d_cut);
  for (int x = L; x < W - R; x += 8) draw_line(img, x, yd, x + 4, yd, 200, 40, 40);

  static const uint8_t kPalette[8][3] = {{31, 119, 180}, {255, 127, 14},  {44, 160, 44},
                                         {214, 39, 40},  {148, 103, 189}, {140, 86, 75},
                                         {227, 119, 194}, {127, 127, 127}};
  for (size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const uint8_t* c = kPalette[k % 8];
    for (size_t i = 0; i + 1 < s.size(); ++i) {
      if (!std::isfinite(s[i]) || !std::isfinite(s[i + 1])) continue;
      draw_line(img, px(static_cast<double>(i)), py(std::min(s[i], max_y)),
                px(static_cast<double>(i + 1)), py(std::min(s[i + 1], max_y)), c[0], c[1], c[2]);
    }
  }
  write_png(out_path.string(), img);
}

}  // namespace

// ---- campaign reload ---------------------------------------------------------

std::vector<AttackRecord> load_campaign_records(const fs::path& run_dir, bool with_images) {
  fs::path mp = run_dir / "manifest.jsonl";
  if (!fs::exists(mp)) throw CliError(2, "no campaign manifest at " + mp.string());
  std::vector<AttackRecord> records;
  std::ifstream in(mp);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    AttackRecord rec = AttackRecord::from_json(nlohmann::json::parse(line));
    if (with_images && !rec.failed) {
      fs::path raw = run_dir / "images" / (rec.image_id + ".f64");
      if (fs::exists(raw)) {
        nlohmann::json meta = read_json_file(raw.string() + ".json");
        std::vector<int> shape;
        for (const auto& v : meta.at("shape")) shape.push_back(v.get<int>());
        Tensor t(Shape(shape.begin(), shape.end()));
        std::ifstream bin(raw, std::ios::binary);
        bin.read(reinterpret_cast<char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!bin) throw CliError(2, "truncated image sidecar " + raw.string());
        rec.emitted = std::move(t);
      } else {
        rec.emitted = from_u8(read_png((run_dir / rec.emitted_ref).string()));
      }
    }
    records.push_back(std::move(rec));
  }
  return records;
}

namespace {

// ---- commands ----------------------------------------------------------------

int cmd_ingest(const RunConfig& cfg, const RunPaths& p, bool force, std::ostream& out) {
  fs::path manifest = p.dataset_dir / "manifest.json";
  const char* names[3] = {"train", "val", "test"};
  if (fs::exists(manifest) && !force) {
    nlohmann::json j = read_json_file(manifest);
    for (const char* n : names) {
      fs::path f = p.dataset_dir / (std::string(n) + ".aptd");
      if (!fs::exists(f) || hash_file_hex(f.string()) != j.at("checksums").at(n))
        throw CliError(2, "checksum mismatch for " + f.string() +
                              "; rerun with --force to regenerate");
    }
    out << "ingest: verified " << p.dataset_dir.string() << " (train "
        << j.at("counts").at("train") << " / val " << j.at("counts").at("val") << " / test "
        << j.at("counts").at("test") << ")\n";
    return 0;
  }
  fs::create_directories(p.dataset_dir);
  Dataset full = make_shapes_dataset(cfg.per_class, cfg.dataset_seed, cfg.img_size);
  full.id = cfg.dataset_id;
  DataSplits splits = split_80_10_10(full, derive_seed(cfg.dataset_seed, "split"));
  nlohmann::json counts, checksums;
  const Dataset* parts[3] = {&splits.train, &splits.val, &splits.test};
  for (int i = 0; i < 3; ++i) {
    fs::path f = p.dataset_dir / (std::string(names[i]) + ".aptd");
    save_dataset(*parts[i], f.string());
    counts[names[i]] = parts[i]->count();
    checksums[names[i]] = hash_file_hex(f.string());
  }
  write_json_file(manifest, {{"dataset_id", cfg.dataset_id},
                             {"counts", counts},
                             {"checksums", checksums},
                             {"key", p.dataset_key},
                             {"config_hash", hash_json_hex(cfg.to_json())}});
  out << "ingest: wrote " << p.dataset_dir.string() << " (train " << splits.train.count()
      << " / val " << splits.val.count() << " / test " << splits.test.count() << ")\n";
  return 0;
}

int cmd_pretrain(const RunConfig& cfg, const RunPaths& p, bool force, std::ostream& out) {
  Dataset train = require_split(p, "train");
  Dataset val = require_split(p, "val");
  Dataset test = require_split(p, "test");
  fs::path manifest = p.ckpt_dir / "manifest.json";
  require_no_collision(manifest, force, p.ckpt_dir);
  fs::create_directories(p.ckpt_dir);

  TrainConfig g;
  g.dataset_id = cfg.dataset_id;
  g.epochs = cfg.gan.epochs;
  g.batch_size = cfg.gan.batch_size;
  g.lr = cfg.gan.lr;
  g.lr_d = cfg.gan.lr_d;
  g.seed = cfg.gan.seed;
  g.out_path = (p.ckpt_dir / "gan.aptc").string();
  GanTrainStats stats = train_gan(cfg.model, g, train);

  nlohmann::json accs;
  char line[160];
  std::string summary;
  for (const auto& spec : cfg.classifiers) {
    TrainConfig tc;
    tc.dataset_id = cfg.dataset_id;
    tc.epochs = spec.epochs;
    tc.batch_size = spec.batch_size;
    tc.lr = spec.lr;
    tc.seed = spec.seed;
    tc.out_path = (p.ckpt_dir / (spec.id + ".aptc")).string();
    double acc = train_classifier(spec.id, spec.arch, tc, train, val, test);
    accs[spec.id] = acc;
    std::snprintf(line, sizeof(line), " %s=%.3f", spec.id.c_str(), acc);
    summary += line;
  }

  TrainConfig pc;
  pc.dataset_id = cfg.dataset_id;
  pc.epochs = cfg.perceptual.epochs;
  pc.batch_size = cfg.perceptual.batch_size;
  pc.lr = cfg.perceptual.lr;
  pc.seed = cfg.perceptual.seed;
  pc.out_path = (p.ckpt_dir / "perceptual.aptc").string();
  double perc_acc = train_perceptual(pc, train, test);

  write_json_file(manifest, {{"key", p.ckpt_key},
                             {"config_hash", hash_json_hex(cfg.to_json())},
                             {"gan_epochs", stats.epochs_run},
                             {"final_g_loss", stats.final_g_loss},
                             {"final_d_loss", stats.final_d_loss},
                             {"test_accuracy", accs},
                             {"perceptual_accuracy", perc_acc}});
  std::snprintf(line, sizeof(line), "pretrain: gan g=%.3f d=%.3f; test acc%s perceptual=%.3f -> ",
                stats.final_g_loss, stats.final_d_loss, summary.c_str(), perc_acc);
  out << line << p.ckpt_dir.string() << "\n";
  return 0;
}

int cmd_invert(const RunConfig& cfg, const RunPaths& p, bool force, std::ostream& out) {
  Dataset ds = require_split(p, cfg.attack_split);
  Checkpoint gan_ck = load_checkpoint(require_checkpoint(p, "gan.aptc").string());
  Generator gen = Generator::load(gan_ck);
  PerceptualNet net = PerceptualNet::load(require_checkpoint(p, "perceptual.aptc").string());

  fs::create_directories(p.pivot_dir);
  int computed = 0, cached = 0;
  nlohmann::json ids = nlohmann::json::array();
  for (int i : scope_indices(ds, cfg.attack_count)) {
    std::string id = campaign_image_id(ds.id, i);
    ids.push_back(id);
    fs::path f = p.pivot_dir / (id + ".aptc");
    if (fs::exists(f) && !force) {
      ++cached;
      continue;
    }
    // Same per-image seed derivation the campaign uses when inverting inline,
    // so a precomputed cache is indistinguishable from no cache at all.
    InversionConfig inv = cfg.inversion;
    inv.seed = derive_seed(cfg.attack.seed, "invert:" + id);
    PivotState pivot = invert(ds.image(i), ds.labels[i], gen, net, inv, id);
    pivot.save(f.string());
    ++computed;
  }
  write_json_file(p.pivot_dir / "manifest.json",
                  {{"key", p.pivot_key},
                   {"split", cfg.attack_split},
                   {"image_ids", ids},
                   {"config_hash", hash_json_hex(cfg.to_json())}});
  out << "invert: " << computed << " computed, " << cached << " cached -> "
      << p.pivot_dir.string() << "\n";
  return 0;
}

int cmd_attack(const RunConfig& cfg, const RunPaths& p, bool force, int workers,
               std::ostream& out) {
  Dataset ds = require_split(p, cfg.attack_split);
  Zoo zoo = load_zoo(cfg, p);
  require_no_collision(p.attack_dir / "campaign.json", force, p.attack_dir);
  CampaignResult res = run_campaign_cmd(cfg, p, ds, zoo, cfg.attack, cfg.campaign_id,
                                        cfg.attack_count, p.attack_dir, workers);
  int fooled = 0, failed = 0;
  for (const auto& r : res.records) {
    if (r.failed) ++failed;
    if (!r.failed && r.fooled.at(cfg.attack.classifier_id)) ++fooled;
  }
  out << "attack " << cfg.campaign_id << ": " << res.records.size() << " attacked ("
      << res.skipped_ids.size() << " skipped, " << fooled << " fooled, " << failed
      << " failed) -> " << p.attack_dir.string() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, const RunPaths& p, bool force, std::ostream& out) {
  if (!fs::exists(p.attack_dir / "campaign.json"))
    throw CliError(1, "no attack campaign at " + p.attack_dir.string() +
                          "; run `aptbench attack` first");
  Dataset ds = require_split(p, cfg.attack_split);
  Zoo zoo = load_zoo(cfg, p);
  std::vector<AttackRecord> records = load_campaign_records(p.attack_dir, true);

  std::string key = derived_key(cfg, {"eval"});
  fs::path dir = p.runs_dir() / ("eval-" + cfg.campaign_id + "-" + key);
  require_no_collision(dir / "report.json", force, dir);
  fs::create_directories(dir);

  TransferSource src = attack_source(cfg.campaign_id, records);
  EvalReport rep;
  for (const auto& c : zoo.classifiers) {
    ClassifierEval ev;
    ev.real = dataset_scores(c, ds);
    if (!src.images.empty()) ev.attacked = accuracy_confidence(c, src.images, src.labels);
    rep.classifiers[c.id()] = ev;
  }
  if (src.images.size() >= 2 && ds.count() >= 2) {
    std::vector<Tensor> real;
    for (int64_t i = 0; i < ds.count(); ++i) real.push_back(ds.image(i));
    rep.fid_scores["real_vs_apt"] =
        fid(feature_stats_of(zoo.net, real), feature_stats_of(zoo.net, src.images));
  }
  if (!src.images.empty()) {
    std::vector<const Classifier*> zptr;
    for (const auto& c : zoo.classifiers) zptr.push_back(&c);
    rep.transfer = transfer_matrix({src}, zptr);
  }
  if (auto judge = preservation_judge(cfg); judge && !src.images.empty()) {
    rep.class_preservation = class_preservation_rate(records, zoo.by_id(*judge));
    rep.class_preservation_count = static_cast<int64_t>(src.images.size());
    rep.extra["judge"] = *judge;
  }
  rep.extra["campaign_id"] = cfg.campaign_id;
  rep.extra["config_hash"] = hash_json_hex(cfg.to_json());
  rep.extra["records"] = records.size();
  rep.extra["fooling_rate"] = fooling_rate(records, cfg.attack.classifier_id);

  write_json_file(dir / "report.json", rep.to_json());
  write_text_file(dir / "report.txt", rep.render_text());
  out << (dir / "report.json").string() << "\n" << (dir / "report.txt").string() << "\n";
  return 0;
}

int cmd_finetune(const RunConfig& cfg, const RunPaths& p, bool force, int workers,
                 std::ostream& out) {
  if (!fs::exists(p.attack_dir / "campaign.json"))
    throw CliError(1, "no held-out campaign at " + p.attack_dir.string() +
                          "; run `aptbench attack` first");
  Dataset train = require_split(p, "train");
  Dataset heldout_split = require_split(p, cfg.attack_split);
  Zoo zoo = load_zoo(cfg, p);
  std::vector<AttackRecord> heldout = load_campaign_records(p.attack_dir, true);

  // The finetune set comes from a separate campaign against the train split,
  // reused when its content key already exists.
  std::string train_id = cfg.campaign_id + "-train";
  nlohmann::json train_atk = cfg.to_json().at("attack");
  train_atk["split"] = "train";
  train_atk["count"] = cfg.finetune_train_count;
  train_atk["campaign_id"] = train_id;
  fs::path train_dir =
      p.runs_dir() / (train_id + "-" + derived_key(cfg, {}, train_atk));
  std::vector<AttackRecord> train_records;
  if (fs::exists(train_dir / "campaign.json")) {
    train_records = load_campaign_records(train_dir, true);
  } else {
    train_records = run_campaign_cmd(cfg, p, train, zoo, cfg.attack, train_id,
                                     cfg.finetune_train_count, train_dir, workers)
                        .records;
  }
  FinetuneSet set = build_finetune_set(train_id, train, train_records);

  std::string key = derived_key(cfg, {"finetune"});
  fs::path dir = p.runs_dir() / ("finetune-" + cfg.campaign_id + "-" + key);
  require_no_collision(dir / "report.json", force, dir);
  fs::create_directories(dir);

  const Classifier& target = zoo.by_id(cfg.attack.classifier_id);
  FinetuneConfig fc = cfg.finetune;
  fc.out_path = (dir / (target.id() + "-apt-ft-" + train_id + ".aptc")).string();
  Classifier ft = finetune(target, set, train, fc);

  RobustnessDelta delta =
      before_after_eval(target, ft, cfg.campaign_id, heldout, heldout_split, set.source_ids);
  nlohmann::json rj = delta.to_json();
  rj["config_hash"] = hash_json_hex(cfg.to_json());
  rj["checkpoint"] = fc.out_path;
  rj["finetune_images"] = set.data.count();
  write_json_file(dir / "report.json", rj);
  write_text_file(dir / "report.txt", delta.render_text());

  char line[200];
  std::snprintf(line, sizeof(line),
                "finetune %s: attacked acc %.4f -> %.4f (%+.4f), clean %+.4f -> ",
                delta.after_id.c_str(), delta.before_attacked.accuracy,
                delta.after_attacked.accuracy, delta.attacked_accuracy_delta,
                delta.clean_accuracy_delta);
  out << line << dir.string() << "\n";
  return 0;
}

struct VariantStats {
  std::string name;
  double fooling = 0.0, mean_lpt = 0.0, realness = 0.0, preservation = 0.0;
  int records = 0, emitted = 0;
};

nlohmann::json variant_json(const VariantStats& v) {
  return {{"fooling_rate", v.fooling}, {"mean_final_l_pt", v.mean_lpt},
          {"mean_realness", v.realness}, {"class_preservation", v.preservation},
          {"records", v.records},       {"emitted", v.emitted}};
}

std::string variant_table(const std::vector<VariantStats>& rows) {
  std::string text = "variant            fooling  mean-l_pt  realness  preservation\n";
  char buf[120];
  for (const auto& v : rows) {
    std::snprintf(buf, sizeof(buf), "%-18s %7.4f %10.4f %9.4f %13.4f\n", v.name.c_str(),
                  v.fooling, v.mean_lpt, v.realness, v.preservation);
    text += buf;
  }
  return text;
}

VariantStats stats_of(const RunConfig& cfg, const Zoo& zoo, const std::string& name,
                      const std::vector<AttackRecord>& records) {
  VariantStats v;
  v.name = name;
  v.fooling = fooling_rate(records, cfg.attack.classifier_id);
  v.mean_lpt = mean_final_lpt(records);
  v.realness = mean_realness(zoo.discs, records);
  v.records = static_cast<int>(records.size());
  for (const auto& r : records)
    if (!r.failed) ++v.emitted;
  if (auto judge = preservation_judge(cfg); judge && v.emitted > 0)
    v.preservation = class_preservation_rate(records, zoo.by_id(*judge));
  else
    v.preservation = std::numeric_limits<double>::quiet_NaN();
  return v;
}

// Rows = images, first column the original, one column per variant/cutoff.
void emit_grid(const Dataset& ds, const std::vector<int>& indices,
               const std::vector<std::vector<AttackRecord>>& runs, int max_rows,
               const fs::path& out_path) {
  std::vector<Tensor> tiles;
  int rows = 0;
  for (int i : indices) {
    if (rows >= max_rows) break;
    std::string id = campaign_image_id(ds.id, i);
    std::vector<const AttackRecord*> cells(runs.size(), nullptr);
    bool attacked = false;
    for (size_t v = 0; v < runs.size(); ++v)
      for (const auto& r : runs[v])
        if (r.image_id == id) {
          cells[v] = &r;
          if (!r.failed) attacked = true;
        }
    if (!attacked) continue;  // skipped by every variant (already misclassified)
    tiles.push_back(ds.image(i));
    for (size_t v = 0; v < runs.size(); ++v)
      tiles.push_back(cells[v] != nullptr && !cells[v]->failed ? cells[v]->emitted : ds.image(i));
    ++rows;
  }
  if (tiles.empty()) return;
  write_png(out_path.string(), to_u8(make_grid(tiles, static_cast<int>(runs.size()) + 1)));
}

int cmd_ablate(const RunConfig& cfg, const RunPaths& p, bool force, int workers,
               std::ostream& out) {
  Dataset ds = require_split(p, cfg.attack_split);
  Zoo zoo = load_zoo(cfg, p);
  std::string key = derived_key(cfg, {"ablate"});
  fs::path dir = p.runs_dir() / ("ablate-" + key);
  require_no_collision(dir / "ablation.json", force, dir);
  fs::create_directories(dir);

  static const char* kVariants[5] = {"full", "no-L_rec", "no-L_CE", "no-L_PG", "latent-only"};
  std::vector<int> indices = scope_indices(ds, cfg.ablate_count);
  std::vector<VariantStats> rows;
  std::vector<std::vector<AttackRecord>> runs;
  nlohmann::json variants, shared_ids = nlohmann::json::array();
  for (const char* name : kVariants) {
    AttackConfig atk = cfg.attack;
    atk.ablation = name;
    CampaignResult res = run_campaign_cmd(cfg, p, ds, zoo, atk, std::string("ablate-") + name,
                                          cfg.ablate_count, dir / name, workers);
    rows.push_back(stats_of(cfg, zoo, name, res.records));
    variants[name] = variant_json(rows.back());
    runs.push_back(std::move(res.records));
  }
  for (const auto& r : runs.front()) shared_ids.push_back(r.image_id);

  emit_grid(ds, indices, runs, 8, dir / "grid.png");
  write_json_file(dir / "ablation.json", {{"variants", variants},
                                          {"image_ids", shared_ids},
                                          {"grid", "grid.png"},
                                          {"config_hash", hash_json_hex(cfg.to_json())}});
  write_text_file(dir / "ablation.txt", variant_table(rows));
  out << variant_table(rows) << "ablate -> " << dir.string() << "\n";
  return 0;
}

int cmd_sweep_d(const RunConfig& cfg, const RunPaths& p, bool force, int workers,
                std::ostream& out) {
  Dataset ds = require_split(p, cfg.attack_split);
  Zoo zoo = load_zoo(cfg, p);
  std::string key = derived_key(cfg, {"sweep"});
  fs::path dir = p.runs_dir() / ("sweep-" + key);
  require_no_collision(dir / "sweep.json", force, dir);
  fs::create_directories(dir);

  std::vector<int> indices = scope_indices(ds, cfg.sweep_count);
  std::vector<VariantStats> rows;
  std::vector<std::vector<AttackRecord>> runs;
  nlohmann::json per_d = nlohmann::json::array();
  char name[48];
  for (double d : cfg.sweep_d) {
    std::snprintf(name, sizeof(name), "d%g", d);
    AttackConfig atk = cfg.attack;
    atk.d = d;
    CampaignResult res = run_campaign_cmd(cfg, p, ds, zoo, atk, std::string("sweep-") + name,
                                          cfg.sweep_count, dir / name, workers);
    VariantStats v = stats_of(cfg, zoo, name, res.records);
    int violations = 0;
    for (const auto& r : res.records)
      if (!r.failed && !(r.l_pt_at_emission <= d)) ++violations;
    nlohmann::json entry = variant_json(v);
    entry["d"] = d;
    entry["bound_violations"] = violations;
    per_d.push_back(entry);
    rows.push_back(std::move(v));
    runs.push_back(std::move(res.records));
  }
  emit_grid(ds, indices, runs, 8, dir / "grid.png");
  write_json_file(dir / "sweep.json", {{"d_values", cfg.sweep_d},
                                       {"per_d", per_d},
                                       {"grid", "grid.png"},
                                       {"config_hash", hash_json_hex(cfg.to_json())}});
  write_text_file(dir / "sweep.txt", variant_table(rows));
  out << variant_table(rows) << "sweep-d -> " << dir.string() << "\n";
  return 0;
}

int cmd_report(const RunPaths& p, const std::vector<std::string>& run_ids, std::ostream& out) {
  if (run_ids.empty()) throw CliError(1, "report: pass at least one run id under runs/");
  for (const auto& id : run_ids) {
    fs::path dir = p.runs_dir() / id;
    if (!fs::is_directory(dir))
      throw CliError(1, "report: no run directory " + dir.string());
    fs::path rep = dir / "report";
    fs::create_directories(rep);
    std::vector<fs::path> written;

    if (fs::exists(dir / "manifest.jsonl")) {
      std::vector<AttackRecord> records = load_campaign_records(dir, false);
      nlohmann::json meta = read_json_file(dir / "campaign.json");
      std::string target = meta.at("classifiers").at(0);
      double d_cut = meta.at("config").at("attack").at("d");

      std::string text;
      char buf[160];
      std::snprintf(buf, sizeof(buf), "campaign %s\n", meta.at("campaign_id").get<std::string>().c_str());
      text += buf;
      if (records.empty()) {
        text += "empty (no attack records)\n";
      } else {
        text += "image                        stop                 fooled   l_pt     iters\n";
        std::map<std::string, int> stops;
        int fooled = 0;
        for (const auto& r : records) {
          bool f = !r.failed && r.fooled.count(target) && r.fooled.at(target);
          if (f) ++fooled;
          ++stops[r.failed ? "failed" : to_string(r.stop_reason)];
          std::snprintf(buf, sizeof(buf), "%-28s %-20s %-8s %7.4f %6d\n", r.image_id.c_str(),
                        r.failed ? "failed" : to_string(r.stop_reason).c_str(), f ? "yes" : "no",
                        r.l_pt_at_emission, r.iterations_used);
          text += buf;
        }
        std::snprintf(buf, sizeof(buf), "records %zu, fooling rate %.4f\n", records.size(),
                      static_cast<double>(fooled) / static_cast<double>(records.size()));
        text += buf;
        for (const auto& [k, v] : stops) {
          std::snprintf(buf, sizeof(buf), "  %-20s %d\n", k.c_str(), v);
          text += buf;
        }
      }
      write_text_file(rep / "summary.txt", text);
      written.push_back(rep / "summary.txt");

      std::vector<std::vector<double>> series;
      for (const auto& r : records) {
        fs::path tf = dir / "traces" / (r.image_id + ".jsonl");
        if (!fs::exists(tf)) continue;
        std::vector<double> s;
        std::ifstream tin(tf);
        std::string line;
        while (std::getline(tin, line))
          if (!line.empty()) s.push_back(nlohmann::json::parse(line).at("l_pt").get<double>());
        series.push_back(std::move(s));
      }
      if (!series.empty()) {
        render_trace_plot(series, d_cut, rep / "traces.png");
        written.push_back(rep / "traces.png");
      }
    }

    if (fs::exists(dir / "report.json")) {
      nlohmann::json j = read_json_file(dir / "report.json");
      if (j.contains("classifiers")) {
        write_text_file(rep / "eval.txt", EvalReport::from_json(j).render_text());
        written.push_back(rep / "eval.txt");
      } else if (j.contains("before_attacked")) {
        write_text_file(rep / "robustness.txt", RobustnessDelta::from_json(j).render_text());
        written.push_back(rep / "robustness.txt");
      }
    }
    for (const char* f : {"ablation.txt", "sweep.txt"})
      if (fs::exists(dir / f)) {
        fs::copy_file(dir / f, rep / f, fs::copy_options::overwrite_existing);
        written.push_back(rep / f);
      }
    if (written.empty())
      throw CliError(1, "report: nothing to render in " + dir.string());
    for (const auto& f : written) out << f.string() << "\n";
  }
  return 0;
}

// ---- argument handling ---------------------------------------------------------

constexpr const char* kUsage =
    "usage: aptbench <command> [--config PATH] [--seed N] [--workers N] [--force] [run ids...]\n"
    "commands:\n"
    "  ingest     generate the dataset and write verified split manifests\n"
    "  pretrain   train the generator, classifiers and perceptual net\n"
    "  invert     precompute inversion pivots for the attack scope\n"
    "  attack     run the generator-tuning attack campaign\n"
    "  eval       score real vs attacked accuracy, FID and transfer\n"
    "  finetune   harden the target on its attack images and re-evaluate\n"
    "  ablate     rerun the campaign with each objective term removed\n"
    "  sweep-d    rerun the campaign across distance cutoffs\n"
    "  report     render tables and plots for finished runs\n"
    "APTBENCH_HOME overrides the configured output root.\n";

struct Args {
  std::string cmd;
  std::string config_path;
  bool config_explicit = false;
  std::optional<uint64_t> seed;
  int workers = 1;
  bool force = false;
  bool help = false;
  std::vector<std::string> rest;
};

Args parse_args(const std::vector<std::string>& argv) {
  Args a;
  for (size_t i = 0; i < argv.size(); ++i) {
    const std::string& s = argv[i];
    auto value = [&](const char* flag) -> const std::string& {
      if (i + 1 >= argv.size()) throw CliError(1, std::string(flag) + " needs a value");
      return argv[++i];
    };
    if (s == "--help" || s == "-h") {
      a.help = true;
    } else if (s == "--config") {
      a.config_path = value("--config");
      a.config_explicit = true;
    } else if (s == "--seed") {
      try {
        a.seed = std::stoull(value("--seed"));
      } catch (const std::exception&) {
        throw CliError(1, "--seed needs an unsigned integer");
      }
    } else if (s == "--workers") {
      try {
        a.workers = std::stoi(value("--workers"));
      } catch (const std::exception&) {
        throw CliError(1, "--workers needs an integer");
      }
      if (a.workers < 1) throw CliError(1, "--workers must be >= 1");
    } else if (s == "--force") {
      a.force = true;
    } else if (!s.empty() && s[0] == '-') {
      throw CliError(1, "unknown flag '" + s + "'");
    } else if (a.cmd.empty()) {
      a.cmd = s;
    } else {
      a.rest.push_back(s);
    }
  }
  return a;
}

RunConfig load_config(const Args& a) {
  std::string path = a.config_explicit ? a.config_path : "aptbench.json";
  if (!fs::exists(path)) {
    if (a.config_explicit) throw CliError(1, "config file not found: " + path);
    return RunConfig::defaults();
  }
  std::ifstream in(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, /*allow_exceptions=*/true, /*ignore_comments=*/true);
  } catch (const std::exception& e) {
    throw CliError(1, "config parse error in " + path + ": " + e.what());
  }
  return RunConfig::from_json(j);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    Args a = parse_args(args);
    if (a.help || a.cmd == "help") {
      out << kUsage;
      return 0;
    }
    if (a.cmd.empty()) {
      err << kUsage;
      return 1;
    }
    static const std::set<std::string> kCommands{"ingest", "pretrain", "invert",   "attack",
                                                 "eval",   "finetune", "ablate",   "sweep-d",
                                                 "report"};
    if (!kCommands.count(a.cmd)) throw CliError(1, "unknown command '" + a.cmd + "'");

    RunConfig cfg = load_config(a);
    if (a.seed) {
      cfg.seed = *a.seed;
      cfg.finalize();
    }
    cfg.validate();
    RunPaths p = resolve_paths(cfg);
    fs::create_directories(p.runs_dir());

    if (a.cmd == "ingest") return cmd_ingest(cfg, p, a.force, out);
    if (a.cmd == "pretrain") return cmd_pretrain(cfg, p, a.force, out);
    if (a.cmd == "invert") return cmd_invert(cfg, p, a.force, out);
    if (a.cmd == "attack") return cmd_attack(cfg, p, a.force, a.workers, out);
    if (a.cmd == "eval") return cmd_eval(cfg, p, a.force, out);
    if (a.cmd == "finetune") return cmd_finetune(cfg, p, a.force, a.workers, out);
    if (a.cmd == "ablate") return cmd_ablate(cfg, p, a.force, a.workers, out);
    if (a.cmd == "sweep-d") return cmd_sweep_d(cfg, p, a.force, a.workers, out);
    return cmd_report(p, a.rest, out);
  } catch (const CliError& e) {
    err << "error: " << e.what() << "\n";
    return e.code;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace apt
