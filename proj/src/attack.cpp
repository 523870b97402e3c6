#include "apt/attack.hpp"

#include "apt/image_io.hpp"
#include "apt/serialize.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <stdexcept>
#include <thread>

namespace apt {

namespace fs = std::filesystem;

void AttackConfig::validate() const {
  if (!(d > 0.0)) throw std::invalid_argument("attack: d must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("attack: lr must be positive");
  if (!(alpha >= 0.0)) throw std::invalid_argument("attack: alpha must be nonnegative");
  if (max_iters < 0) throw std::invalid_argument("attack: max_iters must be nonnegative");
  static const char* kVariants[] = {"full", "no-L_rec", "no-L_CE", "no-L_PG", "latent-only"};
  if (std::find(std::begin(kVariants), std::end(kVariants), ablation) == std::end(kVariants))
    throw std::invalid_argument("attack: unknown ablation variant '" + ablation + "'");
}

nlohmann::json AttackConfig::to_json() const {
  return {{"weights", weights.to_json()},
          {"d", d},
          {"alpha", alpha},
          {"lr", lr},
          {"max_iters", max_iters},
          {"classifier_id", classifier_id},
          {"seed", seed},
          {"resample_c_any", resample_c_any},
          {"ablation", ablation}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
  AttackConfig c;
  c.weights = LossWeights::from_json(j.at("weights"));
  c.d = j.at("d");
  c.alpha = j.at("alpha");
  c.lr = j.at("lr");
  c.max_iters = j.at("max_iters");
  c.classifier_id = j.at("classifier_id");
  c.seed = j.at("seed");
  c.resample_c_any = j.at("resample_c_any");
  c.ablation = j.at("ablation");
  return c;
}

std::string to_string(StopReason r) {
  switch (r) {
    case StopReason::fooled_within_d: return "fooled_within_d";
    case StopReason::hit_distance_bound: return "hit_distance_bound";
    case StopReason::max_iters: return "max_iters";
  }
  throw std::logic_error("unknown stop reason");
}

StopReason stop_reason_from_string(const std::string& s) {
  if (s == "fooled_within_d") return StopReason::fooled_within_d;
  if (s == "hit_distance_bound") return StopReason::hit_distance_bound;
  if (s == "max_iters") return StopReason::max_iters;
  throw std::invalid_argument("unknown stop reason '" + s + "'");
}

static nlohmann::json json_number_or_null(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

static double number_or_nan(const nlohmann::json& j) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  return j.get<double>();
}

nlohmann::json AttackRecord::to_json(bool include_trace) const {
  nlohmann::json j{{"image_id", image_id},
                   {"true_class", true_class},
                   {"c_any", c_any},
                   {"stop_reason", to_string(stop_reason)},
                   {"failed", failed},
                   {"non_manipulation", non_manipulation},
                   {"emitted_ref", emitted_ref},
                   {"emitted_iter", emitted_iter},
                   {"l_pt_at_emission", json_number_or_null(l_pt_at_emission)},
                   {"iterations_used", iterations_used},
                   {"fooled", fooled},
                   {"conf_before", json_number_or_null(conf_before)},
                   {"conf_after", json_number_or_null(conf_after)}};
  if (!error.empty()) j["error"] = error;
  if (include_trace) {
    nlohmann::json tr = nlohmann::json::array();
    for (const auto& b : trace) tr.push_back(b.to_json());
    j["trace"] = std::move(tr);
    j["fooled_trace"] = fooled_trace;
  }
  return j;
}

AttackRecord AttackRecord::from_json(const nlohmann::json& j) {
  AttackRecord r;
  r.image_id = j.at("image_id");
  r.true_class = j.at("true_class");
  r.c_any = j.at("c_any");
  r.stop_reason = stop_reason_from_string(j.at("stop_reason"));
  r.failed = j.at("failed");
  r.non_manipulation = j.at("non_manipulation");
  r.emitted_ref = j.at("emitted_ref");
  r.emitted_iter = j.at("emitted_iter");
  r.l_pt_at_emission = number_or_nan(j.at("l_pt_at_emission"));
  r.iterations_used = j.at("iterations_used");
  r.fooled = j.at("fooled").get<std::map<std::string, bool>>();
  r.conf_before = number_or_nan(j.at("conf_before"));
  r.conf_after = number_or_nan(j.at("conf_after"));
  if (j.contains("error")) r.error = j.at("error");
  if (j.contains("trace")) {
    for (const auto& b : j.at("trace")) r.trace.push_back(LossBreakdown::from_json(b));
    r.fooled_trace = j.at("fooled_trace").get<std::vector<uint8_t>>();
  }
  return r;
}

int choose_fool_target(int true_class, int num_classes, RandomStream& rs) {
  if (num_classes < 2) throw std::invalid_argument("choose_fool_target: needs at least 2 classes");
  if (true_class < 0 || true_class >= num_classes)
    throw std::invalid_argument("choose_fool_target: true class out of range");
  int pick = rs.uniform_int(num_classes - 1);
  return pick < true_class ? pick : pick + 1;
}

double recompute_emission_lpt(const Tensor& x, const Tensor& emitted, const PerceptualNet& net,
                              const LossWeights& w) {
  auto batched = [](const Tensor& t) {
    if (t.ndim() == 3) return t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)});
    return t;
  };
  auto term = loss_pt(constant(batched(x)), constant(batched(emitted)), net, w);
  return term->value.item();
}

namespace {

struct LoopMode {
  bool tune_theta = true;
  bool want_rec = true;
  bool want_ce = true;
  bool want_pg = true;
};

Tensor to_batch(const Tensor& x) {
  if (x.ndim() == 3) return x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
  if (x.ndim() == 4 && x.dim(0) == 1) return x;
  throw std::invalid_argument("attack: image must be (C,H,W) or (1,C,H,W)");
}

Tensor to_chw(const Tensor& x) { return x.reshaped({x.dim(1), x.dim(2), x.dim(3)}); }

LoopMode mode_for(const AttackConfig& cfg) {
  LoopMode m;
  if (cfg.ablation == "no-L_rec") m.want_rec = false;
  if (cfg.ablation == "no-L_CE") m.want_ce = false;
  if (cfg.ablation == "no-L_PG") m.want_pg = false;
  return m;
}

AttackRecord attack_loop(const Tensor& x_in, int true_class, const PivotState& pivot,
                         const Generator& g, const AttackConfig& cfg, const Classifier& clf,
                         const DiscriminatorSet& discs, const PerceptualNet& net,
                         uint64_t rng_seed, LoopMode mode) {
  cfg.validate();
  const Tensor x = to_batch(x_in);
  const auto x_const = constant(x);
  const int K = clf.num_classes();
  const int L = g.config().num_layers();
  if (pivot.w_p.ndim() != 2 || pivot.w_p.dim(0) != L || static_cast<int>(pivot.n.size()) != L)
    throw std::invalid_argument("attack: pivot does not match the generator layout");

  RandomStream rs(rng_seed);
  AttackRecord rec;
  rec.image_id = pivot.image_id;
  rec.true_class = true_class;
  rec.c_any = choose_fool_target(true_class, K, rs);
  rec.conf_before = clf.probabilities(x)[true_class];

  Generator tuned = g.clone();
  tuned.mapping_params().freeze();  // stage 2 never touches the mapping network
  if (!mode.tune_theta) tuned.synthesis_params().freeze();

  VarPtr w_leaf;
  std::vector<VarPtr> noise_vars;
  std::vector<VarPtr> opt_params;
  if (mode.tune_theta) {
    for (const auto& plane : pivot.n) noise_vars.push_back(constant(plane));
    opt_params = tuned.synthesis_params().vars();
  } else {
    w_leaf = leaf(pivot.w_p);
    opt_params.push_back(w_leaf);
    for (const auto& plane : pivot.n) {
      noise_vars.push_back(leaf(plane));
      opt_params.push_back(noise_vars.back());
    }
  }
  Adam opt(opt_params, {cfg.lr, 0.9, 0.999, 1e-8});

  const double nan = std::numeric_limits<double>::quiet_NaN();
  int best = -1;            // most recent post-step state with L_pt <= d
  int best_fooling = -1;    // ... that additionally misclassifies
  Tensor best_img, best_fooling_img;

  auto emit = [&](StopReason reason) {
    rec.stop_reason = reason;
    if (best_fooling >= 0) {
      rec.emitted = to_chw(best_fooling_img);
      rec.emitted_iter = best_fooling;
    } else if (best >= 0) {
      rec.emitted = to_chw(best_img);
      rec.emitted_iter = best;
    } else {
      rec.failed = true;
      rec.l_pt_at_emission = nan;
      rec.conf_after = nan;
      return;
    }
    rec.l_pt_at_emission = rec.trace[static_cast<size_t>(rec.emitted_iter)].l_pt;
    Tensor probs = clf.probabilities(to_batch(rec.emitted));
    rec.conf_after = probs[true_class];
    rec.fooled[clf.id()] = argmax_row(probs, 0) != true_class;
  };

  int t = 0;  // optimizer steps taken so far == index of the current state
  for (;;) {
    int c_any_now = rec.c_any;
    if (cfg.resample_c_any && t > 0) c_any_now = choose_fool_target(true_class, K, rs);

    VarPtr x_star, total;
    LossBreakdown bd;
    bool blew_up = false;
    try {
      VarPtr rec_term;
      LossBreakdown rec_parts;
      if (mode.tune_theta && mode.want_rec) {
        Tensor z({g.config().d_z});
        rs.fill_normal(z);
        std::tie(rec_term, rec_parts) = loss_rec(x_const, pivot.w_p, noise_vars, g, tuned, z,
                                                 true_class, cfg.alpha, net, cfg.weights, &x_star);
      } else {
        x_star = mode.tune_theta ? tuned.synthesize_code(constant(pivot.w_p), noise_vars)
                                 : tuned.synthesize_code(w_leaf, noise_vars);
        if (mode.want_rec) {
          rec_term = loss_pt(x_const, x_star, net, cfg.weights, &rec_parts.lpips, &rec_parts.l2);
          rec_parts.l_pt = rec_term->value.item();
          rec_parts.l_rec = rec_parts.l_pt;  // L_R vanishes identically with theta frozen
        } else {
          // The distance bound is still monitored when L_rec is ablated from
          // the objective; a value-only pass keeps gradients out of it.
          rec_term = constant(Tensor::scalar(0.0));
          auto watch = loss_pt(x_const, constant(x_star->value), net, cfg.weights,
                               &rec_parts.lpips, &rec_parts.l2);
          rec_parts.l_pt = watch->value.item();
        }
      }
      auto ce = mode.want_ce ? fooling_loss(clf.probabilities(x_star), c_any_now)
                             : constant(Tensor::scalar(0.0));
      auto pg = mode.want_pg ? projected_gan_loss(x_star, discs) : constant(Tensor::scalar(0.0));
      std::tie(total, bd) = apt_total(rec_term, rec_parts, ce, pg, cfg.weights);
      if (!std::isfinite(bd.l_pt)) throw std::runtime_error("attack: non-finite distance");
    } catch (const std::runtime_error&) {
      blew_up = true;
    }

    if (blew_up) {
      rec.error = "non_finite_loss";
      emit(StopReason::hit_distance_bound);
      break;
    }

    bool misclassified = clf.predict(x_star->value)[0] != true_class;
    rec.trace.push_back(bd);
    rec.fooled_trace.push_back(misclassified ? 1 : 0);

    if (t >= 1) {  // candidate iterates are the post-step states
      if (bd.l_pt <= cfg.d) {
        best = t;
        best_img = x_star->value;
        if (misclassified) {
          best_fooling = t;
          best_fooling_img = x_star->value;
        }
      }
      if (misclassified && bd.l_pt <= cfg.d) {
        emit(StopReason::fooled_within_d);
        break;
      }
      if (bd.l_pt >= cfg.d) {
        emit(StopReason::hit_distance_bound);
        break;
      }
    }
    if (t >= cfg.max_iters) {
      emit(StopReason::max_iters);
      break;
    }

    opt.zero_grad();
    backward(total);
    opt.step();
    ++t;
  }
  rec.iterations_used = t;
  return rec;
}

}  // namespace

AttackRecord apt_attack(const Tensor& x, int true_class, const PivotState& pivot,
                        const Generator& g, const AttackConfig& cfg, const Classifier& clf,
                        const DiscriminatorSet& discs, const PerceptualNet& net,
                        uint64_t rng_seed) {
  if (cfg.ablation == "latent-only")
    throw std::invalid_argument("apt_attack: latent-only runs via latent_only_attack");
  return attack_loop(x, true_class, pivot, g, cfg, clf, discs, net, rng_seed, mode_for(cfg));
}

AttackRecord latent_only_attack(const Tensor& x, int true_class, const PivotState& pivot,
                                const Generator& g, const AttackConfig& cfg,
                                const Classifier& clf, const DiscriminatorSet& discs,
                                const PerceptualNet& net, uint64_t rng_seed) {
  LoopMode m;
  m.tune_theta = false;
  return attack_loop(x, true_class, pivot, g, cfg, clf, discs, net, rng_seed, m);
}

AttackRecord random_sample_attack(int label, const Generator& g, const AttackConfig& cfg,
                                  const Classifier& clf, uint64_t rng_seed) {
  cfg.validate();
  const int K = clf.num_classes();
  RandomStream rs(rng_seed);

  AttackRecord rec;
  rec.non_manipulation = true;
  rec.true_class = label;
  rec.c_any = choose_fool_target(label, K, rs);
  rec.conf_before = std::numeric_limits<double>::quiet_NaN();
  rec.l_pt_at_emission = std::numeric_limits<double>::quiet_NaN();

  Tensor z({g.config().d_z});
  rs.fill_normal(z);
  Generator frozen = g.clone();
  frozen.mapping_params().freeze();
  frozen.synthesis_params().freeze();

  auto w = leaf(g.map_latent(z, label));
  std::vector<VarPtr> noise_vars;
  std::vector<VarPtr> opt_params{w};
  for (auto& plane : frozen.sample_noise(rs)) {
    noise_vars.push_back(leaf(plane));
    opt_params.push_back(noise_vars.back());
  }
  Adam opt(opt_params, {cfg.lr, 0.9, 0.999, 1e-8});

  int t = 0;
  for (;;) {
    auto x_star = frozen.synthesize_code(w, noise_vars);
    auto probs = clf.probabilities(x_star);
    auto ce = fooling_loss(probs, rec.c_any);
    LossBreakdown bd;
    bd.l_ce = ce->value.item();
    bd.total = bd.l_ce;
    bool misclassified = argmax_row(probs->value, 0) != label;
    rec.trace.push_back(bd);
    rec.fooled_trace.push_back(misclassified ? 1 : 0);

    if (misclassified || t >= cfg.max_iters || !std::isfinite(bd.l_ce)) {
      rec.stop_reason = misclassified ? StopReason::fooled_within_d : StopReason::max_iters;
      if (!std::isfinite(bd.l_ce)) rec.error = "non_finite_loss";
      rec.emitted = to_chw(x_star->value);
      rec.emitted_iter = t;
      Tensor p = clf.probabilities(to_batch(rec.emitted));
      rec.conf_after = p[label];
      rec.fooled[clf.id()] = argmax_row(p, 0) != label;
      break;
    }
    opt.zero_grad();
    backward(ce);
    opt.step();
    ++t;
  }
  rec.iterations_used = t;
  return rec;
}

void CampaignConfig::validate() const {
  attack.validate();
  inversion.validate();
  if (campaign_id.empty()) throw std::invalid_argument("campaign: id must not be empty");
  if (workers < 1) throw std::invalid_argument("campaign: workers must be >= 1");
}

nlohmann::json CampaignConfig::to_json() const {
  return {{"campaign_id", campaign_id},
          {"attack", attack.to_json()},
          {"inversion", inversion.to_json()}};
}

CampaignConfig CampaignConfig::from_json(const nlohmann::json& j) {
  CampaignConfig c;
  c.campaign_id = j.at("campaign_id");
  c.attack = AttackConfig::from_json(j.at("attack"));
  c.inversion = InversionConfig::from_json(j.at("inversion"));
  return c;
}

std::string campaign_image_id(const std::string& dataset_id, int dataset_index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "img-%05d", dataset_index);
  if (dataset_id.empty()) return buf;
  std::string id = dataset_id + "-" + buf;
  for (auto& ch : id)
    if (ch == '/') ch = '-';  // ids double as file names
  return id;
}

namespace {

// Temporarily clears requires_grad so frozen models can be shared across
// worker threads (backward never visits or writes them).
class FreezeGuard {
 public:
  void hold(const ParamStore& ps) {
    for (auto& v : ps.vars()) {
      saved_.emplace_back(v, v->requires_grad);
      v->requires_grad = false;
    }
  }
  ~FreezeGuard() {
    for (auto& [v, flag] : saved_) v->requires_grad = flag;
  }

 private:
  std::vector<std::pair<VarPtr, bool>> saved_;
};

void write_raw_sidecar(const fs::path& dir, const std::string& id, const Tensor& img) {
  const std::string bin_name = id + ".f64";
  std::ofstream raw(dir / bin_name, std::ios::binary);
  raw.write(reinterpret_cast<const char*>(img.data()),
            static_cast<std::streamsize>(img.size() * sizeof(double)));
  nlohmann::json meta{{"dtype", "f64"},
                      {"shape", std::vector<int64_t>(img.shape().begin(), img.shape().end())},
                      {"file", bin_name}};
  std::ofstream meta_out(dir / (bin_name + ".json"));
  meta_out << meta.dump(2) << "\n";
}

}  // namespace

CampaignResult run_campaign(const Dataset& data, const std::vector<int>& indices,
                            const Generator& g, const DiscriminatorSet& discs,
                            const PerceptualNet& net, const Classifier& target,
                            const std::vector<const Classifier*>& transfer,
                            const CampaignConfig& cfg) {
  cfg.validate();
  std::vector<int> order = indices;
  std::sort(order.begin(), order.end());
  if (std::adjacent_find(order.begin(), order.end()) != order.end())
    throw std::invalid_argument("campaign: duplicate image index");
  for (int i : order)
    if (i < 0 || i >= data.count()) throw std::invalid_argument("campaign: image index out of range");

  FreezeGuard frozen;
  frozen.hold(g.mapping_params());
  frozen.hold(g.synthesis_params());
  frozen.hold(net.params());
  frozen.hold(discs.params());
  frozen.hold(target.params());
  for (const auto* c : transfer) frozen.hold(c->params());

  CampaignResult result;
  result.total_images = static_cast<int>(order.size());

  struct Item {
    int index;
    std::string id;
    int label;
  };
  std::vector<Item> items;
  for (int i : order) {
    std::string id = campaign_image_id(data.id, i);
    Tensor img = data.image(i);
    if (target.predict(to_batch(img))[0] != data.labels[i]) {
      result.skipped_ids.push_back(id);
      continue;
    }
    items.push_back({i, id, data.labels[i]});
  }

  if (!cfg.pivot_dir.empty()) fs::create_directories(cfg.pivot_dir);

  std::vector<AttackRecord> records(items.size());
  std::atomic<size_t> cursor{0};
  std::atomic<bool> poisoned{false};
  std::exception_ptr first_error;
  std::mutex error_mu;

  auto work = [&]() {
    for (;;) {
      size_t slot = cursor.fetch_add(1);
      if (slot >= items.size() || poisoned.load()) return;
      const Item& item = items[slot];
      try {
        Tensor x = data.image(item.index);
        PivotState pivot;
        fs::path pivot_path;
        bool cached = false;
        if (!cfg.pivot_dir.empty()) {
          pivot_path = fs::path(cfg.pivot_dir) / (item.id + ".aptc");
          cached = fs::exists(pivot_path);
        }
        if (cached) {
          pivot = PivotState::load(pivot_path.string());
          if (pivot.image_id != item.id)
            throw std::runtime_error("campaign: cached pivot id mismatch for " + item.id);
        } else {
          InversionConfig inv = cfg.inversion;
          inv.seed = derive_seed(cfg.attack.seed, "invert:" + item.id);
          pivot = invert(x, item.label, g, net, inv, item.id);
          if (!cfg.pivot_dir.empty()) pivot.save(pivot_path.string());
        }

        uint64_t attack_seed = derive_seed(cfg.attack.seed, "attack:" + item.id);
        AttackRecord rec =
            cfg.attack.ablation == "latent-only"
                ? latent_only_attack(x, item.label, pivot, g, cfg.attack, target, discs, net,
                                     attack_seed)
                : apt_attack(x, item.label, pivot, g, cfg.attack, target, discs, net, attack_seed);

        if (!rec.failed) {
          double bound = recompute_emission_lpt(x, rec.emitted, net, cfg.attack.weights);
          if (!(bound <= cfg.attack.d))
            throw std::logic_error("campaign: emission bound violated for " + item.id);
          rec.l_pt_at_emission = bound;
          for (const auto* c : transfer) {
            Tensor probs = c->probabilities(to_batch(rec.emitted));
            rec.fooled[c->id()] = argmax_row(probs, 0) != item.label;
          }
        }
        records[slot] = std::move(rec);
      } catch (...) {
        std::lock_guard<std::mutex> lk(error_mu);
        if (!first_error) first_error = std::current_exception();
        poisoned.store(true);
        return;
      }
    }
  };

  int nworkers = std::min(cfg.workers, static_cast<int>(items.empty() ? 1 : items.size()));
  if (nworkers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < nworkers; ++i) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  result.records = std::move(records);

  if (!cfg.out_dir.empty()) {
    fs::path root(cfg.out_dir);
    fs::create_directories(root / "images");
    fs::create_directories(root / "traces");

    for (auto& rec : result.records) {
      std::ofstream trace_out(root / "traces" / (rec.image_id + ".jsonl"));
      for (size_t t = 0; t < rec.trace.size(); ++t) {
        nlohmann::json line = rec.trace[t].to_json();
        line["iter"] = t;
        line["misclassified"] = rec.fooled_trace[t] != 0;
        trace_out << line.dump() << "\n";
      }
      if (!rec.failed) {
        rec.emitted_ref = "images/" + rec.image_id + ".png";
        write_png((root / rec.emitted_ref).string(), to_u8(rec.emitted));
        write_raw_sidecar(root / "images", rec.image_id, rec.emitted);
      }
    }

    result.manifest_path = (root / "manifest.jsonl").string();
    std::ofstream manifest(result.manifest_path);
    for (const auto& rec : result.records) {
      nlohmann::json line = rec.to_json(false);
      line["trace_ref"] = "traces/" + rec.image_id + ".jsonl";
      manifest << line.dump() << "\n";
    }

    std::vector<std::string> classifier_ids{target.id()};
    for (const auto* c : transfer) classifier_ids.push_back(c->id());
    nlohmann::json meta{{"campaign_id", cfg.campaign_id},
                        {"config", cfg.to_json()},
                        {"config_hash", hash_json_hex(cfg.to_json())},
                        {"dataset_id", data.id},
                        {"total_images", result.total_images},
                        {"attacked", result.records.size()},
                        {"filtered_out", result.skipped_ids.size()},
                        {"skipped_ids", result.skipped_ids},
                        {"classifiers", classifier_ids}};
    if (!cfg.extra_meta.is_null()) meta["extra"] = cfg.extra_meta;
    std::ofstream meta_out(root / "campaign.json");
    meta_out << meta.dump(2) << "\n";
  }
  return result;
}

}  // namespace apt
