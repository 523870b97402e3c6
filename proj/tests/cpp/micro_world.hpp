#pragma once

// Shared micro-scale world for module tests: a 10-class 8x8 shapes corpus, a
// briefly trained generator, a target CNN (~0.8 train accuracy so campaign
// filters keep most images), a weaker transfer MLP held out of every attack,
// a frozen perceptual net, a fast inversion recipe, and two cached pivots.
// At this resolution pivot reconstructions sit around L_pt 1-3, so distance
// bounds in tests live on that scale.

#include "apt/attack.hpp"
#include "apt/pretrain.hpp"

#include <cstdio>
#include <optional>
#include <utility>

namespace microworld {

struct World {
  apt::GeneratorConfig gc;
  apt::Dataset data;
  apt::Generator gen;
  apt::DiscriminatorSet discs;
  apt::Classifier target;
  apt::Classifier transfer;
  apt::PerceptualNet net;
  apt::InversionConfig inv;
  apt::PivotState pivot0;  // image 0: reconstruction flips class after one step
  apt::PivotState pivot5;  // image 5: reconstruction stays correctly classified
};

inline apt::GeneratorConfig micro_generator_config() {
  apt::GeneratorConfig cfg;
  cfg.d_z = 4;
  cfg.num_classes = 10;
  cfg.s_dim = 8;
  cfg.map_hidden = 8;
  cfg.base_channels = 6;
  cfg.img_channels = 3;
  cfg.img_size = 8;
  cfg.base_size = 4;
  return cfg;
}

inline apt::InversionConfig micro_inversion_config() {
  apt::InversionConfig inv;
  inv.iterations = 150;
  inv.warmup_iters = 10;
  inv.cosine_tail_iters = 50;
  inv.lr_max = 0.05;
  inv.lambda_n = 10.0;  // resolution-scaled: the 1e4 default suits 32x32 planes
  inv.seed = 3;
  return inv;
}

inline apt::AttackConfig micro_attack(double d, int max_iters) {
  apt::AttackConfig cfg;
  cfg.classifier_id = "target";
  cfg.d = d;
  cfg.max_iters = max_iters;
  cfg.seed = 77;
  return cfg;
}

inline const World& fx() {
  using namespace apt;
  static World* w = [] {
    GeneratorConfig gc = micro_generator_config();
    Dataset data = make_shapes_dataset(3, 101, 8);

    TrainConfig tg;
    tg.dataset_id = data.id;
    tg.epochs = 2;
    tg.batch_size = 16;
    tg.seed = 9;
    tg.out_path = "micro_world_gan.aptc";
    GanBundle bundle{Generator(gc, 1), DiscriminatorSet(gc, 2)};
    train_gan(gc, tg, data, &bundle);
    std::remove(tg.out_path.c_str());
    std::remove(log_path_for(tg.out_path).c_str());

    TrainConfig tc;
    tc.dataset_id = data.id;
    tc.epochs = 30;
    tc.batch_size = 16;
    tc.lr = 3e-3;
    tc.seed = 5;
    tc.out_path = "micro_world_clf.aptc";
    std::optional<Classifier> tgt;
    train_classifier("target", "cnn", tc, data, data, data, &tgt);
    tc.epochs = 12;
    tc.seed = 11;
    std::optional<Classifier> tra;
    train_classifier("transfer", "mlp", tc, data, data, data, &tra);
    std::remove(tc.out_path.c_str());
    std::remove(log_path_for(tc.out_path).c_str());

    PerceptualNet net(3, 8, 10, 13);
    InversionConfig inv = micro_inversion_config();
    PivotState p0 = invert(data.image(0), data.labels[0], bundle.gen, net, inv,
                           campaign_image_id(data.id, 0));
    PivotState p5 = invert(data.image(5), data.labels[5], bundle.gen, net, inv,
                           campaign_image_id(data.id, 5));

    return new World{gc,
                     std::move(data),
                     std::move(bundle.gen),
                     std::move(bundle.discs),
                     std::move(*tgt),
                     std::move(*tra),
                     std::move(net),
                     inv,
                     std::move(p0),
                     std::move(p5)};
  }();
  return *w;
}

inline std::vector<apt::Tensor> snapshot(const apt::ParamStore& ps) {
  std::vector<apt::Tensor> out;
  for (const auto& v : ps.vars()) out.push_back(v->value);
  return out;
}

inline bool same_values(const std::vector<apt::Tensor>& snap, const apt::ParamStore& ps) {
  auto vars = ps.vars();
  if (vars.size() != snap.size()) return false;
  for (size_t i = 0; i < vars.size(); ++i) {
    if (snap[i].shape() != vars[i]->value.shape()) return false;
    for (int64_t k = 0; k < snap[i].size(); ++k)
      if (snap[i][k] != vars[i]->value[k]) return false;
  }
  return true;
}

inline bool same_tensor(const apt::Tensor& a, const apt::Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace microworld
