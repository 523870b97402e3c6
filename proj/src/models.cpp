#include "apt/models.hpp"

#include <cmath>
#include <stdexcept>

namespace apt {

namespace {

int int_log2(int v) {
  int l = 0;
  while ((1 << l) < v) ++l;
  if ((1 << l) != v) throw std::invalid_argument("expected a power of two, got " + std::to_string(v));
  return l;
}

VarPtr lrelu(const VarPtr& x) { return leaky_relu(x, 0.2); }

}  // namespace

int GeneratorConfig::num_layers() const {
  return 2 * (int_log2(img_size) - int_log2(base_size) + 1);
}

std::vector<int> GeneratorConfig::layer_sizes() const {
  std::vector<int> out;
  for (int s = base_size; s <= img_size; s *= 2) {
    out.push_back(s);
    out.push_back(s);
  }
  return out;
}

std::vector<int> GeneratorConfig::layer_channels() const {
  std::vector<int> out;
  int c = base_channels;
  bool shrink_three_quarters = true;
  for (int s = base_size; s <= img_size; s *= 2) {
    out.push_back(c);
    out.push_back(c);
    c = shrink_three_quarters ? c * 3 / 4 : c * 2 / 3;
    c = std::max(c, 4);
    shrink_three_quarters = !shrink_three_quarters;
  }
  return out;
}

nlohmann::json GeneratorConfig::to_json() const {
  return {{"d_z", d_z},
          {"num_classes", num_classes},
          {"s_dim", s_dim},
          {"map_hidden", map_hidden},
          {"base_channels", base_channels},
          {"img_channels", img_channels},
          {"img_size", img_size},
          {"base_size", base_size}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.d_z = j.at("d_z");
  c.num_classes = j.at("num_classes");
  c.s_dim = j.at("s_dim");
  c.map_hidden = j.at("map_hidden");
  c.base_channels = j.at("base_channels");
  c.img_channels = j.at("img_channels");
  c.img_size = j.at("img_size");
  c.base_size = j.at("base_size");
  return c;
}

Generator::Generator(GeneratorConfig cfg, uint64_t seed) : cfg_(cfg) {
  RandomStream mrs(derive_seed(seed, "gen.map"));
  const int in = cfg_.d_z + cfg_.num_classes;
  const int H = cfg_.map_hidden;
  map_.add("w1", he_normal({H, in}, in, mrs));
  map_.add("b1", Tensor({H}));
  map_.add("w2", he_normal({H, H}, H, mrs));
  map_.add("b2", Tensor({H}));
  map_.add("w3", he_normal({cfg_.s_dim, H}, H, mrs));
  map_.add("b3", Tensor({cfg_.s_dim}));

  RandomStream srs(derive_seed(seed, "gen.syn"));
  auto chans = cfg_.layer_channels();
  auto sizes = cfg_.layer_sizes();
  syn_.add("const", scaled_normal({1, chans[0], cfg_.base_size, cfg_.base_size}, 1.0, srs));
  int prev = chans[0];
  for (size_t l = 0; l < chans.size(); ++l) {
    std::string p = "l" + std::to_string(l) + ".";
    syn_.add(p + "conv.w", he_normal({chans[l], prev, 3, 3}, static_cast<int64_t>(prev) * 9, srs));
    syn_.add(p + "style.w", scaled_normal({chans[l], cfg_.s_dim}, 0.25 / std::sqrt(cfg_.s_dim), srs));
    syn_.add(p + "style.b", Tensor({chans[l]}));
    syn_.add(p + "bias", Tensor({chans[l]}));
    syn_.add(p + "nstrength", Tensor::full({1}, 0.05));
    prev = chans[l];
  }
  syn_.add("torgb.w", scaled_normal({cfg_.img_channels, prev, 1, 1}, 1.0 / std::sqrt(prev), srs));
  syn_.add("torgb.b", Tensor({cfg_.img_channels}));
  (void)sizes;
}

Generator Generator::clone() const {
  Generator g(cfg_, 0);
  g.map_ = map_.clone();
  g.syn_ = syn_.clone();
  return g;
}

VarPtr Generator::map_forward(const VarPtr& z, const std::vector<int>& labels) const {
  if (z->value.ndim() != 2 || z->value.dim(1) != cfg_.d_z)
    throw std::invalid_argument("map_forward: expects z of shape (B," + std::to_string(cfg_.d_z) + ")");
  if (static_cast<int>(labels.size()) != z->value.dim(0))
    throw std::invalid_argument("map_forward: label count mismatch");
  auto x = concat_cols(z, constant(one_hot(labels, cfg_.num_classes)));
  auto h = lrelu(linear(x, map_.get("w1"), map_.get("b1")));
  h = lrelu(linear(h, map_.get("w2"), map_.get("b2")));
  return linear(h, map_.get("w3"), map_.get("b3"));
}

Tensor Generator::map_latent(const Tensor& z, int label) const {
  if (z.size() != cfg_.d_z) throw std::invalid_argument("map_latent: z size mismatch");
  if (label < 0 || label >= cfg_.num_classes) throw std::invalid_argument("map_latent: bad label");
  auto s = map_forward(constant(z.reshaped({1, cfg_.d_z})), {label});
  const int L = cfg_.num_layers();
  Tensor code({L, cfg_.s_dim});
  for (int l = 0; l < L; ++l)
    for (int j = 0; j < cfg_.s_dim; ++j) code[static_cast<int64_t>(l) * cfg_.s_dim + j] = s->value[j];
  return code;
}

VarPtr Generator::synthesize(const std::vector<VarPtr>& style_rows,
                             const std::vector<VarPtr>& noise) const {
  const int L = cfg_.num_layers();
  auto sizes = cfg_.layer_sizes();
  if (static_cast<int>(style_rows.size()) != L || static_cast<int>(noise.size()) != L)
    throw std::invalid_argument("synthesize: expected " + std::to_string(L) + " styles and noises");
  const int B = style_rows[0]->value.dim(0);
  for (const auto& s : style_rows)
    if (s->value.ndim() != 2 || s->value.dim(0) != B || s->value.dim(1) != cfg_.s_dim)
      throw std::invalid_argument("synthesize: style row shape mismatch");
  for (int l = 0; l < L; ++l) {
    const auto& nv = noise[l]->value;
    if (nv.ndim() != 4 || nv.dim(1) != 1 || nv.dim(2) != sizes[l] || nv.dim(3) != sizes[l] ||
        (nv.dim(0) != B && nv.dim(0) != 1))
      throw std::invalid_argument("synthesize: noise plane " + std::to_string(l) + " shape mismatch");
  }

  auto h = tile_batch(syn_.get("const"), B);
  for (int l = 0; l < L; ++l) {
    std::string p = "l" + std::to_string(l) + ".";
    if (l > 0 && sizes[l] != sizes[l - 1]) h = upsample2(h);
    h = conv2d(h, syn_.get(p + "conv.w"), nullptr, 1, 1);
    auto mod = add_scalar(linear(style_rows[l], syn_.get(p + "style.w"), syn_.get(p + "style.b")), 1.0);
    h = mul_channels(h, mod);
    h = add_hw(h, scale_by(noise[l], syn_.get(p + "nstrength")));
    h = add_channels(h, syn_.get(p + "bias"));
    h = lrelu(h);
  }
  auto img = tanh_act(conv2d(h, syn_.get("torgb.w"), syn_.get("torgb.b"), 1, 0));
  if (!img->value.all_finite()) throw std::runtime_error("synthesize: non-finite output");
  return img;
}

VarPtr Generator::synthesize_code(const VarPtr& w, const std::vector<VarPtr>& noise) const {
  const int L = cfg_.num_layers();
  if (w->value.ndim() != 2 || w->value.dim(0) != L || w->value.dim(1) != cfg_.s_dim)
    throw std::invalid_argument("synthesize_code: style code must be (L,s_dim)");
  std::vector<VarPtr> rows;
  rows.reserve(L);
  for (int l = 0; l < L; ++l) rows.push_back(row_slice(w, l));
  return synthesize(rows, noise);
}

Tensor Generator::synthesize_image(const Tensor& w, const NoiseMaps& noise) const {
  std::vector<VarPtr> nv;
  nv.reserve(noise.size());
  for (const auto& n : noise) nv.push_back(constant(n));
  return synthesize_code(constant(w), nv)->value;
}

NoiseMaps Generator::sample_noise(RandomStream& rs, int batch) const {
  NoiseMaps maps;
  for (int s : cfg_.layer_sizes()) {
    Tensor n({batch, 1, s, s});
    rs.fill_normal(n);
    maps.push_back(std::move(n));
  }
  return maps;
}

NoiseMaps Generator::zero_noise(int batch) const {
  NoiseMaps maps;
  for (int s : cfg_.layer_sizes()) maps.emplace_back(Shape{batch, 1, s, s});
  return maps;
}

void Generator::save(const std::string& path, const nlohmann::json& extra_meta) const {
  Checkpoint ck;
  ck.meta = extra_meta;
  ck.meta["kind"] = "generator";
  ck.meta["config"] = cfg_.to_json();
  ck.meta["config_hash"] = hash_json_hex(cfg_.to_json());
  params_into_checkpoint(map_, ck, "map.");
  params_into_checkpoint(syn_, ck, "syn.");
  save_checkpoint(path, ck);
}

Generator Generator::load(const std::string& path) { return load(load_checkpoint(path)); }

Generator Generator::load(const Checkpoint& ck, const std::string& prefix) {
  Generator g(GeneratorConfig::from_json(ck.meta.at("config")), 0);
  params_from_checkpoint(g.map_, ck, prefix + "map.");
  params_from_checkpoint(g.syn_, ck, prefix + "syn.");
  return g;
}

DiscriminatorSet::DiscriminatorSet(GeneratorConfig cfg, uint64_t seed) : cfg_(cfg) {
  RandomStream rs(derive_seed(seed, "disc"));
  const int C = cfg_.img_channels;
  for (int i = 0; i < scales(); ++i) {
    std::string p = "d" + std::to_string(i) + ".";
    params_.add(p + "c1.w", he_normal({8, C, 3, 3}, static_cast<int64_t>(C) * 9, rs));
    params_.add(p + "c1.b", Tensor({8}));
    params_.add(p + "c2.w", he_normal({16, 8, 3, 3}, 72, rs));
    params_.add(p + "c2.b", Tensor({16}));
    params_.add(p + "c3.w", he_normal({24, 16, 3, 3}, 144, rs));
    params_.add(p + "c3.b", Tensor({24}));
    params_.add(p + "head.w", scaled_normal({1, 24}, 1.0 / std::sqrt(24.0), rs));
    params_.add(p + "head.b", Tensor({1}));
    params_.add(p + "embed", scaled_normal({cfg_.num_classes, 24}, 0.1, rs));
  }
}

VarPtr DiscriminatorSet::trunk(const VarPtr& x, int scale) const {
  std::string p = "d" + std::to_string(scale) + ".";
  auto h = scale == 0 ? x : avgpool2(x);
  h = lrelu(conv2d(h, params_.get(p + "c1.w"), params_.get(p + "c1.b"), 2, 1));
  h = lrelu(conv2d(h, params_.get(p + "c2.w"), params_.get(p + "c2.b"), 2, 1));
  h = lrelu(conv2d(h, params_.get(p + "c3.w"), params_.get(p + "c3.b"), 2, 1));
  return global_avgpool(h);
}

std::vector<VarPtr> DiscriminatorSet::discriminate(const VarPtr& images) const {
  std::vector<VarPtr> out;
  for (int i = 0; i < scales(); ++i) {
    std::string p = "d" + std::to_string(i) + ".";
    auto g = trunk(images, i);
    out.push_back(sigmoid_act(linear(g, params_.get(p + "head.w"), params_.get(p + "head.b"))));
  }
  return out;
}

std::vector<VarPtr> DiscriminatorSet::score_conditioned(const VarPtr& images,
                                                        const std::vector<int>& labels) const {
  auto onehot = constant(one_hot(labels, cfg_.num_classes));
  auto ones = constant(Tensor::full({24, 1}, 1.0));
  std::vector<VarPtr> out;
  for (int i = 0; i < scales(); ++i) {
    std::string p = "d" + std::to_string(i) + ".";
    auto g = trunk(images, i);
    auto base = linear(g, params_.get(p + "head.w"), params_.get(p + "head.b"));
    auto proj = matmul(mul(matmul(onehot, params_.get(p + "embed")), g), ones);
    out.push_back(add(base, proj));
  }
  return out;
}

void DiscriminatorSet::save_into(Checkpoint& ck) const {
  params_into_checkpoint(params_, ck, "disc.");
}

DiscriminatorSet DiscriminatorSet::load(const Checkpoint& ck, const GeneratorConfig& cfg) {
  DiscriminatorSet d(cfg, 0);
  params_from_checkpoint(d.params_, ck, "disc.");
  return d;
}

Classifier::Classifier(std::string id, std::string arch, int img_channels, int img_size,
                       int num_classes, PreprocessSpec prep, uint64_t seed)
    : id_(std::move(id)),
      arch_(std::move(arch)),
      img_channels_(img_channels),
      img_size_(img_size),
      num_classes_(num_classes),
      prep_(std::move(prep)) {
  if (prep_.mean.size() != img_channels_ || prep_.stddev.size() != img_channels_)
    throw std::invalid_argument("classifier: preprocessing stats must be per-channel");
  RandomStream rs(derive_seed(seed, "clf." + arch_));
  const int C = img_channels_;
  if (arch_ == "cnn") {
    params_.add("c1.w", he_normal({16, C, 3, 3}, static_cast<int64_t>(C) * 9, rs));
    params_.add("c1.b", Tensor({16}));
    params_.add("c2.w", he_normal({24, 16, 3, 3}, 144, rs));
    params_.add("c2.b", Tensor({24}));
    params_.add("c3.w", he_normal({32, 24, 3, 3}, 216, rs));
    params_.add("c3.b", Tensor({32}));
    params_.add("fc.w", scaled_normal({num_classes_, 32}, 1.0 / std::sqrt(32.0), rs));
    params_.add("fc.b", Tensor({num_classes_}));
  } else if (arch_ == "mlp") {
    const int flat = C * prep_.crop * prep_.crop;
    params_.add("fc1.w", he_normal({96, flat}, flat, rs));
    params_.add("fc1.b", Tensor({96}));
    params_.add("fc2.w", he_normal({48, 96}, 96, rs));
    params_.add("fc2.b", Tensor({48}));
    params_.add("fc3.w", scaled_normal({num_classes_, 48}, 1.0 / std::sqrt(48.0), rs));
    params_.add("fc3.b", Tensor({num_classes_}));
  } else if (arch_ == "oracle") {
    params_.add("c1.w", he_normal({16, C, 5, 5}, static_cast<int64_t>(C) * 25, rs));
    params_.add("c1.b", Tensor({16}));
    params_.add("c2.w", he_normal({32, 16, 3, 3}, 144, rs));
    params_.add("c2.b", Tensor({32}));
    params_.add("c3.w", he_normal({48, 32, 3, 3}, 288, rs));
    params_.add("c3.b", Tensor({48}));
    params_.add("fc.w", scaled_normal({num_classes_, 48}, 1.0 / std::sqrt(48.0), rs));
    params_.add("fc.b", Tensor({num_classes_}));
  } else {
    throw std::invalid_argument("unknown classifier arch tag: " + arch_);
  }
}

VarPtr Classifier::logits(const VarPtr& images) const {
  if (images->value.ndim() != 4 || images->value.dim(1) != img_channels_ ||
      images->value.dim(2) != img_size_ || images->value.dim(3) != img_size_)
    throw std::invalid_argument("classify: expected (B," + std::to_string(img_channels_) + "," +
                                std::to_string(img_size_) + "," + std::to_string(img_size_) + ")");
  auto x = crop_center(images, prep_.crop, prep_.crop);
  x = normalize_channels_const(x, prep_.mean, prep_.stddev);
  if (arch_ == "cnn") {
    auto h = lrelu(conv2d(x, params_.get("c1.w"), params_.get("c1.b"), 1, 1));
    h = avgpool2(h);
    h = lrelu(conv2d(h, params_.get("c2.w"), params_.get("c2.b"), 1, 1));
    h = avgpool2(h);
    h = lrelu(conv2d(h, params_.get("c3.w"), params_.get("c3.b"), 1, 1));
    return linear(global_avgpool(h), params_.get("fc.w"), params_.get("fc.b"));
  }
  if (arch_ == "mlp") {
    const int B = images->value.dim(0);
    auto flat = reshape(x, {B, img_channels_ * prep_.crop * prep_.crop});
    auto h = lrelu(linear(flat, params_.get("fc1.w"), params_.get("fc1.b")));
    h = lrelu(linear(h, params_.get("fc2.w"), params_.get("fc2.b")));
    return linear(h, params_.get("fc3.w"), params_.get("fc3.b"));
  }
  auto h = lrelu(conv2d(x, params_.get("c1.w"), params_.get("c1.b"), 1, 2));
  h = avgpool2(h);
  h = lrelu(conv2d(h, params_.get("c2.w"), params_.get("c2.b"), 1, 1));
  h = avgpool2(h);
  h = lrelu(conv2d(h, params_.get("c3.w"), params_.get("c3.b"), 1, 1));
  return linear(global_avgpool(h), params_.get("fc.w"), params_.get("fc.b"));
}

VarPtr Classifier::probabilities(const VarPtr& images) const { return softmax_rows(logits(images)); }

Tensor Classifier::probabilities(const Tensor& images) const {
  Tensor batch = images.ndim() == 3
                     ? images.reshaped({1, images.dim(0), images.dim(1), images.dim(2)})
                     : images;
  return probabilities(constant(batch))->value;
}

std::vector<int> Classifier::predict(const Tensor& images) const {
  Tensor probs = probabilities(images);
  std::vector<int> out(probs.dim(0));
  for (int b = 0; b < probs.dim(0); ++b) out[b] = argmax_row(probs, b);
  return out;
}

void Classifier::save(const std::string& path, const nlohmann::json& extra_meta) const {
  Checkpoint ck;
  ck.meta = extra_meta;
  ck.meta["kind"] = "classifier";
  ck.meta["id"] = id_;
  ck.meta["arch"] = arch_;
  ck.meta["img_channels"] = img_channels_;
  ck.meta["img_size"] = img_size_;
  ck.meta["num_classes"] = num_classes_;
  ck.meta["crop"] = prep_.crop;
  ck.add("prep.mean", prep_.mean);
  ck.add("prep.std", prep_.stddev);
  params_into_checkpoint(params_, ck, "");
  save_checkpoint(path, ck);
}

Classifier Classifier::load(const std::string& path) { return load(load_checkpoint(path)); }

Classifier Classifier::load(const Checkpoint& ck) {
  PreprocessSpec prep;
  prep.crop = ck.meta.at("crop");
  prep.mean = ck.tensor("prep.mean");
  prep.stddev = ck.tensor("prep.std");
  Classifier c(ck.meta.at("id"), ck.meta.at("arch"), ck.meta.at("img_channels"),
               ck.meta.at("img_size"), ck.meta.at("num_classes"), prep, 0);
  params_from_checkpoint(c.params_, ck, "");
  return c;
}

PerceptualNet::PerceptualNet(int img_channels, int img_size, int num_classes, uint64_t seed)
    : img_channels_(img_channels), img_size_(img_size), num_classes_(num_classes) {
  RandomStream rs(derive_seed(seed, "perc"));
  params_.add("c1.w", he_normal({12, img_channels_, 3, 3}, static_cast<int64_t>(img_channels_) * 9, rs));
  params_.add("c1.b", Tensor({12}));
  params_.add("c2.w", he_normal({16, 12, 3, 3}, 108, rs));
  params_.add("c2.b", Tensor({16}));
  params_.add("c3.w", he_normal({24, 16, 3, 3}, 144, rs));
  params_.add("c3.b", Tensor({24}));
  params_.add("fc.w", scaled_normal({num_classes_, 24}, 1.0 / std::sqrt(24.0), rs));
  params_.add("fc.b", Tensor({num_classes_}));
}

std::vector<Shape> PerceptualNet::tap_shapes(int batch) const {
  return {{batch, 12, img_size_, img_size_},
          {batch, 16, img_size_ / 2, img_size_ / 2},
          {batch, 24, img_size_ / 4, img_size_ / 4}};
}

std::vector<VarPtr> PerceptualNet::embed(const VarPtr& images) const {
  if (images->value.ndim() != 4 || images->value.dim(1) != img_channels_ ||
      images->value.dim(2) != img_size_ || images->value.dim(3) != img_size_)
    throw std::invalid_argument("perceptual_embed: unexpected image shape " +
                                shape_str(images->value.shape()));
  auto h1 = lrelu(conv2d(images, params_.get("c1.w"), params_.get("c1.b"), 1, 1));
  auto h2 = lrelu(conv2d(avgpool2(h1), params_.get("c2.w"), params_.get("c2.b"), 1, 1));
  auto h3 = lrelu(conv2d(avgpool2(h2), params_.get("c3.w"), params_.get("c3.b"), 1, 1));
  return {h1, h2, h3};
}

VarPtr PerceptualNet::logits(const VarPtr& images) const {
  auto taps = embed(images);
  return linear(global_avgpool(taps[2]), params_.get("fc.w"), params_.get("fc.b"));
}

void PerceptualNet::save(const std::string& path, const nlohmann::json& extra_meta) const {
  Checkpoint ck;
  ck.meta = extra_meta;
  ck.meta["kind"] = "perceptual";
  ck.meta["img_channels"] = img_channels_;
  ck.meta["img_size"] = img_size_;
  ck.meta["num_classes"] = num_classes_;
  nlohmann::json taps = nlohmann::json::array();
  for (const Shape& s : tap_shapes()) taps.push_back(s);
  ck.meta["taps"] = taps;
  params_into_checkpoint(params_, ck, "");
  save_checkpoint(path, ck);
}

PerceptualNet PerceptualNet::load(const std::string& path) { return load(load_checkpoint(path)); }

PerceptualNet PerceptualNet::load(const Checkpoint& ck) {
  PerceptualNet p(ck.meta.at("img_channels"), ck.meta.at("img_size"), ck.meta.at("num_classes"), 0);
  params_from_checkpoint(p.params_, ck, "");
  return p;
}

Tensor one_hot(const std::vector<int>& labels, int num_classes) {
  Tensor t({static_cast<int>(labels.size()), num_classes});
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw std::invalid_argument("one_hot: label out of range");
    t[static_cast<int64_t>(i) * num_classes + labels[i]] = 1.0;
  }
  return t;
}

int argmax_row(const Tensor& probs, int row) {
  if (probs.ndim() != 2) throw std::invalid_argument("argmax_row: expects (B,K)");
  const int K = probs.dim(1);
  int best = 0;
  double bv = probs[static_cast<int64_t>(row) * K];
  for (int k = 1; k < K; ++k) {
    double v = probs[static_cast<int64_t>(row) * K + k];
    if (v > bv) {
      bv = v;
      best = k;
    }
  }
  return best;
}

void params_into_checkpoint(const ParamStore& ps, Checkpoint& ck, const std::string& prefix) {
  for (const auto& [name, v] : ps.items()) ck.add(prefix + name, v->value);
}

void params_from_checkpoint(ParamStore& ps, const Checkpoint& ck, const std::string& prefix) {
  for (auto& [name, v] : ps.items()) {
    const Tensor& t = ck.tensor(prefix + name);
    if (!t.same_shape(v->value))
      throw std::invalid_argument("checkpoint: shape mismatch for " + prefix + name + ": " +
                                  shape_str(t.shape()) + " vs " + shape_str(v->value.shape()));
    v->value = t;
  }
}

}  // namespace apt
