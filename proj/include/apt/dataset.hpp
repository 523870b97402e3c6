#pragma once

#include "apt/serialize.hpp"
#include "apt/tensor.hpp"
#include "apt/rng.hpp"

#include <string>
#include <vector>

namespace apt {

// In-memory labeled image set. Pixels live in [-1, 1], pre-quantized to the
// 8-bit grid so in-memory generation and disk round trips are bit-identical.
struct Dataset {
  std::string id;
  int num_classes = 0;
  Tensor images;  // (N, C, H, W)
  std::vector<int> labels;

  int64_t count() const { return labels.empty() ? 0 : images.dim(0); }
  Tensor image(int64_t i) const;                     // (C, H, W)
  Tensor batch(const std::vector<int64_t>& idx) const;  // (B, C, H, W)
  std::vector<int64_t> indices_of_class(int c) const;

  // Per-channel mean/stddev over the whole set, in the [-1, 1] domain.
  std::pair<Tensor, Tensor> channel_stats() const;
};

struct DataSplits {
  Dataset train, val, test;
};

const std::vector<std::string>& shape_class_names();  // 10 entries

// Procedurally rendered 10-class icon corpus: per-image geometry, palette and
// grain are drawn from a stream derived from (seed, image index), so the same
// seed always renders the same corpus.
Dataset make_shapes_dataset(int per_class, uint64_t seed, int img_size = 32);

// Stratified 80/10/10 split with a deterministic shuffle.
DataSplits split_80_10_10(const Dataset& full, uint64_t seed);

void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace apt
