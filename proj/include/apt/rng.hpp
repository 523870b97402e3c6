#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "apt/tensor.hpp"

namespace apt {

// 64-bit FNV-1a. Used for config hashes, dataset checksums and seed derivation.
uint64_t fnv1a64(const void* data, size_t len);
uint64_t fnv1a64(std::string_view s);

// Derives an independent stream seed from (base, tag). Deterministic across platforms.
uint64_t derive_seed(uint64_t base, std::string_view tag);
uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t index);

// Deterministic RNG stream. Normal variates use Box-Muller on top of mt19937_64
// so sequences are identical across standard libraries.
class RandomStream {
 public:
  explicit RandomStream(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  double uniform() {  // [0, 1)
    return (next_u64() >> 11) * (1.0 / 9007199254740992.0);
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int uniform_int(int n);

  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  void fill_normal(Tensor& t, double mean = 0.0, double stddev = 1.0);
  void fill_uniform(Tensor& t, double lo, double hi);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace apt
