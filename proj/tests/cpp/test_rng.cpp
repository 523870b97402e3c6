#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "apt/rng.hpp"
#include "apt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

using apt::RandomStream;

TEST_CASE("fnv1a matches reference vectors") {
  // Reference values for the 64-bit FNV-1a parameters.
  CHECK(apt::fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(apt::fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(apt::fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("derive_seed is deterministic and tag-sensitive") {
  uint64_t a = apt::derive_seed(42, "inversion", 7);
  uint64_t b = apt::derive_seed(42, "inversion", 7);
  uint64_t c = apt::derive_seed(42, "inversion", 8);
  uint64_t d = apt::derive_seed(42, "attack", 7);
  uint64_t e = apt::derive_seed(43, "inversion", 7);
  CHECK(a == b);
  CHECK(a != c);
  CHECK(a != d);
  CHECK(a != e);
}

TEST_CASE("same seed reproduces the stream exactly") {
  RandomStream s1(123), s2(123);
  for (int i = 0; i < 100; ++i) {
    CHECK(s1.uniform() == s2.uniform());
    CHECK(s1.normal() == s2.normal());
    CHECK(s1.uniform_int(17) == s2.uniform_int(17));
  }
}

TEST_CASE("uniform stays in [0,1) and covers the range") {
  RandomStream s(7);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 10000; ++i) {
    double u = s.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  CHECK(lo < 0.01);
  CHECK(hi > 0.99);
}

TEST_CASE("normal moments are plausible") {
  RandomStream s(99);
  const int n = 200000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    double v = s.normal();
    sum += v;
    sq += v * v;
  }
  double mean = sum / n;
  double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("uniform_int bounds and coverage") {
  RandomStream s(5);
  std::set<int> seen;
  for (int i = 0; i < 1000; ++i) {
    int v = s.uniform_int(10);
    CHECK(v >= 0);
    CHECK(v < 10);
    seen.insert(v);
  }
  CHECK(seen.size() == 10);
}

TEST_CASE("fill_normal fills every slot") {
  RandomStream s(11);
  apt::Tensor t({64});
  s.fill_normal(t);
  int nonzero = 0;
  for (int64_t i = 0; i < t.size(); ++i)
    if (t[i] != 0.0) ++nonzero;
  CHECK(nonzero == 64);
}

TEST_CASE("shuffle is a deterministic permutation") {
  std::vector<int> v(20);
  for (int i = 0; i < 20; ++i) v[i] = i;
  std::vector<int> w = v;
  RandomStream s1(3), s2(3);
  s1.shuffle(v);
  s2.shuffle(w);
  CHECK(v == w);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 20; ++i) CHECK(sorted[i] == i);
}
