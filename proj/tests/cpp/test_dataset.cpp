#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "apt/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <set>

using namespace apt;

TEST_CASE("shape corpus is deterministic and balanced") {
  Dataset a = make_shapes_dataset(4, 5);
  Dataset b = make_shapes_dataset(4, 5);
  CHECK(a.count() == 40);
  CHECK(a.labels == b.labels);
  CHECK(max_abs_diff(a.images, b.images) == 0.0);

  std::vector<int> counts(10, 0);
  for (int l : a.labels) counts[l]++;
  for (int c : counts) CHECK(c == 4);

  Dataset other = make_shapes_dataset(4, 6);
  CHECK(max_abs_diff(a.images, other.images) > 0.01);
}

TEST_CASE("pixels live on the 8-bit grid inside [-1, 1]") {
  Dataset ds = make_shapes_dataset(2, 9);
  CHECK(ds.images.min() >= -1.0);
  CHECK(ds.images.max() <= 1.0);
  for (int64_t i = 0; i < ds.images.size(); i += 97) {
    double q = (ds.images[i] + 1.0) * 0.5 * 255.0;
    CHECK(std::abs(q - std::round(q)) < 1e-9);
  }
}

TEST_CASE("classes render distinct content") {
  Dataset ds = make_shapes_dataset(6, 11);
  // Mean intra-class image per class; any two class means should differ.
  std::vector<Tensor> means;
  for (int c = 0; c < 10; ++c) {
    auto idx = ds.indices_of_class(c);
    Tensor m = ds.image(idx[0]);
    for (size_t k = 1; k < idx.size(); ++k) m.add_inplace(ds.image(idx[k]), 1.0);
    m.scale_inplace(1.0 / idx.size());
    means.push_back(m);
  }
  for (int i = 0; i < 10; ++i)
    for (int j = i + 1; j < 10; ++j) CHECK(max_abs_diff(means[i], means[j]) > 0.05);
}

TEST_CASE("accessors agree") {
  Dataset ds = make_shapes_dataset(2, 13);
  Tensor one = ds.image(7);
  Tensor row = ds.batch({7});
  CHECK(one.size() * 1 == row.size());
  for (int64_t i = 0; i < one.size(); ++i) CHECK(one[i] == row[i]);
  CHECK_THROWS_AS(ds.image(ds.count()), std::out_of_range);
  CHECK_THROWS_AS(ds.batch({}), std::invalid_argument);
}

TEST_CASE("stratified split is 80/10/10 per class and loses nothing") {
  Dataset full = make_shapes_dataset(10, 17);
  DataSplits sp = split_80_10_10(full, 17);
  CHECK(sp.train.count() == 80);
  CHECK(sp.val.count() == 10);
  CHECK(sp.test.count() == 10);
  for (int c = 0; c < 10; ++c) {
    CHECK(sp.train.indices_of_class(c).size() == 8);
    CHECK(sp.val.indices_of_class(c).size() == 1);
    CHECK(sp.test.indices_of_class(c).size() == 1);
  }
  DataSplits again = split_80_10_10(full, 17);
  CHECK(max_abs_diff(sp.train.images, again.train.images) == 0.0);
  DataSplits reshuffled = split_80_10_10(full, 18);
  CHECK(max_abs_diff(sp.train.images, reshuffled.train.images) > 0.0);
}

TEST_CASE("channel stats match a brute-force loop") {
  Dataset ds = make_shapes_dataset(2, 19);
  auto [mean, stddev] = ds.channel_stats();
  int C = ds.images.dim(1), HW = ds.images.dim(2) * ds.images.dim(3);
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    int64_t n = 0;
    for (int64_t img = 0; img < ds.count(); ++img)
      for (int64_t k = 0; k < HW; ++k) {
        s += ds.images[(img * C + c) * HW + k];
        ++n;
      }
    double m = s / n;
    CHECK(mean[c] == doctest::Approx(m).epsilon(1e-12));
    CHECK(stddev[c] > 0.0);
  }
}

TEST_CASE("dataset round trips through its container") {
  Dataset ds = make_shapes_dataset(3, 23);
  std::string path = "test_dataset_rt.aptc";
  save_dataset(ds, path);
  Dataset back = load_dataset(path);
  CHECK(back.id == ds.id);
  CHECK(back.num_classes == ds.num_classes);
  CHECK(back.labels == ds.labels);
  CHECK(max_abs_diff(back.images, ds.images) < 1e-12);
  std::remove(path.c_str());
}

TEST_CASE("class names are ten unique tags") {
  const auto& names = shape_class_names();
  CHECK(names.size() == 10);
  std::set<std::string> uniq(names.begin(), names.end());
  CHECK(uniq.size() == 10);
}
