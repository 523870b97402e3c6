#include "apt/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace apt {

Tensor Dataset::image(int64_t i) const {
  if (i < 0 || i >= count()) throw std::out_of_range("dataset image index");
  int C = images.dim(1), H = images.dim(2), W = images.dim(3);
  Tensor out({C, H, W});
  int64_t stride = static_cast<int64_t>(C) * H * W;
  std::copy(images.vec().begin() + i * stride, images.vec().begin() + (i + 1) * stride,
            out.vec().begin());
  return out;
}

Tensor Dataset::batch(const std::vector<int64_t>& idx) const {
  if (idx.empty()) throw std::invalid_argument("empty batch");
  int C = images.dim(1), H = images.dim(2), W = images.dim(3);
  Tensor out({static_cast<int>(idx.size()), C, H, W});
  int64_t stride = static_cast<int64_t>(C) * H * W;
  for (size_t b = 0; b < idx.size(); ++b) {
    if (idx[b] < 0 || idx[b] >= count()) throw std::out_of_range("dataset batch index");
    std::copy(images.vec().begin() + idx[b] * stride, images.vec().begin() + (idx[b] + 1) * stride,
              out.vec().begin() + static_cast<int64_t>(b) * stride);
  }
  return out;
}

std::vector<int64_t> Dataset::indices_of_class(int c) const {
  std::vector<int64_t> out;
  for (int64_t i = 0; i < count(); ++i)
    if (labels[i] == c) out.push_back(i);
  return out;
}

std::pair<Tensor, Tensor> Dataset::channel_stats() const {
  int C = images.dim(1);
  int64_t per_channel = images.size() / C;
  Tensor mean({C}), stddev({C});
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int64_t n = 0; n < images.dim(0); ++n) {
      const double* p = images.data() + (n * C + c) * (per_channel / images.dim(0));
      for (int64_t k = 0; k < per_channel / images.dim(0); ++k) s += p[k];
    }
    mean[c] = s / per_channel;
  }
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int64_t n = 0; n < images.dim(0); ++n) {
      const double* p = images.data() + (n * C + c) * (per_channel / images.dim(0));
      for (int64_t k = 0; k < per_channel / images.dim(0); ++k) {
        double d = p[k] - mean[c];
        s += d * d;
      }
    }
    stddev[c] = std::sqrt(s / per_channel) + 1e-8;
  }
  return {mean, stddev};
}

const std::vector<std::string>& shape_class_names() {
  static const std::vector<std::string> names = {"disk",    "square",  "triangle", "plus",
                                                 "ring",    "stripes", "bars",     "diamond",
                                                 "checker", "dots"};
  return names;
}

namespace {

struct Palette {
  double fg[3], bg[3];
};

Palette draw_palette(RandomStream& rs) {
  Palette p;
  // Saturated foreground against a dark muted background keeps every class
  // legible at 32x32 regardless of hue.
  for (double& v : p.fg) v = 0.3 + 0.7 * rs.uniform();
  int hot = rs.uniform_int(3);
  p.fg[hot] = 0.75 + 0.25 * rs.uniform();
  for (double& v : p.bg) v = -0.9 + 0.45 * rs.uniform();
  for (int c = 0; c < 3; ++c) p.fg[c] = 2.0 * p.fg[c] - 1.0;
  return p;
}

double sd_box(double x, double y, double hx, double hy) {
  double dx = std::abs(x) - hx, dy = std::abs(y) - hy;
  double ox = std::max(dx, 0.0), oy = std::max(dy, 0.0);
  return std::sqrt(ox * ox + oy * oy) + std::min(std::max(dx, dy), 0.0);
}

double sd_triangle(double x, double y, double r) {
  // Equilateral triangle pointing up, circumradius r.
  const double k = std::sqrt(3.0);
  x = std::abs(x) - r;
  y = y + r / k;
  if (x + k * y > 0.0) {
    double nx = (x - k * y) / 2.0, ny = (-k * x - y) / 2.0;
    x = nx;
    y = ny;
  }
  x -= std::min(std::max(x, -2.0 * r), 0.0);
  double s = (y > 0.0) ? 1.0 : (y < 0.0 ? -1.0 : 0.0);
  return -std::sqrt(x * x + y * y) * s;
}

// Signed distance (negative inside) of each icon class in unit coordinates.
// Periodic texture classes (stripes/bars/checker) return a pseudo-distance
// that still gives ~1px soft edges.
double class_sdf(int cls, double x, double y, double f, double phase) {
  switch (cls) {
    case 0: return std::sqrt(x * x + y * y) - 0.55;
    case 1: return sd_box(x, y, 0.5, 0.5);
    case 2: return sd_triangle(x, y, 0.62);
    case 3: return std::min(sd_box(x, y, 0.62, 0.2), sd_box(x, y, 0.2, 0.62));
    case 4: return std::abs(std::sqrt(x * x + y * y) - 0.45) - 0.16;
    case 5: return (0.35 - std::abs(0.7 * std::sin(f * (y + phase)))) / f;
    case 6: return (0.35 - std::abs(0.7 * std::sin(f * (x + phase)))) / f;
    case 7: return std::abs(x) + std::abs(y) - 0.62;
    case 8: {
      double fc = 0.55 * f;  // coarser cells than the stripe classes
      double v = std::sin(fc * (x + phase)) * std::sin(fc * (y + phase));
      return (0.3 - v) / fc;  // soft checkerboard: cells where the product is high
    }
    case 9: {
      // 3x3 dot lattice.
      double cell = 0.62;
      double qx = std::remainder(x, cell), qy = std::remainder(y, cell);
      return std::sqrt(qx * qx + qy * qy) - 0.2;
    }
    default: throw std::invalid_argument("unknown shape class");
  }
}

}  // namespace

Dataset make_shapes_dataset(int per_class, uint64_t seed, int img_size) {
  if (per_class <= 0 || img_size < 8) throw std::invalid_argument("bad dataset dimensions");
  const int K = 10, C = 3;
  Dataset ds;
  ds.id = "shapes10";
  ds.num_classes = K;
  ds.images = Tensor({per_class * K, C, img_size, img_size});
  ds.labels.resize(static_cast<size_t>(per_class) * K);

  const int ss = 2;  // supersampling factor per axis
  const double edge = 2.0 / img_size;  // ~1px soft edge in unit coordinates
  for (int64_t idx = 0; idx < ds.count(); ++idx) {
    int cls = static_cast<int>(idx % K);
    ds.labels[idx] = cls;
    RandomStream rs(derive_seed(seed, "shapes.img", static_cast<uint64_t>(idx)));
    Palette pal = draw_palette(rs);
    double cx = 0.24 * (rs.uniform() - 0.5);
    double cy = 0.24 * (rs.uniform() - 0.5);
    double scale = 0.7 + 0.45 * rs.uniform();
    double rot = (cls == 2 || cls == 7) ? 0.5 * (rs.uniform() - 0.5) : 0.0;
    double f = 4.0 + 3.0 * rs.uniform();    // texture frequency
    double phase = 2.0 * rs.uniform();      // texture phase
    double cr = std::cos(rot), sr = std::sin(rot);

    double* img = ds.images.data() + idx * C * img_size * img_size;
    for (int i = 0; i < img_size; ++i)
      for (int j = 0; j < img_size; ++j) {
        double alpha = 0.0;
        for (int si = 0; si < ss; ++si)
          for (int sj = 0; sj < ss; ++sj) {
            double v = ((i + (si + 0.5) / ss) / img_size) * 2.0 - 1.0;
            double u = ((j + (sj + 0.5) / ss) / img_size) * 2.0 - 1.0;
            double px = (u - cx) / scale, py = (v - cy) / scale;
            double rx = cr * px + sr * py, ry = -sr * px + cr * py;
            double d = class_sdf(cls, rx, ry, f, phase) * scale;
            alpha += std::clamp(0.5 - d / edge, 0.0, 1.0);
          }
        alpha /= ss * ss;
        double grain = 0.03 * rs.normal();
        for (int c = 0; c < C; ++c) {
          double v = pal.bg[c] + alpha * (pal.fg[c] - pal.bg[c]) + grain;
          img[(c * img_size + i) * img_size + j] = std::clamp(v, -1.0, 1.0);
        }
      }
  }

  // Snap to the 8-bit grid so generation, saving and loading all agree.
  for (auto& v : ds.images.vec())
    v = std::round((v + 1.0) * 0.5 * 255.0) / 255.0 * 2.0 - 1.0;
  return ds;
}

DataSplits split_80_10_10(const Dataset& full, uint64_t seed) {
  DataSplits out;
  std::vector<std::vector<int64_t>> parts(3);
  RandomStream rs(derive_seed(seed, "split"));
  for (int c = 0; c < full.num_classes; ++c) {
    std::vector<int64_t> idx = full.indices_of_class(c);
    rs.shuffle(idx);
    int64_t n = static_cast<int64_t>(idx.size());
    int64_t n_train = (n * 8) / 10;
    int64_t n_val = n / 10;
    for (int64_t i = 0; i < n; ++i)
      parts[i < n_train ? 0 : (i < n_train + n_val ? 1 : 2)].push_back(idx[i]);
  }
  Dataset* dsts[3] = {&out.train, &out.val, &out.test};
  const char* tags[3] = {"train", "val", "test"};
  for (int s = 0; s < 3; ++s) {
    std::sort(parts[s].begin(), parts[s].end());
    Dataset& d = *dsts[s];
    d.id = full.id + "/" + tags[s];
    d.num_classes = full.num_classes;
    d.images = full.batch(parts[s]);
    d.labels.reserve(parts[s].size());
    for (int64_t i : parts[s]) d.labels.push_back(full.labels[i]);
  }
  return out;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  Checkpoint ck;
  ck.meta = {{"kind", "dataset"},
             {"id", ds.id},
             {"num_classes", ds.num_classes},
             {"count", ds.count()}};
  Tensor imgs_255 = ds.images;
  for (auto& v : imgs_255.vec()) v = std::round((v + 1.0) * 0.5 * 255.0);
  ck.add("images", std::move(imgs_255), Dtype::u8);
  Tensor lab({std::max<int>(1, static_cast<int>(ds.labels.size()))});
  for (size_t i = 0; i < ds.labels.size(); ++i) lab[i] = ds.labels[i];
  ck.add("labels", std::move(lab), Dtype::u8);
  save_checkpoint(path, ck);
}

Dataset load_dataset(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "dataset")
    throw std::runtime_error(path + ": not a dataset file");
  Dataset ds;
  ds.id = ck.meta.at("id");
  ds.num_classes = ck.meta.at("num_classes");
  ds.images = ck.tensor("images");
  for (auto& v : ds.images.vec()) v = v / 255.0 * 2.0 - 1.0;
  Tensor lab = ck.tensor("labels");
  int64_t n = ck.meta.at("count");
  ds.labels.resize(n);
  for (int64_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(lab[i]);
  return ds;
}

}  // namespace apt
