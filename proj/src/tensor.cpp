#include "apt/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace apt {

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("nonpositive dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel(shape_) != static_cast<int64_t>(data_.size()))
    throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape_));
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor Tensor::reshaped(Shape s) const {
  if (numel(s) != size())
    throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(s));
  Tensor t;
  t.shape_ = std::move(s);
  t.data_ = data_;
  return t;
}

void Tensor::add_inplace(const Tensor& o, double scale) {
  if (!same_shape(o)) throw std::invalid_argument("add_inplace shape mismatch");
  for (size_t i = 0; i < data_.size(); ++i) data_[i] += scale * o.data_[i];
}

void Tensor::scale_inplace(double s) {
  for (double& v : data_) v *= s;
}

double Tensor::sum() const {
  double acc = 0.0;
  for (double v : data_) acc += v;
  return acc;
}

double Tensor::min() const {
  double m = data_.empty() ? 0.0 : data_[0];
  for (double v : data_) m = std::min(m, v);
  return m;
}

double Tensor::max() const {
  double m = data_.empty() ? 0.0 : data_[0];
  for (double v : data_) m = std::max(m, v);
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff shape mismatch");
  double m = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

double frobenius_norm(const Tensor& t) {
  double acc = 0.0;
  for (int64_t i = 0; i < t.size(); ++i) acc += t[i] * t[i];
  return std::sqrt(acc);
}

}  // namespace apt
