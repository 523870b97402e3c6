#include "apt/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace apt {

VarPtr ParamStore::add(const std::string& name, Tensor init) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
  auto v = leaf(std::move(init), true, name);
  index_[name] = items_.size();
  items_.emplace_back(name, v);
  return v;
}

VarPtr ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return items_[it->second].second;
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) > 0; }

std::vector<VarPtr> ParamStore::vars() const {
  std::vector<VarPtr> out;
  out.reserve(items_.size());
  for (const auto& [_, v] : items_) out.push_back(v);
  return out;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(items_.size());
  for (const auto& [n, _] : items_) out.push_back(n);
  return out;
}

int64_t ParamStore::param_count() const {
  int64_t n = 0;
  for (const auto& [_, v] : items_) n += v->value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, v] : items_) v->zero_grad();
}

void ParamStore::freeze() {
  for (auto& [_, v] : items_) v->requires_grad = false;
}

void ParamStore::unfreeze() {
  for (auto& [_, v] : items_) v->requires_grad = true;
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [n, v] : items_) {
    auto copy = out.add(n, v->value);
    copy->requires_grad = v->requires_grad;
  }
  return out;
}

void ParamStore::copy_values_from(const ParamStore& other) {
  if (other.items_.size() != items_.size())
    throw std::invalid_argument("copy_values_from: parameter count mismatch");
  for (const auto& [n, v] : other.items_) {
    auto mine = get(n);
    if (!mine->value.same_shape(v->value))
      throw std::invalid_argument("copy_values_from: shape mismatch for " + n);
    mine->value = v->value;
  }
}

Adam::Adam(std::vector<VarPtr> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p->grad.size() != p->value.size()) continue;  // untouched by backward
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (int64_t k = 0; k < p->value.size(); ++k) {
      double g = p->grad[k];
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g;
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g * g;
      double mhat = m[k] / bc1;
      double vhat = v[k] / bc2;
      p->value[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

Tensor scaled_normal(Shape shape, double stddev, RandomStream& rs) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = stddev * rs.normal();
  return t;
}

Tensor he_normal(Shape shape, int64_t fan_in, RandomStream& rs) {
  return scaled_normal(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)), rs);
}

}  // namespace apt
