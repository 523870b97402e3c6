#pragma once

#include "apt/autodiff.hpp"
#include "apt/rng.hpp"
#include "apt/tensor.hpp"

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace apt {

// Named trainable parameters with deterministic (insertion) ordering.
class ParamStore {
 public:
  VarPtr add(const std::string& name, Tensor init);
  VarPtr get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::pair<std::string, VarPtr>>& items() const { return items_; }
  std::vector<VarPtr> vars() const;
  std::vector<std::string> names() const;
  int64_t param_count() const;
  void zero_grad();
  void freeze();  // parameters stop requesting gradients
  void unfreeze();
  ParamStore clone() const;  // deep copy, no shared storage
  void copy_values_from(const ParamStore& other);  // strict name/shape match

 private:
  std::vector<std::pair<std::string, VarPtr>> items_;
  std::unordered_map<std::string, size_t> index_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<VarPtr> params, AdamConfig cfg);
  void step();
  void zero_grad();
  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }

 private:
  std::vector<VarPtr> params_;
  std::vector<Tensor> m_, v_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

// Initializers.
Tensor scaled_normal(Shape shape, double stddev, RandomStream& rs);
Tensor he_normal(Shape shape, int64_t fan_in, RandomStream& rs);

}  // namespace apt
