#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "apt/tensor.hpp"

namespace apt {

// Reverse-mode autodiff over Tensor. Graphs are built per evaluation
// (define-by-run) and freed when the root goes out of scope.
struct Var;
using VarPtr = std::shared_ptr<Var>;

struct Var {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<VarPtr> parents;
  std::function<void(Var&)> backprop;
  std::string name;

  void ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor(value.shape());
  }
  void accumulate(const Tensor& g) {
    ensure_grad();
    grad.add_inplace(g);
  }
  void zero_grad() {
    if (grad.size() == value.size()) grad.fill(0.0);
  }
  double item() const { return value.item(); }
};

VarPtr constant(Tensor v);
VarPtr leaf(Tensor v, bool requires_grad = true, std::string name = {});

// Backpropagates from a scalar root through the graph.
void backward(const VarPtr& root);

// ---- elementwise / scalar ----
VarPtr add(const VarPtr& a, const VarPtr& b);
VarPtr sub(const VarPtr& a, const VarPtr& b);
VarPtr mul(const VarPtr& a, const VarPtr& b);
VarPtr scale(const VarPtr& a, double s);
VarPtr add_scalar(const VarPtr& a, double s);
VarPtr neg(const VarPtr& a);
VarPtr scale_by(const VarPtr& x, const VarPtr& s);  // s is a scalar var

// ---- reductions ----
VarPtr sum_all(const VarPtr& a);
VarPtr mean_all(const VarPtr& a);

// ---- shape ----
VarPtr reshape(const VarPtr& a, Shape s);
VarPtr concat_cols(const VarPtr& a, const VarPtr& b);  // (B,A)+(B,C) -> (B,A+C)
VarPtr row_slice(const VarPtr& a, int row);            // (R,C) -> (1,C)
VarPtr crop_center(const VarPtr& x, int oh, int ow);   // (B,C,H,W)
VarPtr pick(const VarPtr& a, int64_t flat_index);      // -> scalar
VarPtr tile_batch(const VarPtr& x, int batch);         // (1,C,H,W) -> (B,C,H,W)

// ---- linear algebra ----
VarPtr matmul(const VarPtr& a, const VarPtr& b);  // (M,K)x(K,N)
// Row-wise W*x + b so results are bitwise identical for any batch size.
VarPtr linear(const VarPtr& x, const VarPtr& w, const VarPtr& b);

// ---- conv stack ----
VarPtr conv2d(const VarPtr& x, const VarPtr& w, const VarPtr& b, int stride = 1, int pad = 1);
VarPtr upsample2(const VarPtr& x);        // nearest neighbour
VarPtr avgpool2(const VarPtr& x);
VarPtr global_avgpool(const VarPtr& x);   // (B,C,H,W) -> (B,C)
VarPtr roll2d(const VarPtr& x, int sh, int sw);  // circular shift over last two dims

// ---- broadcast helpers ----
VarPtr mul_channels(const VarPtr& x, const VarPtr& s);      // x(B,C,H,W) * s(B,C)
VarPtr add_channels(const VarPtr& x, const VarPtr& b);      // + b(C)
VarPtr add_hw(const VarPtr& x, const VarPtr& n);            // + n(B|1,1,H,W), broadcast over C
VarPtr normalize_channels_const(const VarPtr& x, const Tensor& mean, const Tensor& stddev);
VarPtr unit_normalize_channels(const VarPtr& x, double eps = 1e-10);

// ---- activations & friends ----
VarPtr leaky_relu(const VarPtr& x, double slope = 0.2);
VarPtr tanh_act(const VarPtr& x);
VarPtr sigmoid_act(const VarPtr& x);
VarPtr softplus(const VarPtr& x);  // log(1 + e^x), overflow-safe
VarPtr log_clamped(const VarPtr& x, double eps = 1e-12);
VarPtr softmax_rows(const VarPtr& logits);
// Mean cross entropy over the batch, computed from logits (numerically stable).
VarPtr cross_entropy(const VarPtr& logits, const std::vector<int>& labels);

}  // namespace apt
