#include "apt/autodiff.hpp"

#include <Eigen/Core>

#include <cmath>
#include <unordered_set>

namespace apt {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

VarPtr constant(Tensor v) {
  auto n = std::make_shared<Var>();
  n->value = std::move(v);
  return n;
}

VarPtr leaf(Tensor v, bool requires_grad, std::string name) {
  auto n = std::make_shared<Var>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  n->name = std::move(name);
  return n;
}

static VarPtr make(Tensor value, std::vector<VarPtr> parents, std::function<void(Var&)> bp) {
  auto n = std::make_shared<Var>();
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backprop = std::move(bp);
  }
  return n;
}

void backward(const VarPtr& root) {
  if (root->value.size() != 1) throw std::logic_error("backward() root must be scalar");
  if (!root->requires_grad) return;

  // Iterative post-order DFS for topological order.
  std::vector<Var*> order;
  std::unordered_set<Var*> visited;
  std::vector<std::pair<Var*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Var* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Var* n = *it;
    if (n->backprop) {
      n->ensure_grad();
      n->backprop(*n);
    }
  }
}

static void check_same_shape(const VarPtr& a, const VarPtr& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a->value.shape()) +
                                " vs " + shape_str(b->value.shape()));
}

// ---------------------------------------------------------------- arithmetic

VarPtr add(const VarPtr& a, const VarPtr& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value;
  out.add_inplace(b->value);
  return make(std::move(out), {a, b}, [](Var& self) {
    for (int k = 0; k < 2; ++k) {
      auto& p = self.parents[k];
      if (p->requires_grad) p->accumulate(self.grad);
    }
  });
}

VarPtr sub(const VarPtr& a, const VarPtr& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value;
  out.add_inplace(b->value, -1.0);
  return make(std::move(out), {a, b}, [](Var& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
    auto& p = self.parents[1];
    if (p->requires_grad) {
      p->ensure_grad();
      p->grad.add_inplace(self.grad, -1.0);
    }
  });
}

VarPtr mul(const VarPtr& a, const VarPtr& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a->value.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
  return make(std::move(out), {a, b}, [](Var& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < self.grad.size(); ++i) b->grad[i] += self.grad[i] * a->value[i];
    }
  });
}

VarPtr scale(const VarPtr& a, double s) {
  Tensor out = a->value;
  out.scale_inplace(s);
  return make(std::move(out), {a}, [s](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad.add_inplace(self.grad, s);
  });
}

VarPtr add_scalar(const VarPtr& a, double s) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] += s;
  return make(std::move(out), {a}, [](Var& self) { self.parents[0]->accumulate(self.grad); });
}

VarPtr neg(const VarPtr& a) { return scale(a, -1.0); }

VarPtr scale_by(const VarPtr& x, const VarPtr& s) {
  if (s->value.size() != 1) throw std::invalid_argument("scale_by: scalar var expected");
  double sv = s->value[0];
  Tensor out = x->value;
  out.scale_inplace(sv);
  return make(std::move(out), {x, s}, [sv](Var& self) {
    auto& x = self.parents[0];
    auto& s = self.parents[1];
    if (x->requires_grad) {
      x->ensure_grad();
      x->grad.add_inplace(self.grad, sv);
    }
    if (s->requires_grad) {
      double acc = 0.0;
      for (int64_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * x->value[i];
      s->ensure_grad();
      s->grad[0] += acc;
    }
  });
}

// ---------------------------------------------------------------- reductions

VarPtr sum_all(const VarPtr& a) {
  Tensor out = Tensor::scalar(a->value.sum());
  return make(std::move(out), {a}, [](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    double g = self.grad[0];
    for (int64_t i = 0; i < p->grad.size(); ++i) p->grad[i] += g;
  });
}

VarPtr mean_all(const VarPtr& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a->value.size())); }

// ---------------------------------------------------------------- shape

VarPtr reshape(const VarPtr& a, Shape s) {
  Tensor out = a->value.reshaped(std::move(s));
  return make(std::move(out), {a}, [](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->accumulate(self.grad.reshaped(p->value.shape()));
  });
}

VarPtr concat_cols(const VarPtr& a, const VarPtr& b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.dim(0) != b->value.dim(0))
    throw std::invalid_argument("concat_cols: expects (B,A) and (B,C)");
  int B = a->value.dim(0), A = a->value.dim(1), C = b->value.dim(1);
  Tensor out({B, A + C});
  for (int i = 0; i < B; ++i) {
    for (int j = 0; j < A; ++j) out[i * (A + C) + j] = a->value[i * A + j];
    for (int j = 0; j < C; ++j) out[i * (A + C) + A + j] = b->value[i * C + j];
  }
  return make(std::move(out), {a, b}, [B, A, C](Var& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    if (a->requires_grad) {
      a->ensure_grad();
      for (int i = 0; i < B; ++i)
        for (int j = 0; j < A; ++j) a->grad[i * A + j] += self.grad[i * (A + C) + j];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int i = 0; i < B; ++i)
        for (int j = 0; j < C; ++j) b->grad[i * C + j] += self.grad[i * (A + C) + A + j];
    }
  });
}

VarPtr row_slice(const VarPtr& a, int row) {
  if (a->value.ndim() != 2) throw std::invalid_argument("row_slice: expects 2-d");
  int R = a->value.dim(0), C = a->value.dim(1);
  if (row < 0 || row >= R) throw std::out_of_range("row_slice");
  Tensor out({1, C});
  for (int j = 0; j < C; ++j) out[j] = a->value[row * C + j];
  return make(std::move(out), {a}, [row, C](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int j = 0; j < C; ++j) p->grad[row * C + j] += self.grad[j];
  });
}

VarPtr crop_center(const VarPtr& x, int oh, int ow) {
  if (x->value.ndim() != 4) throw std::invalid_argument("crop_center: expects (B,C,H,W)");
  int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  if (oh > H || ow > W) throw std::invalid_argument("crop_center: output larger than input");
  int t = (H - oh) / 2, l = (W - ow) / 2;
  Tensor out({B, C, oh, ow});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j)
          out[((static_cast<int64_t>(b) * C + c) * oh + i) * ow + j] =
              x->value[((static_cast<int64_t>(b) * C + c) * H + (i + t)) * W + (j + l)];
  return make(std::move(out), {x}, [B, C, H, W, oh, ow, t, l](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j)
            p->grad[((static_cast<int64_t>(b) * C + c) * H + (i + t)) * W + (j + l)] +=
                self.grad[((static_cast<int64_t>(b) * C + c) * oh + i) * ow + j];
  });
}

VarPtr pick(const VarPtr& a, int64_t flat_index) {
  if (flat_index < 0 || flat_index >= a->value.size()) throw std::out_of_range("pick");
  Tensor out = Tensor::scalar(a->value[flat_index]);
  return make(std::move(out), {a}, [flat_index](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad[flat_index] += self.grad[0];
  });
}

VarPtr tile_batch(const VarPtr& x, int batch) {
  if (x->value.ndim() != 4 || x->value.dim(0) != 1)
    throw std::invalid_argument("tile_batch: expects (1,C,H,W)");
  if (batch <= 0) throw std::invalid_argument("tile_batch: batch must be positive");
  int64_t plane = x->value.size();
  Shape s = x->value.shape();
  s[0] = batch;
  Tensor out(s);
  for (int b = 0; b < batch; ++b)
    for (int64_t i = 0; i < plane; ++i) out[b * plane + i] = x->value[i];
  return make(std::move(out), {x}, [batch, plane](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int b = 0; b < batch; ++b)
      for (int64_t i = 0; i < plane; ++i) p->grad[i] += self.grad[b * plane + i];
  });
}

// ---------------------------------------------------------------- linalg

// C (M,N) += A (M,K) * B (K,N), all row-major. Genuine matrix-matrix shapes go
// through Eigen's packed GEMM, which accumulates in a layout-independent order.
// Vector-shaped products would hit the gemv kernel instead, whose packet
// peeling depends on runtime pointer alignment and so can drift in the last
// ulp between allocations; those run fixed-order scalar loops.
static void gemm_acc(const double* A, const double* B, double* C, int M, int K, int N) {
  if (M > 1 && N > 1) {
    CMatMap am(A, M, K);
    CMatMap bm(B, K, N);
    MatMap cm(C, M, N);
    cm.noalias() += am * bm;
    return;
  }
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) {
      double acc = 0.0;
      for (int k = 0; k < K; ++k)
        acc += A[static_cast<int64_t>(i) * K + k] * B[static_cast<int64_t>(k) * N + j];
      C[static_cast<int64_t>(i) * N + j] += acc;
    }
}

// Same contract with B transposed: C (M,N) += A (M,K) * B^T, B stored (N,K).
static void gemm_acc_bt(const double* A, const double* B, double* C, int M, int K, int N) {
  if (M > 1 && N > 1) {
    CMatMap am(A, M, K);
    CMatMap bm(B, N, K);
    MatMap cm(C, M, N);
    cm.noalias() += am * bm.transpose();
    return;
  }
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) {
      double acc = 0.0;
      for (int k = 0; k < K; ++k)
        acc += A[static_cast<int64_t>(i) * K + k] * B[static_cast<int64_t>(j) * K + k];
      C[static_cast<int64_t>(i) * N + j] += acc;
    }
}

// And with A transposed: C (M,N) += A^T * B, A stored (K,M).
static void gemm_acc_at(const double* A, const double* B, double* C, int M, int K, int N) {
  if (M > 1 && N > 1) {
    CMatMap am(A, K, M);
    CMatMap bm(B, K, N);
    MatMap cm(C, M, N);
    cm.noalias() += am.transpose() * bm;
    return;
  }
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) {
      double acc = 0.0;
      for (int k = 0; k < K; ++k)
        acc += A[static_cast<int64_t>(k) * M + i] * B[static_cast<int64_t>(k) * N + j];
      C[static_cast<int64_t>(i) * N + j] += acc;
    }
}

VarPtr matmul(const VarPtr& a, const VarPtr& b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.dim(1) != b->value.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes");
  int M = a->value.dim(0), K = a->value.dim(1), N = b->value.dim(1);
  Tensor out({M, N});
  gemm_acc(a->value.data(), b->value.data(), out.data(), M, K, N);
  return make(std::move(out), {a, b}, [M, K, N](Var& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    if (a->requires_grad) {
      a->ensure_grad();
      gemm_acc_bt(self.grad.data(), b->value.data(), a->grad.data(), M, N, K);
    }
    if (b->requires_grad) {
      b->ensure_grad();
      gemm_acc_at(a->value.data(), self.grad.data(), b->grad.data(), K, M, N);
    }
  });
}

VarPtr linear(const VarPtr& x, const VarPtr& w, const VarPtr& b) {
  if (x->value.ndim() != 2 || w->value.ndim() != 2 || x->value.dim(1) != w->value.dim(1))
    throw std::invalid_argument("linear: expects x(B,I), w(O,I)");
  int B = x->value.dim(0), I = x->value.dim(1), O = w->value.dim(0);
  if (b && b->value.size() != O) throw std::invalid_argument("linear: bias size");
  Tensor out({B, O});
  // Fixed-order per-row dot products: results are identical for any batch
  // size and independent of buffer alignment (layers here are small enough
  // that the packed-GEMM speedup would not matter).
  for (int r = 0; r < B; ++r) {
    const double* xr = x->value.data() + static_cast<int64_t>(r) * I;
    double* ov = out.data() + static_cast<int64_t>(r) * O;
    for (int o = 0; o < O; ++o) {
      const double* wr = w->value.data() + static_cast<int64_t>(o) * I;
      double acc = b ? b->value[o] : 0.0;
      for (int i = 0; i < I; ++i) acc += wr[i] * xr[i];
      ov[o] = acc;
    }
  }
  std::vector<VarPtr> parents = b ? std::vector<VarPtr>{x, w, b} : std::vector<VarPtr>{x, w};
  return make(std::move(out), std::move(parents), [B, I, O](Var& self) {
    auto& x = self.parents[0];
    auto& w = self.parents[1];
    if (x->requires_grad) {
      x->ensure_grad();
      for (int r = 0; r < B; ++r) {
        const double* gr = self.grad.data() + static_cast<int64_t>(r) * O;
        double* gx = x->grad.data() + static_cast<int64_t>(r) * I;
        for (int o = 0; o < O; ++o) {
          const double g = gr[o];
          const double* wr = w->value.data() + static_cast<int64_t>(o) * I;
          for (int i = 0; i < I; ++i) gx[i] += g * wr[i];
        }
      }
    }
    if (w->requires_grad) {
      w->ensure_grad();
      for (int r = 0; r < B; ++r) {
        const double* gr = self.grad.data() + static_cast<int64_t>(r) * O;
        const double* xr = x->value.data() + static_cast<int64_t>(r) * I;
        for (int o = 0; o < O; ++o) {
          const double g = gr[o];
          double* gw = w->grad.data() + static_cast<int64_t>(o) * I;
          for (int i = 0; i < I; ++i) gw[i] += g * xr[i];
        }
      }
    }
    if (self.parents.size() == 3 && self.parents[2]->requires_grad) {
      auto& b = self.parents[2];
      b->ensure_grad();
      for (int r = 0; r < B; ++r)
        for (int o = 0; o < O; ++o) b->grad[o] += self.grad[static_cast<int64_t>(r) * O + o];
    }
  });
}

// ---------------------------------------------------------------- conv stack

namespace {

struct ConvDims {
  int B, C, H, W, O, KH, KW, OH, OW, stride, pad;
};

void im2col(const Tensor& x, const ConvDims& d, Tensor& col) {
  const int CKK = d.C * d.KH * d.KW;
  const int NCOL = d.B * d.OH * d.OW;
  const double* xp = x.data();
  double* cp = col.data();
  for (int c = 0; c < d.C; ++c) {
    for (int ki = 0; ki < d.KH; ++ki) {
      for (int kj = 0; kj < d.KW; ++kj) {
        const int r = (c * d.KH + ki) * d.KW + kj;
        double* row = cp + static_cast<int64_t>(r) * NCOL;
        for (int b = 0; b < d.B; ++b) {
          const double* xc = xp + (static_cast<int64_t>(b) * d.C + c) * d.H * d.W;
          for (int oh = 0; oh < d.OH; ++oh) {
            const int ih = oh * d.stride + ki - d.pad;
            double* dst = row + (static_cast<int64_t>(b) * d.OH + oh) * d.OW;
            if (ih < 0 || ih >= d.H) {
              std::fill(dst, dst + d.OW, 0.0);
              continue;
            }
            const double* src = xc + static_cast<int64_t>(ih) * d.W;
            for (int ow = 0; ow < d.OW; ++ow) {
              const int iw = ow * d.stride + kj - d.pad;
              dst[ow] = (iw < 0 || iw >= d.W) ? 0.0 : src[iw];
            }
          }
        }
      }
    }
  }
  (void)CKK;
}

void col2im_accum(const Tensor& col, const ConvDims& d, Tensor& dx) {
  const int NCOL = d.B * d.OH * d.OW;
  const double* cp = col.data();
  double* xp = dx.data();
  for (int c = 0; c < d.C; ++c) {
    for (int ki = 0; ki < d.KH; ++ki) {
      for (int kj = 0; kj < d.KW; ++kj) {
        const int r = (c * d.KH + ki) * d.KW + kj;
        const double* row = cp + static_cast<int64_t>(r) * NCOL;
        for (int b = 0; b < d.B; ++b) {
          double* xc = xp + (static_cast<int64_t>(b) * d.C + c) * d.H * d.W;
          for (int oh = 0; oh < d.OH; ++oh) {
            const int ih = oh * d.stride + ki - d.pad;
            if (ih < 0 || ih >= d.H) continue;
            const double* src = row + (static_cast<int64_t>(b) * d.OH + oh) * d.OW;
            double* dst = xc + static_cast<int64_t>(ih) * d.W;
            for (int ow = 0; ow < d.OW; ++ow) {
              const int iw = ow * d.stride + kj - d.pad;
              if (iw >= 0 && iw < d.W) dst[iw] += src[ow];
            }
          }
        }
      }
    }
  }
}

}  // namespace

VarPtr conv2d(const VarPtr& x, const VarPtr& w, const VarPtr& b, int stride, int pad) {
  if (x->value.ndim() != 4 || w->value.ndim() != 4)
    throw std::invalid_argument("conv2d: expects x(B,C,H,W), w(O,C,KH,KW)");
  ConvDims d;
  d.B = x->value.dim(0);
  d.C = x->value.dim(1);
  d.H = x->value.dim(2);
  d.W = x->value.dim(3);
  d.O = w->value.dim(0);
  d.KH = w->value.dim(2);
  d.KW = w->value.dim(3);
  d.stride = stride;
  d.pad = pad;
  if (w->value.dim(1) != d.C) throw std::invalid_argument("conv2d: channel mismatch");
  d.OH = (d.H + 2 * pad - d.KH) / stride + 1;
  d.OW = (d.W + 2 * pad - d.KW) / stride + 1;
  if (d.OH <= 0 || d.OW <= 0) throw std::invalid_argument("conv2d: empty output");
  if (b && b->value.size() != d.O) throw std::invalid_argument("conv2d: bias size");

  const int CKK = d.C * d.KH * d.KW;
  const int NCOL = d.B * d.OH * d.OW;
  auto col = std::make_shared<Tensor>(Shape{CKK, NCOL});
  im2col(x->value, d, *col);

  Tensor ymat({d.O, NCOL});
  {
    CMatMap wm(w->value.data(), d.O, CKK);
    CMatMap cm(col->data(), CKK, NCOL);
    MatMap ym(ymat.data(), d.O, NCOL);
    ym.noalias() = wm * cm;
  }
  Tensor out({d.B, d.O, d.OH, d.OW});
  const int HW = d.OH * d.OW;
  for (int bi = 0; bi < d.B; ++bi)
    for (int o = 0; o < d.O; ++o) {
      const double* src = ymat.data() + static_cast<int64_t>(o) * NCOL + static_cast<int64_t>(bi) * HW;
      double* dst = out.data() + (static_cast<int64_t>(bi) * d.O + o) * HW;
      const double bias = b ? b->value[o] : 0.0;
      for (int k = 0; k < HW; ++k) dst[k] = src[k] + bias;
    }

  std::vector<VarPtr> parents = b ? std::vector<VarPtr>{x, w, b} : std::vector<VarPtr>{x, w};
  return make(std::move(out), std::move(parents), [d, col](Var& self) {
    const int CKK = d.C * d.KH * d.KW;
    const int NCOL = d.B * d.OH * d.OW;
    const int HW = d.OH * d.OW;
    auto& x = self.parents[0];
    auto& w = self.parents[1];

    Tensor gymat({d.O, NCOL});
    for (int bi = 0; bi < d.B; ++bi)
      for (int o = 0; o < d.O; ++o) {
        const double* src = self.grad.data() + (static_cast<int64_t>(bi) * d.O + o) * HW;
        double* dst = gymat.data() + static_cast<int64_t>(o) * NCOL + static_cast<int64_t>(bi) * HW;
        for (int k = 0; k < HW; ++k) dst[k] = src[k];
      }

    if (w->requires_grad) {
      w->ensure_grad();
      MatMap gw(w->grad.data(), d.O, CKK);
      CMatMap gym(gymat.data(), d.O, NCOL);
      CMatMap cm(col->data(), CKK, NCOL);
      gw.noalias() += gym * cm.transpose();
    }
    if (self.parents.size() == 3 && self.parents[2]->requires_grad) {
      auto& bias = self.parents[2];
      bias->ensure_grad();
      for (int o = 0; o < d.O; ++o) {
        double acc = 0.0;
        const double* src = gymat.data() + static_cast<int64_t>(o) * NCOL;
        for (int k = 0; k < NCOL; ++k) acc += src[k];
        bias->grad[o] += acc;
      }
    }
    if (x->requires_grad) {
      x->ensure_grad();
      Tensor gcol({CKK, NCOL});
      CMatMap wm(w->value.data(), d.O, CKK);
      CMatMap gym(gymat.data(), d.O, NCOL);
      MatMap gcm(gcol.data(), CKK, NCOL);
      gcm.noalias() = wm.transpose() * gym;
      col2im_accum(gcol, d, x->grad);
    }
  });
}

VarPtr upsample2(const VarPtr& x) {
  if (x->value.ndim() != 4) throw std::invalid_argument("upsample2: expects (B,C,H,W)");
  int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  Tensor out({B, C, 2 * H, 2 * W});
  for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
    const double* src = x->value.data() + bc * H * W;
    double* dst = out.data() + bc * 4 * H * W;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        double v = src[i * W + j];
        int64_t o = (static_cast<int64_t>(2 * i) * 2 * W) + 2 * j;
        dst[o] = v;
        dst[o + 1] = v;
        dst[o + 2 * W] = v;
        dst[o + 2 * W + 1] = v;
      }
  }
  return make(std::move(out), {x}, [B, C, H, W](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
      double* dst = p->grad.data() + bc * H * W;
      const double* src = self.grad.data() + bc * 4 * H * W;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          int64_t o = (static_cast<int64_t>(2 * i) * 2 * W) + 2 * j;
          dst[i * W + j] += src[o] + src[o + 1] + src[o + 2 * W] + src[o + 2 * W + 1];
        }
    }
  });
}

VarPtr avgpool2(const VarPtr& x) {
  if (x->value.ndim() != 4) throw std::invalid_argument("avgpool2: expects (B,C,H,W)");
  int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  if (H % 2 || W % 2) throw std::invalid_argument("avgpool2: odd spatial size");
  int OH = H / 2, OW = W / 2;
  Tensor out({B, C, OH, OW});
  for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
    const double* src = x->value.data() + bc * H * W;
    double* dst = out.data() + bc * OH * OW;
    for (int i = 0; i < OH; ++i)
      for (int j = 0; j < OW; ++j) {
        const double* s = src + static_cast<int64_t>(2 * i) * W + 2 * j;
        dst[i * OW + j] = 0.25 * (s[0] + s[1] + s[W] + s[W + 1]);
      }
  }
  return make(std::move(out), {x}, [B, C, H, W, OH, OW](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
      double* dst = p->grad.data() + bc * H * W;
      const double* src = self.grad.data() + bc * OH * OW;
      for (int i = 0; i < OH; ++i)
        for (int j = 0; j < OW; ++j) {
          double g = 0.25 * src[i * OW + j];
          double* s = dst + static_cast<int64_t>(2 * i) * W + 2 * j;
          s[0] += g;
          s[1] += g;
          s[W] += g;
          s[W + 1] += g;
        }
    }
  });
}

VarPtr global_avgpool(const VarPtr& x) {
  if (x->value.ndim() != 4) throw std::invalid_argument("global_avgpool: expects (B,C,H,W)");
  int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  int HW = H * W;
  Tensor out({B, C});
  for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
    const double* src = x->value.data() + bc * HW;
    double acc = 0.0;
    for (int k = 0; k < HW; ++k) acc += src[k];
    out[bc] = acc / HW;
  }
  return make(std::move(out), {x}, [B, C, HW](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
      double g = self.grad[bc] / HW;
      double* dst = p->grad.data() + bc * HW;
      for (int k = 0; k < HW; ++k) dst[k] += g;
    }
  });
}

VarPtr roll2d(const VarPtr& x, int sh, int sw) {
  if (x->value.ndim() < 2) throw std::invalid_argument("roll2d: needs >= 2 dims");
  int W = x->value.dim(x->value.ndim() - 1);
  int H = x->value.dim(x->value.ndim() - 2);
  int64_t planes = x->value.size() / (static_cast<int64_t>(H) * W);
  auto wrap = [](int v, int n) { return ((v % n) + n) % n; };
  Tensor out(x->value.shape());
  for (int64_t p = 0; p < planes; ++p) {
    const double* src = x->value.data() + p * H * W;
    double* dst = out.data() + p * H * W;
    for (int i = 0; i < H; ++i) {
      int si = wrap(i - sh, H);
      for (int j = 0; j < W; ++j) dst[i * W + j] = src[si * W + wrap(j - sw, W)];
    }
  }
  return make(std::move(out), {x}, [planes, H, W, sh, sw, wrap](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t pl = 0; pl < planes; ++pl) {
      double* dst = p->grad.data() + pl * H * W;
      const double* src = self.grad.data() + pl * H * W;
      for (int i = 0; i < H; ++i) {
        int si = wrap(i - sh, H);
        for (int j = 0; j < W; ++j) dst[si * W + wrap(j - sw, W)] += src[i * W + j];
      }
    }
  });
}

// ---------------------------------------------------------------- broadcast

VarPtr mul_channels(const VarPtr& x, const VarPtr& s) {
  if (x->value.ndim() != 4 || s->value.ndim() != 2 || s->value.dim(0) != x->value.dim(0) ||
      s->value.dim(1) != x->value.dim(1))
    throw std::invalid_argument("mul_channels: expects x(B,C,H,W), s(B,C)");
  int B = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  Tensor out(x->value.shape());
  for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
    double sv = s->value[bc];
    const double* src = x->value.data() + bc * HW;
    double* dst = out.data() + bc * HW;
    for (int k = 0; k < HW; ++k) dst[k] = src[k] * sv;
  }
  return make(std::move(out), {x, s}, [B, C, HW](Var& self) {
    auto& x = self.parents[0];
    auto& s = self.parents[1];
    if (x->requires_grad) {
      x->ensure_grad();
      for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
        double sv = s->value[bc];
        const double* g = self.grad.data() + bc * HW;
        double* dst = x->grad.data() + bc * HW;
        for (int k = 0; k < HW; ++k) dst[k] += g[k] * sv;
      }
    }
    if (s->requires_grad) {
      s->ensure_grad();
      for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
        const double* g = self.grad.data() + bc * HW;
        const double* xv = x->value.data() + bc * HW;
        double acc = 0.0;
        for (int k = 0; k < HW; ++k) acc += g[k] * xv[k];
        s->grad[bc] += acc;
      }
    }
  });
}

VarPtr add_channels(const VarPtr& x, const VarPtr& b) {
  if (x->value.ndim() != 4 || b->value.size() != x->value.dim(1))
    throw std::invalid_argument("add_channels: expects x(B,C,H,W), b(C)");
  int B = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  Tensor out = x->value;
  for (int bi = 0; bi < B; ++bi)
    for (int c = 0; c < C; ++c) {
      double bv = b->value[c];
      double* dst = out.data() + (static_cast<int64_t>(bi) * C + c) * HW;
      for (int k = 0; k < HW; ++k) dst[k] += bv;
    }
  return make(std::move(out), {x, b}, [B, C, HW](Var& self) {
    auto& x = self.parents[0];
    auto& b = self.parents[1];
    if (x->requires_grad) x->accumulate(self.grad);
    if (b->requires_grad) {
      b->ensure_grad();
      for (int bi = 0; bi < B; ++bi)
        for (int c = 0; c < C; ++c) {
          const double* g = self.grad.data() + (static_cast<int64_t>(bi) * C + c) * HW;
          double acc = 0.0;
          for (int k = 0; k < HW; ++k) acc += g[k];
          b->grad[c] += acc;
        }
    }
  });
}

VarPtr add_hw(const VarPtr& x, const VarPtr& n) {
  if (x->value.ndim() != 4 || n->value.ndim() != 4 || n->value.dim(1) != 1 ||
      n->value.dim(2) != x->value.dim(2) || n->value.dim(3) != x->value.dim(3) ||
      (n->value.dim(0) != x->value.dim(0) && n->value.dim(0) != 1))
    throw std::invalid_argument("add_hw: expects x(B,C,H,W), n(B|1,1,H,W)");
  int B = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  bool bshared = n->value.dim(0) == 1;
  Tensor out = x->value;
  for (int bi = 0; bi < B; ++bi) {
    const double* nv = n->value.data() + (bshared ? 0 : static_cast<int64_t>(bi) * HW);
    for (int c = 0; c < C; ++c) {
      double* dst = out.data() + (static_cast<int64_t>(bi) * C + c) * HW;
      for (int k = 0; k < HW; ++k) dst[k] += nv[k];
    }
  }
  return make(std::move(out), {x, n}, [B, C, HW, bshared](Var& self) {
    auto& x = self.parents[0];
    auto& n = self.parents[1];
    if (x->requires_grad) x->accumulate(self.grad);
    if (n->requires_grad) {
      n->ensure_grad();
      for (int bi = 0; bi < B; ++bi) {
        double* dst = n->grad.data() + (bshared ? 0 : static_cast<int64_t>(bi) * HW);
        for (int c = 0; c < C; ++c) {
          const double* g = self.grad.data() + (static_cast<int64_t>(bi) * C + c) * HW;
          for (int k = 0; k < HW; ++k) dst[k] += g[k];
        }
      }
    }
  });
}

VarPtr normalize_channels_const(const VarPtr& x, const Tensor& mean, const Tensor& stddev) {
  if (x->value.ndim() != 4 || mean.size() != x->value.dim(1) || stddev.size() != x->value.dim(1))
    throw std::invalid_argument("normalize_channels_const: shape mismatch");
  int B = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  for (int c = 0; c < C; ++c)
    if (stddev[c] <= 0) throw std::invalid_argument("normalize_channels_const: nonpositive stddev");
  Tensor out(x->value.shape());
  for (int bi = 0; bi < B; ++bi)
    for (int c = 0; c < C; ++c) {
      double m = mean[c], inv = 1.0 / stddev[c];
      const double* src = x->value.data() + (static_cast<int64_t>(bi) * C + c) * HW;
      double* dst = out.data() + (static_cast<int64_t>(bi) * C + c) * HW;
      for (int k = 0; k < HW; ++k) dst[k] = (src[k] - m) * inv;
    }
  Tensor sd = stddev;
  return make(std::move(out), {x}, [B, C, HW, sd](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int bi = 0; bi < B; ++bi)
      for (int c = 0; c < C; ++c) {
        double inv = 1.0 / sd[c];
        const double* g = self.grad.data() + (static_cast<int64_t>(bi) * C + c) * HW;
        double* dst = p->grad.data() + (static_cast<int64_t>(bi) * C + c) * HW;
        for (int k = 0; k < HW; ++k) dst[k] += g[k] * inv;
      }
  });
}

VarPtr unit_normalize_channels(const VarPtr& x, double eps) {
  if (x->value.ndim() != 4) throw std::invalid_argument("unit_normalize_channels: expects (B,C,H,W)");
  int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  int HW = H * W;
  Tensor out(x->value.shape());
  auto rinv = std::make_shared<Tensor>(Shape{B, H, W});
  for (int bi = 0; bi < B; ++bi)
    for (int k = 0; k < HW; ++k) {
      double s = 0.0;
      for (int c = 0; c < C; ++c) {
        double v = x->value[(static_cast<int64_t>(bi) * C + c) * HW + k];
        s += v * v;
      }
      double ri = 1.0 / std::sqrt(s + eps);
      (*rinv)[static_cast<int64_t>(bi) * HW + k] = ri;
      for (int c = 0; c < C; ++c) {
        int64_t idx = (static_cast<int64_t>(bi) * C + c) * HW + k;
        out[idx] = x->value[idx] * ri;
      }
    }
  Tensor outcopy = out;  // backward needs y values
  auto ycache = std::make_shared<Tensor>(std::move(outcopy));
  return make(std::move(out), {x}, [B, C, HW, rinv, ycache](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    const Tensor& y = *ycache;
    for (int bi = 0; bi < B; ++bi)
      for (int k = 0; k < HW; ++k) {
        double ri = (*rinv)[static_cast<int64_t>(bi) * HW + k];
        double dot = 0.0;
        for (int c = 0; c < C; ++c) {
          int64_t idx = (static_cast<int64_t>(bi) * C + c) * HW + k;
          dot += self.grad[idx] * y[idx];
        }
        for (int c = 0; c < C; ++c) {
          int64_t idx = (static_cast<int64_t>(bi) * C + c) * HW + k;
          p->grad[idx] += ri * (self.grad[idx] - y[idx] * dot);
        }
      }
  });
}

// ---------------------------------------------------------------- activations

VarPtr leaky_relu(const VarPtr& x, double slope) {
  Tensor out(x->value.shape());
  for (int64_t i = 0; i < out.size(); ++i) {
    double v = x->value[i];
    out[i] = v > 0 ? v : slope * v;
  }
  return make(std::move(out), {x}, [slope](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.grad.size(); ++i)
      p->grad[i] += self.grad[i] * (p->value[i] > 0 ? 1.0 : slope);
  });
}

VarPtr tanh_act(const VarPtr& x) {
  Tensor out(x->value.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x->value[i]);
  auto ycache = std::make_shared<Tensor>(out);
  return make(std::move(out), {x}, [ycache](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.grad.size(); ++i) {
      double y = (*ycache)[i];
      p->grad[i] += self.grad[i] * (1.0 - y * y);
    }
  });
}

VarPtr sigmoid_act(const VarPtr& x) {
  Tensor out(x->value.shape());
  for (int64_t i = 0; i < out.size(); ++i) {
    double v = x->value[i];
    out[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  auto ycache = std::make_shared<Tensor>(out);
  return make(std::move(out), {x}, [ycache](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.grad.size(); ++i) {
      double y = (*ycache)[i];
      p->grad[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

VarPtr softplus(const VarPtr& x) {
  Tensor out(x->value.shape());
  for (int64_t i = 0; i < out.size(); ++i) {
    double v = x->value[i];
    out[i] = v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  }
  return make(std::move(out), {x}, [](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.grad.size(); ++i) {
      double v = p->value[i];
      double sig = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      p->grad[i] += self.grad[i] * sig;
    }
  });
}

VarPtr log_clamped(const VarPtr& x, double eps) {
  Tensor out(x->value.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(x->value[i], eps));
  return make(std::move(out), {x}, [eps](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.grad.size(); ++i)
      p->grad[i] += self.grad[i] / std::max(p->value[i], eps);
  });
}

VarPtr softmax_rows(const VarPtr& logits) {
  if (logits->value.ndim() != 2) throw std::invalid_argument("softmax_rows: expects (B,K)");
  int B = logits->value.dim(0), K = logits->value.dim(1);
  Tensor out({B, K});
  for (int b = 0; b < B; ++b) {
    const double* row = logits->value.data() + static_cast<int64_t>(b) * K;
    double mx = row[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double denom = 0.0;
    double* orow = out.data() + static_cast<int64_t>(b) * K;
    for (int k = 0; k < K; ++k) {
      orow[k] = std::exp(row[k] - mx);
      denom += orow[k];
    }
    for (int k = 0; k < K; ++k) orow[k] /= denom;
  }
  auto ycache = std::make_shared<Tensor>(out);
  return make(std::move(out), {logits}, [B, K, ycache](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int b = 0; b < B; ++b) {
      const double* y = ycache->data() + static_cast<int64_t>(b) * K;
      const double* g = self.grad.data() + static_cast<int64_t>(b) * K;
      double dot = 0.0;
      for (int k = 0; k < K; ++k) dot += y[k] * g[k];
      double* dst = p->grad.data() + static_cast<int64_t>(b) * K;
      for (int k = 0; k < K; ++k) dst[k] += y[k] * (g[k] - dot);
    }
  });
}

VarPtr cross_entropy(const VarPtr& logits, const std::vector<int>& labels) {
  if (logits->value.ndim() != 2) throw std::invalid_argument("cross_entropy: expects (B,K)");
  int B = logits->value.dim(0), K = logits->value.dim(1);
  if (static_cast<int>(labels.size()) != B) throw std::invalid_argument("cross_entropy: label count");
  for (int l : labels)
    if (l < 0 || l >= K) throw std::invalid_argument("cross_entropy: label out of range");
  auto probs = std::make_shared<Tensor>(Shape{B, K});
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    const double* row = logits->value.data() + static_cast<int64_t>(b) * K;
    double mx = row[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double denom = 0.0;
    for (int k = 0; k < K; ++k) denom += std::exp(row[k] - mx);
    double logz = mx + std::log(denom);
    loss += logz - row[labels[b]];
    double* prow = probs->data() + static_cast<int64_t>(b) * K;
    for (int k = 0; k < K; ++k) prow[k] = std::exp(row[k] - logz);
  }
  loss /= B;
  std::vector<int> labels_copy = labels;
  return make(Tensor::scalar(loss), {logits}, [B, K, probs, labels_copy](Var& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    double g = self.grad[0] / B;
    for (int b = 0; b < B; ++b) {
      const double* prow = probs->data() + static_cast<int64_t>(b) * K;
      double* dst = p->grad.data() + static_cast<int64_t>(b) * K;
      for (int k = 0; k < K; ++k) dst[k] += g * (prow[k] - (k == labels_copy[b] ? 1.0 : 0.0));
    }
  });
}

}  // namespace apt
