#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "apt/autodiff.hpp"
#include "apt/rng.hpp"

#include <cmath>
#include <functional>

using namespace apt;

namespace {

Tensor rand_tensor(Shape shape, RandomStream& rs, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * rs.uniform();
  return t;
}

// Values bounded away from zero, random sign: safe for kinked activations.
Tensor rand_signed_margin(Shape shape, RandomStream& rs) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) {
    double mag = 0.5 + rs.uniform();
    t[i] = rs.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

// Central finite differences on every element of every leaf against autodiff.
void check_grads(const std::vector<VarPtr>& leaves, const std::function<VarPtr()>& f,
                 double h = 1e-5, double tol = 1e-6) {
  for (const auto& l : leaves) {
    l->zero_grad();
    REQUIRE(l->requires_grad);
  }
  auto root = f();
  REQUIRE(root->value.size() == 1);
  backward(root);
  for (const auto& leaf : leaves) {
    for (int64_t i = 0; i < leaf->value.size(); ++i) {
      double orig = leaf->value[i];
      leaf->value[i] = orig + h;
      double fp = f()->value.item();
      leaf->value[i] = orig - h;
      double fm = f()->value.item();
      leaf->value[i] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double ad = leaf->grad.size() == leaf->value.size() ? leaf->grad[i] : 0.0;
      double err = std::abs(ad - fd) / std::max(1.0, std::abs(fd));
      CHECK_MESSAGE(err <= tol, "leaf=", leaf->name, " idx=", i, " ad=", ad, " fd=", fd);
    }
  }
}

// Scalar root with a fixed random cotangent so gradients are non-trivial.
VarPtr weighted_sum(const VarPtr& x, uint64_t seed = 7) {
  RandomStream rs(seed);
  Tensor w = rand_tensor(x->value.shape(), rs, -1.0, 1.0);
  return sum_all(mul(x, constant(w)));
}

}  // namespace

TEST_CASE("backward requires scalar root") {
  auto x = leaf(Tensor::full({2}, 1.0), true, "x");
  auto y = scale(x, 2.0);
  CHECK_THROWS_AS(backward(y), std::logic_error);
}

TEST_CASE("grad accumulates through variable reuse") {
  auto x = leaf(Tensor::full({3}, 2.0), true, "x");
  auto y = sum_all(add(x, x));
  backward(y);
  for (int i = 0; i < 3; ++i) CHECK(x->grad[i] == doctest::Approx(2.0));

  x->zero_grad();
  auto z = sum_all(mul(x, x));
  backward(z);
  for (int i = 0; i < 3; ++i) CHECK(x->grad[i] == doctest::Approx(4.0));
}

TEST_CASE("constants receive no gradient") {
  auto c = constant(Tensor::full({2}, 3.0));
  auto x = leaf(Tensor::full({2}, 1.0), true, "x");
  auto y = sum_all(mul(x, c));
  backward(y);
  CHECK(c->grad.size() == 0);
  CHECK(x->grad[0] == doctest::Approx(3.0));
}

TEST_CASE("elementwise arithmetic gradients") {
  RandomStream rs(1);
  auto a = leaf(rand_tensor({2, 3}, rs), true, "a");
  auto b = leaf(rand_tensor({2, 3}, rs), true, "b");
  check_grads({a, b}, [&] {
    auto t = add(mul(a, b), scale(sub(a, b), 0.75));
    t = add_scalar(t, 0.5);
    t = neg(t);
    return mean_all(t);
  });
}

TEST_CASE("scale_by scalar variable gradients") {
  RandomStream rs(2);
  auto x = leaf(rand_tensor({4}, rs), true, "x");
  auto s = leaf(Tensor::scalar(0.8), true, "s");
  check_grads({x, s}, [&] { return weighted_sum(scale_by(x, s)); });
}

TEST_CASE("reshape and concat and slicing gradients") {
  RandomStream rs(3);
  auto a = leaf(rand_tensor({2, 3}, rs), true, "a");
  auto b = leaf(rand_tensor({2, 2}, rs), true, "b");
  check_grads({a, b}, [&] {
    auto c = concat_cols(a, b);          // (2,5)
    auto r = row_slice(c, 1);            // (1,5)
    auto f = reshape(r, {5});
    return weighted_sum(f);
  });
}

TEST_CASE("pick gradient") {
  RandomStream rs(4);
  auto a = leaf(rand_tensor({2, 3}, rs), true, "a");
  check_grads({a}, [&] { return pick(a, 4); });
}

TEST_CASE("crop_center values and gradients") {
  RandomStream rs(5);
  auto x = leaf(rand_tensor({1, 1, 4, 4}, rs), true, "x");
  auto c = crop_center(x, 2, 2);
  CHECK(c->value.dim(2) == 2);
  CHECK(c->value[0] == x->value[1 * 4 + 1]);
  CHECK(c->value[3] == x->value[2 * 4 + 2]);
  check_grads({x}, [&] { return weighted_sum(crop_center(x, 2, 2)); });
}

TEST_CASE("tile_batch values and gradients") {
  RandomStream rs(25);
  auto x = leaf(rand_tensor({1, 2, 2, 3}, rs), true, "x");
  auto y = tile_batch(x, 3);
  CHECK(y->value.dim(0) == 3);
  for (int b = 0; b < 3; ++b)
    for (int64_t i = 0; i < 12; ++i) CHECK(y->value[b * 12 + i] == x->value[i]);
  check_grads({x}, [&] { return weighted_sum(tile_batch(x, 3)); });
}

TEST_CASE("softplus values and gradients") {
  RandomStream rs(26);
  auto x = leaf(rand_tensor({2, 4}, rs, -3.0, 3.0), true, "x");
  auto y = softplus(x);
  for (int64_t i = 0; i < x->value.size(); ++i)
    CHECK(y->value[i] == doctest::Approx(std::log1p(std::exp(x->value[i]))).epsilon(1e-12));
  CHECK(std::isfinite(softplus(constant(Tensor::scalar(900.0)))->value.item()));
  CHECK(softplus(constant(Tensor::scalar(900.0)))->value.item() == doctest::Approx(900.0));
  check_grads({x}, [&] { return weighted_sum(softplus(x)); });
}

TEST_CASE("matmul values and gradients") {
  RandomStream rs(6);
  auto a = leaf(rand_tensor({3, 4}, rs), true, "a");
  auto b = leaf(rand_tensor({4, 2}, rs), true, "b");
  auto c = matmul(a, b);
  double manual = 0.0;
  for (int k = 0; k < 4; ++k) manual += a->value[1 * 4 + k] * b->value[k * 2 + 1];
  CHECK(c->value[1 * 2 + 1] == doctest::Approx(manual).epsilon(1e-12));
  check_grads({a, b}, [&] { return weighted_sum(matmul(a, b)); });
}

TEST_CASE("linear matches matmul plus bias and is row-consistent") {
  RandomStream rs(7);
  auto x = leaf(rand_tensor({3, 5}, rs), true, "x");
  auto w = leaf(rand_tensor({4, 5}, rs), true, "w");
  auto b = leaf(rand_tensor({4}, rs), true, "b");
  auto y = linear(x, w, b);
  CHECK(y->value.dim(0) == 3);
  CHECK(y->value.dim(1) == 4);

  // Each row computed in isolation must match the batch result bit-for-bit.
  for (int r = 0; r < 3; ++r) {
    Tensor xr({1, 5});
    for (int j = 0; j < 5; ++j) xr[j] = x->value[r * 5 + j];
    auto yr = linear(constant(xr), w, b);
    for (int o = 0; o < 4; ++o) CHECK(yr->value[o] == y->value[r * 4 + o]);
  }

  check_grads({x, w, b}, [&] { return weighted_sum(linear(x, w, b)); });

  auto nb = linear(x, w, nullptr);
  CHECK(nb->value.dim(1) == 4);
  check_grads({x, w}, [&] { return weighted_sum(linear(x, w, nullptr)); });
}

TEST_CASE("conv2d matches naive convolution") {
  RandomStream rs(8);
  int B = 2, C = 3, H = 5, W = 5, O = 4, K = 3, stride = 1, pad = 1;
  auto x = leaf(rand_tensor({B, C, H, W}, rs), true, "x");
  auto w = leaf(rand_tensor({O, C, K, K}, rs), true, "w");
  auto b = leaf(rand_tensor({O}, rs), true, "b");
  auto y = conv2d(x, w, b, stride, pad);
  int OH = (H + 2 * pad - K) / stride + 1;
  int OW = (W + 2 * pad - K) / stride + 1;
  REQUIRE(y->value.dim(2) == OH);
  for (int bi = 0; bi < B; ++bi)
    for (int o = 0; o < O; ++o)
      for (int i = 0; i < OH; ++i)
        for (int j = 0; j < OW; ++j) {
          double acc = b->value[o];
          for (int c = 0; c < C; ++c)
            for (int ki = 0; ki < K; ++ki)
              for (int kj = 0; kj < K; ++kj) {
                int ih = i * stride + ki - pad, iw = j * stride + kj - pad;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x->value[((int64_t(bi) * C + c) * H + ih) * W + iw] *
                       w->value[((int64_t(o) * C + c) * K + ki) * K + kj];
              }
          CHECK(y->value[((int64_t(bi) * O + o) * OH + i) * OW + j] ==
                doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("conv2d gradients stride 1") {
  RandomStream rs(9);
  auto x = leaf(rand_tensor({2, 2, 4, 4}, rs), true, "x");
  auto w = leaf(rand_tensor({3, 2, 3, 3}, rs), true, "w");
  auto b = leaf(rand_tensor({3}, rs), true, "b");
  check_grads({x, w, b}, [&] { return weighted_sum(conv2d(x, w, b, 1, 1)); });
}

TEST_CASE("conv2d gradients stride 2 no bias") {
  RandomStream rs(10);
  auto x = leaf(rand_tensor({1, 3, 6, 6}, rs), true, "x");
  auto w = leaf(rand_tensor({2, 3, 3, 3}, rs), true, "w");
  check_grads({x, w}, [&] { return weighted_sum(conv2d(x, w, nullptr, 2, 1)); });
}

TEST_CASE("upsample2 values and gradients") {
  RandomStream rs(11);
  auto x = leaf(rand_tensor({1, 2, 2, 2}, rs), true, "x");
  auto y = upsample2(x);
  CHECK(y->value.dim(2) == 4);
  CHECK(y->value[0] == x->value[0]);
  CHECK(y->value[1] == x->value[0]);
  CHECK(y->value[4] == x->value[0]);
  CHECK(y->value[5] == x->value[0]);
  check_grads({x}, [&] { return weighted_sum(upsample2(x)); });
}

TEST_CASE("avgpool2 values and gradients") {
  RandomStream rs(12);
  auto x = leaf(rand_tensor({2, 2, 4, 4}, rs), true, "x");
  auto y = avgpool2(x);
  CHECK(y->value.dim(2) == 2);
  double m = 0.25 * (x->value[0] + x->value[1] + x->value[4] + x->value[5]);
  CHECK(y->value[0] == doctest::Approx(m).epsilon(1e-14));
  check_grads({x}, [&] { return weighted_sum(avgpool2(x)); });
}

TEST_CASE("global_avgpool values and gradients") {
  RandomStream rs(13);
  auto x = leaf(rand_tensor({2, 3, 2, 2}, rs), true, "x");
  auto y = global_avgpool(x);
  CHECK(y->value.dim(0) == 2);
  CHECK(y->value.dim(1) == 3);
  double m = 0.25 * (x->value[0] + x->value[1] + x->value[2] + x->value[3]);
  CHECK(y->value[0] == doctest::Approx(m).epsilon(1e-14));
  check_grads({x}, [&] { return weighted_sum(global_avgpool(x)); });
}

TEST_CASE("roll2d wraps both axes and inverts") {
  RandomStream rs(14);
  auto x = leaf(rand_tensor({1, 1, 3, 4}, rs), true, "x");
  auto y = roll2d(x, 1, 2);
  // Element (0,0) of input lands at (1,2).
  CHECK(y->value[1 * 4 + 2] == x->value[0]);
  auto back = roll2d(roll2d(x, 1, 2), -1, -2);
  for (int64_t i = 0; i < x->value.size(); ++i) CHECK(back->value[i] == x->value[i]);
  check_grads({x}, [&] { return weighted_sum(roll2d(x, 2, -1)); });
}

TEST_CASE("mul_channels gradients") {
  RandomStream rs(15);
  auto x = leaf(rand_tensor({2, 3, 2, 2}, rs), true, "x");
  auto s = leaf(rand_tensor({2, 3}, rs), true, "s");
  check_grads({x, s}, [&] { return weighted_sum(mul_channels(x, s)); });
}

TEST_CASE("add_channels gradients") {
  RandomStream rs(16);
  auto x = leaf(rand_tensor({2, 3, 2, 2}, rs), true, "x");
  auto b = leaf(rand_tensor({3}, rs), true, "b");
  check_grads({x, b}, [&] { return weighted_sum(add_channels(x, b)); });
}

TEST_CASE("add_hw gradients shared and per-sample noise") {
  RandomStream rs(17);
  auto x = leaf(rand_tensor({2, 3, 2, 2}, rs), true, "x");
  auto n1 = leaf(rand_tensor({1, 1, 2, 2}, rs), true, "n1");
  check_grads({x, n1}, [&] { return weighted_sum(add_hw(x, n1)); });
  auto n2 = leaf(rand_tensor({2, 1, 2, 2}, rs), true, "n2");
  check_grads({x, n2}, [&] { return weighted_sum(add_hw(x, n2)); });
}

TEST_CASE("normalize_channels_const values and gradients") {
  RandomStream rs(18);
  auto x = leaf(rand_tensor({1, 2, 2, 2}, rs), true, "x");
  Tensor mean({2});
  mean[0] = 0.5;
  mean[1] = -0.25;
  Tensor sd({2});
  sd[0] = 2.0;
  sd[1] = 0.5;
  auto y = normalize_channels_const(x, mean, sd);
  CHECK(y->value[0] == doctest::Approx((x->value[0] - 0.5) / 2.0).epsilon(1e-14));
  CHECK(y->value[4] == doctest::Approx((x->value[4] + 0.25) / 0.5).epsilon(1e-14));
  check_grads({x}, [&] { return weighted_sum(normalize_channels_const(x, mean, sd)); });
}

TEST_CASE("unit_normalize_channels produces unit vectors and correct gradients") {
  RandomStream rs(19);
  auto x = leaf(rand_tensor({2, 3, 2, 2}, rs, 0.5, 1.5), true, "x");
  auto y = unit_normalize_channels(x, 1e-10);
  for (int b = 0; b < 2; ++b)
    for (int k = 0; k < 4; ++k) {
      double s = 0.0;
      for (int c = 0; c < 3; ++c) {
        double v = y->value[(int64_t(b) * 3 + c) * 4 + k];
        s += v * v;
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
  check_grads({x}, [&] { return weighted_sum(unit_normalize_channels(x)); });
}

TEST_CASE("leaky_relu values and gradients away from the kink") {
  RandomStream rs(20);
  auto x = leaf(rand_signed_margin({3, 4}, rs), true, "x");
  auto y = leaky_relu(x, 0.2);
  for (int64_t i = 0; i < x->value.size(); ++i) {
    double v = x->value[i];
    CHECK(y->value[i] == doctest::Approx(v > 0 ? v : 0.2 * v).epsilon(1e-14));
  }
  check_grads({x}, [&] { return weighted_sum(leaky_relu(x, 0.2)); });
}

TEST_CASE("tanh and sigmoid values and gradients") {
  RandomStream rs(21);
  auto x = leaf(rand_tensor({2, 5}, rs, -2.0, 2.0), true, "x");
  CHECK(sigmoid_act(constant(Tensor::scalar(0.0)))->value.item() == doctest::Approx(0.5));
  CHECK(tanh_act(constant(Tensor::scalar(0.0)))->value.item() == doctest::Approx(0.0));
  CHECK(std::isfinite(sigmoid_act(constant(Tensor::scalar(-800.0)))->value.item()));  // no overflow
  CHECK(std::isfinite(sigmoid_act(constant(Tensor::scalar(800.0)))->value.item()));
  check_grads({x}, [&] { return weighted_sum(tanh_act(x)); });
  check_grads({x}, [&] { return weighted_sum(sigmoid_act(x)); });
}

TEST_CASE("log_clamped values and gradients") {
  RandomStream rs(22);
  auto x = leaf(rand_tensor({6}, rs, 0.1, 2.0), true, "x");
  check_grads({x}, [&] { return weighted_sum(log_clamped(x)); });
  auto z = log_clamped(constant(Tensor::scalar(0.0)), 1e-12);
  CHECK(z->value.item() == doctest::Approx(std::log(1e-12)));
}

TEST_CASE("softmax rows sum to one with correct gradients") {
  RandomStream rs(23);
  auto x = leaf(rand_tensor({3, 5}, rs, -2.0, 2.0), true, "x");
  auto p = softmax_rows(x);
  for (int b = 0; b < 3; ++b) {
    double s = 0.0;
    for (int k = 0; k < 5; ++k) s += p->value[b * 5 + k];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  check_grads({x}, [&] { return weighted_sum(softmax_rows(x)); });
}

TEST_CASE("cross_entropy value matches manual computation") {
  Tensor logits({2, 3});
  logits[0] = 1.0; logits[1] = 2.0; logits[2] = 3.0;
  logits[3] = 0.0; logits[4] = 0.0; logits[5] = 0.0;
  auto x = leaf(logits, true, "logits");
  std::vector<int> labels{2, 0};
  auto l = cross_entropy(x, labels);
  double z1 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  double z2 = std::log(3.0);
  CHECK(l->value.item() == doctest::Approx(0.5 * ((z1 - 3.0) + z2)).epsilon(1e-12));
  check_grads({x}, [&] { return cross_entropy(x, labels); });
}

TEST_CASE("cross_entropy is stable for extreme logits") {
  Tensor logits({1, 3});
  logits[0] = 1000.0; logits[1] = -1000.0; logits[2] = 0.0;
  auto x = leaf(logits, true, "logits");
  auto l = cross_entropy(x, {0});
  CHECK(l->value.item() == doctest::Approx(0.0).epsilon(1e-9));
  backward(l);
  CHECK(x->grad.size() == 3);
  for (int i = 0; i < 3; ++i) CHECK(std::isfinite(x->grad[i]));
}

TEST_CASE("composite network graph end to end") {
  RandomStream rs(24);
  auto x = leaf(rand_tensor({2, 2, 4, 4}, rs), true, "x");
  auto w1 = leaf(rand_tensor({4, 2, 3, 3}, rs, -0.4, 0.4), true, "w1");
  auto b1 = leaf(rand_tensor({4}, rs, -0.1, 0.1), true, "b1");
  auto wf = leaf(rand_tensor({3, 4}, rs, -0.5, 0.5), true, "wf");
  auto bf = leaf(rand_tensor({3}, rs, -0.1, 0.1), true, "bf");
  std::vector<int> labels{1, 2};
  auto build = [&] {
    auto h = conv2d(x, w1, b1, 1, 1);
    h = tanh_act(h);  // smooth activation keeps the FD check exact
    h = avgpool2(h);
    auto feat = global_avgpool(h);
    auto logits = linear(feat, wf, bf);
    return cross_entropy(logits, labels);
  };
  check_grads({x, w1, b1, wf, bf}, build, 1e-5, 1e-5);
}
