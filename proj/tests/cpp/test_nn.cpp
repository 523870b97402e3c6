#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "apt/nn.hpp"

#include <cmath>

using namespace apt;

TEST_CASE("param store ordering and lookup") {
  ParamStore ps;
  ps.add("w1", Tensor({2, 2}));
  ps.add("b1", Tensor({2}));
  ps.add("w2", Tensor({3, 2}));
  CHECK(ps.names() == std::vector<std::string>{"w1", "b1", "w2"});
  CHECK(ps.param_count() == 4 + 2 + 6);
  CHECK(ps.has("b1"));
  CHECK_FALSE(ps.has("nope"));
  CHECK_THROWS_AS(ps.get("nope"), std::out_of_range);
  CHECK_THROWS_AS(ps.add("w1", Tensor({1})), std::invalid_argument);
}

TEST_CASE("clone is independent") {
  ParamStore ps;
  auto w = ps.add("w", Tensor::full({2}, 1.5));
  ParamStore copy = ps.clone();
  copy.get("w")->value[0] = -9.0;
  CHECK(w->value[0] == 1.5);
  CHECK(copy.get("w")->value[1] == 1.5);
}

TEST_CASE("copy_values_from is strict") {
  ParamStore a, b, c;
  a.add("w", Tensor::full({2}, 1.0));
  b.add("w", Tensor::full({2}, 2.0));
  a.copy_values_from(b);
  CHECK(a.get("w")->value[0] == 2.0);
  c.add("w", Tensor::full({3}, 2.0));
  CHECK_THROWS_AS(a.copy_values_from(c), std::invalid_argument);
}

TEST_CASE("freeze stops gradient requests") {
  ParamStore ps;
  auto w = ps.add("w", Tensor::full({2}, 1.0));
  ps.freeze();
  auto y = sum_all(scale(w, 3.0));
  CHECK_FALSE(y->requires_grad);
  ps.unfreeze();
  auto z = sum_all(scale(w, 3.0));
  CHECK(z->requires_grad);
}

TEST_CASE("adam first step matches closed form") {
  auto p = leaf(Tensor::full({3}, 1.0), true, "p");
  AdamConfig cfg;
  cfg.lr = 0.1;
  Adam opt({p}, cfg);
  auto loss = sum_all(mul(p, constant(Tensor::full({3}, 2.0))));  // grad = 2 everywhere
  backward(loss);
  opt.step();
  // t=1: mhat=g, vhat=g^2, delta = lr*g/(|g|+eps)
  double expect = 1.0 - 0.1 * 2.0 / (2.0 + cfg.eps);
  for (int i = 0; i < 3; ++i) CHECK(p->value[i] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("adam with beta1 zero is momentum-free") {
  auto p = leaf(Tensor::scalar(0.0), true, "p");
  AdamConfig cfg;
  cfg.lr = 0.5;
  cfg.beta1 = 0.0;
  Adam opt({p}, cfg);
  // Two steps with alternating gradient signs: with beta1=0 the update
  // direction always matches the current gradient, never the history.
  p->zero_grad();
  p->ensure_grad();
  p->grad[0] = 1.0;
  opt.step();
  double after1 = p->value[0];
  CHECK(after1 < 0.0);
  p->zero_grad();
  p->ensure_grad();
  p->grad[0] = -1.0;
  opt.step();
  CHECK(p->value[0] > after1);
}

TEST_CASE("adam minimizes a quadratic") {
  auto p = leaf(Tensor::full({4}, 5.0), true, "p");
  AdamConfig cfg;
  cfg.lr = 0.2;
  Adam opt({p}, cfg);
  for (int it = 0; it < 400; ++it) {
    opt.zero_grad();
    auto loss = sum_all(mul(p, p));
    backward(loss);
    opt.step();
  }
  for (int i = 0; i < 4; ++i) CHECK(std::abs(p->value[i]) < 1e-2);
}

TEST_CASE("adam skips params without gradients") {
  auto a = leaf(Tensor::scalar(1.0), true, "a");
  auto b = leaf(Tensor::scalar(2.0), true, "b");
  Adam opt({a, b}, {});
  auto loss = sum_all(mul(a, a));
  backward(loss);
  opt.step();
  CHECK(a->value[0] != 1.0);
  CHECK(b->value[0] == 2.0);
}

TEST_CASE("initializer statistics") {
  RandomStream rs(1);
  Tensor t = he_normal({256, 64}, 64, rs);
  double sq = 0.0;
  for (int64_t i = 0; i < t.size(); ++i) sq += t[i] * t[i];
  double var = sq / static_cast<double>(t.size());
  CHECK(var == doctest::Approx(2.0 / 64).epsilon(0.05));
}
