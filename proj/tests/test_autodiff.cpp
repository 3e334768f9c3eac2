#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "testutil.hpp"
#include "ugdiff/ops.hpp"

using namespace ugdiff;

TEST_CASE("identity graph returns the input unchanged") {
  Tensor<float> x = Tensor<float>::from({2, 2}, {1.f, -2.f, 3.f, 0.5f});
  auto v = make_leaf<float>(x, true);
  // No layers applied: the forward of an empty graph is the input itself.
  CHECK(v->value.data == x.data);
}

TEST_CASE("conv2d with an all-zero kernel annihilates any input") {
  RandomEngine rng(1);
  Tensor<float> x({2, 5, 5});
  rng.fill_normal(x);
  auto w = make_leaf<float>(Tensor<float>({3, 2, 3, 3}));
  auto b = make_leaf<float>(Tensor<float>({3}));
  auto y = ops::conv2d(make_leaf(x), w, b, 1, 1);
  CHECK(y->value.shape == std::vector<int>{3, 5, 5});
  for (float v : y->value.data) CHECK(v == 0.f);
}

TEST_CASE("conv2d with a Dirac kernel reproduces the input") {
  RandomEngine rng(2);
  Tensor<float> x({1, 7, 6});
  rng.fill_normal(x);
  Tensor<float> w({1, 1, 3, 3});
  w.at(0, 1, 1) = 1.f;  // center tap
  auto y = ops::conv2d(make_leaf(x), make_leaf(w), make_leaf(Tensor<float>({1})), 1, 1);
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y->value[i] == doctest::Approx(x[i]));
}

TEST_CASE("backward of sum gives all-ones gradient") {
  Tensor<float> x({3, 2, 2});
  RandomEngine rng(3);
  rng.fill_normal(x);
  auto v = make_leaf(x, true);
  backward(ops::sum(v));
  for (float g : v->grad.data) CHECK(g == 1.f);
}

TEST_CASE("backward of squared norm at (1,2) gives (2,4)") {
  auto v = make_leaf<float>(Tensor<float>::from({2}, {1.f, 2.f}), true);
  backward(ops::sum(ops::square(v)));
  CHECK(v->grad[0] == doctest::Approx(2.f));
  CHECK(v->grad[1] == doctest::Approx(4.f));
}

TEST_CASE("backward on a detached loss reports the missing graph") {
  auto loss = make_leaf<float>(Tensor<float>::scalar(1.f));
  CHECK_THROWS_WITH_AS(backward(loss), doctest::Contains("forward"), std::runtime_error);
}

TEST_CASE("backward requires a scalar loss") {
  auto v = make_leaf<float>(Tensor<float>({2, 2}), true);
  auto y = ops::square(v);
  CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("scalar broadcast in add and mul") {
  auto a = make_leaf<float>(Tensor<float>::from({3}, {1.f, 2.f, 3.f}), true);
  auto s = make_leaf<float>(Tensor<float>::scalar(2.f), true);
  auto y = ops::mul(a, s);
  CHECK(y->value[2] == 6.f);
  backward(ops::sum(ops::add(y, s)));
  CHECK(a->grad[0] == 2.f);
  CHECK(s->grad[0] == doctest::Approx(1.f + 2.f + 3.f + 3.f));  // mul spreads + add broadcast
}

TEST_CASE("softmax rows sum to one and matmul matches a hand product") {
  auto a = make_leaf<float>(Tensor<float>::from({2, 2}, {1.f, 2.f, 3.f, 4.f}));
  auto b = make_leaf<float>(Tensor<float>::from({2, 2}, {5.f, 6.f, 7.f, 8.f}));
  auto c = ops::matmul(a, b);
  CHECK(c->value[0] == doctest::Approx(19.f));
  CHECK(c->value[3] == doctest::Approx(50.f));
  auto sm = ops::softmax_rows(a);
  CHECK(sm->value[0] + sm->value[1] == doctest::Approx(1.f));
  CHECK(sm->value[2] + sm->value[3] == doctest::Approx(1.f));
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  // <conv(x), y> == <x, convT(y)> with a shared weight tensor.
  RandomEngine rng(7);
  for (auto [k, s, p, op] : {std::tuple{5, 2, 2, 1}, std::tuple{2, 2, 0, 0},
                             std::tuple{3, 1, 1, 0}}) {
    Tensor<double> x({3, 8, 8}), w({4, 3, k, k});
    rng.fill_normal(x);
    rng.fill_normal(w);
    auto cx = ops::conv2d(make_leaf(x), make_leaf(w), Var<double>(), s, p);
    Tensor<double> y(cx->value.shape);
    rng.fill_normal(y);
    auto cty = ops::conv_transpose2d(make_leaf(y), make_leaf(w), Var<double>(), s, p, op);
    REQUIRE(cty->value.shape == x.shape);
    double lhs = 0, rhs = 0;
    for (std::int64_t i = 0; i < y.numel(); ++i) lhs += cx->value[i] * y[i];
    for (std::int64_t i = 0; i < x.numel(); ++i) rhs += x[i] * cty->value[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-5));
  }
}

TEST_CASE("forward and backward are bitwise deterministic given a seed") {
  auto run = [] {
    RandomEngine rng(42);
    Conv2d<float> conv(3, 4, 3, 1, 1, rng);
    GDN<float> gdn(4, false);
    Tensor<float> x({3, 6, 6});
    rng.fill_normal(x);
    auto v = make_leaf(x, true);
    auto loss = ops::mean(ops::square(gdn(conv(v))));
    backward(loss);
    std::vector<float> out;
    out.push_back(loss->value[0]);
    out.insert(out.end(), v->grad.data.begin(), v->grad.data.end());
    for (auto& p : conv.parameters())
      out.insert(out.end(), p->var->grad.data.begin(), p->var->grad.data.end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("maxpool2x2 rejects odd extents and routes gradients to the argmax") {
  auto bad = make_leaf<float>(Tensor<float>({1, 3, 4}));
  CHECK_THROWS_AS(ops::maxpool2x2(bad), std::invalid_argument);

  Tensor<float> x = Tensor<float>::from({1, 2, 2}, {1.f, 5.f, 2.f, 3.f});
  auto v = make_leaf(x, true);
  auto y = ops::maxpool2x2(v);
  CHECK(y->value[0] == 5.f);
  backward(ops::sum(y));
  CHECK(v->grad[1] == 1.f);
  CHECK(v->grad[0] == 0.f);
}

TEST_CASE("lower_bound blocks gradients that push a clamped value further down") {
  auto v = make_leaf<float>(Tensor<float>::from({2}, {0.05f, 0.5f}), true);
  auto y = ops::lower_bound(v, 0.11);
  CHECK(y->value[0] == doctest::Approx(0.11f));
  CHECK(y->value[1] == doctest::Approx(0.5f));
  // Loss = sum(y): gradient +1 wants y smaller after the descent step; the
  // clamped element ignores it, gradients pulling it back above pass.
  backward(ops::sum(y));
  CHECK(v->grad[0] == 0.f);
  CHECK(v->grad[1] == 1.f);

  auto v2 = make_leaf<float>(Tensor<float>::from({1}, {0.05f}), true);
  backward(ops::scale(ops::sum(ops::lower_bound(v2, 0.11)), -1.0));
  CHECK(v2->grad[0] == -1.f);  // pulls the value upward: passes
}
