#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "testutil.hpp"
#include "ugdiff/adam.hpp"

using namespace ugdiff;

TEST_CASE("zero gradient leaves the parameter unchanged") {
  auto p = std::make_shared<Parameter<double>>(Tensor<double>::scalar(3.5));
  AdamOptimizer<double> opt({p}, 0.1);
  p->var->grad = Tensor<double>::scalar(0.0);
  CHECK(opt.step());
  CHECK(p->value()[0] == 3.5);
}

TEST_CASE("first step with unit gradient moves by roughly -lr") {
  auto p = std::make_shared<Parameter<double>>(Tensor<double>::scalar(0.0));
  AdamOptimizer<double> opt({p}, 0.1);
  p->var->grad = Tensor<double>::scalar(1.0);
  CHECK(opt.step());
  // bias-corrected m^ = 1, v^ = 1 -> delta = -lr / (1 + eps)
  CHECK(p->value()[0] == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(p->step_count == 1);
}

TEST_CASE("constant positive gradient keeps moving the parameter down") {
  auto p = std::make_shared<Parameter<double>>(Tensor<double>::scalar(0.0));
  AdamOptimizer<double> opt({p}, 0.1);
  double prev = 0.0;
  for (int i = 0; i < 2; ++i) {
    p->var->grad = Tensor<double>::scalar(1.0);
    CHECK(opt.step());
    CHECK(p->value()[0] < prev);
    prev = p->value()[0];
  }
}

TEST_CASE("missing gradients abort the step with a diagnostic") {
  auto p = std::make_shared<Parameter<double>>(Tensor<double>::scalar(1.0));
  AdamOptimizer<double> opt({p}, 0.1);
  std::string diag;
  CHECK_FALSE(opt.step(&diag));
  CHECK(diag.find("backward") != std::string::npos);
  CHECK(p->value()[0] == 1.0);
}

TEST_CASE("non-finite gradients abort the step without touching state") {
  auto p = std::make_shared<Parameter<double>>(Tensor<double>::scalar(1.0));
  AdamOptimizer<double> opt({p}, 0.1);
  p->var->grad = Tensor<double>::scalar(std::nan(""));
  std::string diag;
  CHECK_FALSE(opt.step(&diag));
  CHECK(diag.find("non-finite") != std::string::npos);
  CHECK(p->value()[0] == 1.0);
  CHECK(p->adam_m[0] == 0.0);
  CHECK(p->step_count == 0);
}

TEST_CASE("training a quadratic converges toward the minimum") {
  auto p = std::make_shared<Parameter<double>>(Tensor<double>::scalar(4.0));
  AdamOptimizer<double> opt({p}, 0.05);
  for (int i = 0; i < 400; ++i) {
    opt.zero_grad();
    auto loss = ops::square(ops::add_const(p->var, -1.0));
    backward(loss);
    CHECK(opt.step());
  }
  CHECK(p->value()[0] == doctest::Approx(1.0).epsilon(1e-2));
}
