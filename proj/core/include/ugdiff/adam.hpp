#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "ugdiff/layers.hpp"
#include "ugdiff/parallel.hpp"

namespace ugdiff {

// Standard Adam. step() applies nothing and returns false if any gradient is
// missing or non-finite, so a bad batch cannot corrupt the moments.
template <typename T>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<ParamPtr<T>> params, double lr,
                         double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void zero_grad() {
    for (auto& p : params_) p->var->grad = Tensor<T>();
  }

  bool step(std::string* diagnostic = nullptr) {
    for (auto& p : params_) {
      if (p->var->grad.data.empty()) {
        if (diagnostic) *diagnostic = "missing gradient (run backward first)";
        return false;
      }
      for (T g : p->var->grad.data) {
        if (!std::isfinite(static_cast<double>(g))) {
          if (diagnostic) *diagnostic = "non-finite gradient";
          return false;
        }
      }
    }
    for (auto& p : params_) {
      p->step_count += 1;
      const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(p->step_count));
      const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(p->step_count));
      Tensor<T>& w = p->value();
      const Tensor<T>& g = p->var->grad;
      const std::int64_t n = w.numel();
      const int chunks = static_cast<int>(std::min<std::int64_t>((n + 65535) / 65536, 16));
      parallel_for(chunks, [&](int chunk) {
        const std::int64_t lo = n * chunk / chunks;
        const std::int64_t hi = n * (chunk + 1) / chunks;
        for (std::int64_t i = lo; i < hi; ++i) {
          const double gi = g[i];
          const double m = beta1_ * p->adam_m[i] + (1.0 - beta1_) * gi;
          const double v = beta2_ * p->adam_v[i] + (1.0 - beta2_) * gi * gi;
          p->adam_m[i] = static_cast<T>(m);
          p->adam_v[i] = static_cast<T>(v);
          const double mhat = m / bc1;
          const double vhat = v / bc2;
          w[i] = static_cast<T>(w[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
        }
      });
    }
    return true;
  }

 private:
  std::vector<ParamPtr<T>> params_;
  double lr_, beta1_, beta2_, eps_;
};

}  // namespace ugdiff
