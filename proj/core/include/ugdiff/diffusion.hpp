#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "ugdiff/autodiff.hpp"
#include "ugdiff/ops.hpp"
#include "ugdiff/random.hpp"
#include "ugdiff/tensor.hpp"

namespace ugdiff {

// Linear-beta DDPM schedule. Index t runs 1..t_train; alpha_bar[0] == 1 is
// the empty product. sigma_t^2 = beta_t (the classic upper-bound choice).
struct NoiseSchedule {
  int t_train = 0;
  std::vector<double> beta;       // [t_train + 1], beta[0] unused
  std::vector<double> alpha;      // 1 - beta_t
  std::vector<double> alpha_bar;  // cumulative product, alpha_bar[0] = 1
  std::vector<double> sigma;      // sqrt(beta_t)
  std::vector<int> infer_steps;   // strictly increasing subsequence of 1..t_train
};

inline NoiseSchedule make_schedule(int t_train, double beta_1, double beta_t,
                                   int n_infer_steps) {
  if (!(t_train >= 1)) throw std::invalid_argument("make_schedule: t_train must be >= 1");
  if (!(beta_1 > 0.0 && beta_1 < beta_t && beta_t < 1.0))
    throw std::invalid_argument("make_schedule: need 0 < beta_1 < beta_T < 1");
  if (n_infer_steps < 1 || n_infer_steps > t_train)
    throw std::invalid_argument("make_schedule: need 1 <= n_infer_steps <= t_train");

  NoiseSchedule s;
  s.t_train = t_train;
  s.beta.assign(t_train + 1, 0.0);
  s.alpha.assign(t_train + 1, 1.0);
  s.alpha_bar.assign(t_train + 1, 1.0);
  s.sigma.assign(t_train + 1, 0.0);
  for (int t = 1; t <= t_train; ++t) {
    const double f = t_train == 1 ? 0.0 : static_cast<double>(t - 1) / (t_train - 1);
    s.beta[t] = beta_1 + f * (beta_t - beta_1);
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    s.sigma[t] = std::sqrt(s.beta[t]);
  }
  // Evenly strided inference subsequence ending at t_train.
  s.infer_steps.resize(n_infer_steps);
  for (int i = 0; i < n_infer_steps; ++i)
    s.infer_steps[i] = static_cast<int>(
        static_cast<std::int64_t>(t_train) * (i + 1) / n_infer_steps);
  for (size_t i = 1; i < s.infer_steps.size(); ++i)
    if (s.infer_steps[i] <= s.infer_steps[i - 1])
      throw std::logic_error("make_schedule: inference steps not strictly increasing");
  return s;
}

// Closed-form forward corruption: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
template <typename T>
Tensor<T> forward_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps,
                         const NoiseSchedule& sched) {
  if (t < 1 || t > sched.t_train)
    throw std::invalid_argument("forward_sample: t out of range");
  check_shape(x0.same_shape(eps), "forward_sample x0 vs eps");
  const T a = static_cast<T>(std::sqrt(sched.alpha_bar[t]));
  const T b = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar[t]));
  Tensor<T> out(x0.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

// Differentiable noise predictor: (x_t, t, condition) -> predicted noise.
template <typename T>
using DenoiseGraphFn =
    std::function<Var<T>(const Var<T>& x_t, int t, const Var<T>& condition)>;

// Inference-only variant used by the sampler.
template <typename T>
using DenoiseFn =
    std::function<Tensor<T>(const Tensor<T>& x_t, int t, const Tensor<T>& condition)>;

// Noise-prediction objective: mean over batch and elements of
// || eps - eps_hat(x_t, t, cond) ||^2 with t ~ U{1..T}, eps ~ N(0, I).
template <typename T>
Var<T> diffusion_loss(const DenoiseGraphFn<T>& denoiser,
                      const std::vector<const Tensor<T>*>& x0_batch,
                      const std::vector<const Tensor<T>*>& cond_batch,
                      const NoiseSchedule& sched, RandomEngine& rng) {
  if (x0_batch.empty() || x0_batch.size() != cond_batch.size())
    throw std::invalid_argument("diffusion_loss: empty or mismatched batch");
  Var<T> acc;
  for (size_t i = 0; i < x0_batch.size(); ++i) {
    const Tensor<T>& x0 = *x0_batch[i];
    check_shape(x0.same_shape(*cond_batch[i]), "diffusion_loss x0 vs condition");
    const int t = static_cast<int>(rng.uniform_int(1, sched.t_train));
    Tensor<T> eps(x0.shape);
    rng.fill_normal(eps);
    auto x_t = make_leaf<T>(forward_sample(x0, t, eps, sched));
    auto cond = make_leaf<T>(*cond_batch[i]);
    auto eps_hat = denoiser(x_t, t, cond);
    check_shape(eps_hat->value.same_shape(x0), "diffusion_loss denoiser output");
    auto term = ops::mean(ops::square(ops::sub(make_leaf<T>(std::move(eps)), eps_hat)));
    acc = acc ? ops::add(acc, term) : term;
  }
  return ops::scale(acc, 1.0 / static_cast<double>(x0_batch.size()));
}

// Ancestral sampling over sched.infer_steps (Gaussian start, descending t,
// noise injection except at the final step). Deterministic given the seed.
template <typename T>
Tensor<T> sample(const DenoiseFn<T>& denoiser, const Tensor<T>& condition,
                 const NoiseSchedule& sched, std::uint64_t seed) {
  RandomEngine rng(seed);
  Tensor<T> x(condition.shape);
  rng.fill_normal(x);
  for (int i = static_cast<int>(sched.infer_steps.size()) - 1; i >= 0; --i) {
    const int t = sched.infer_steps[i];
    Tensor<T> eps_hat = denoiser(x, t, condition);
    check_shape(eps_hat.same_shape(x), "sample: denoiser output shape");
    const T coef = static_cast<T>(sched.beta[t] / std::sqrt(1.0 - sched.alpha_bar[t]));
    const T inv_sqrt_alpha = static_cast<T>(1.0 / std::sqrt(sched.alpha[t]));
    for (std::int64_t j = 0; j < x.numel(); ++j)
      x[j] = (x[j] - coef * eps_hat[j]) * inv_sqrt_alpha;
    if (i > 0) {
      const T s = static_cast<T>(sched.sigma[t]);
      for (std::int64_t j = 0; j < x.numel(); ++j)
        x[j] += s * static_cast<T>(rng.normal());
    }
  }
  return x;
}

}  // namespace ugdiff
