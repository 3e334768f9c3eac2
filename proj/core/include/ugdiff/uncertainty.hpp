#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "ugdiff/diffusion.hpp"
#include "ugdiff/tensor.hpp"

namespace ugdiff {

// Per-element Monte-Carlo statistics of repeated diffusion predictions.
// delta is the population variance (divisor S) in squared band units.
template <typename T>
struct UncertaintyMap {
  Tensor<T> mean;
  Tensor<T> delta;
  int samples = 0;
};

// Runs the sampler S times with consecutive seeds and a shared condition.
template <typename T>
std::vector<Tensor<T>> mc_predict(const DenoiseFn<T>& denoiser, const Tensor<T>& condition,
                                  const NoiseSchedule& sched, int s,
                                  std::uint64_t base_seed) {
  if (s < 2) throw std::invalid_argument("mc_predict: need S >= 2 samples for a variance");
  std::vector<Tensor<T>> out;
  out.reserve(s);
  for (int k = 0; k < s; ++k)
    out.push_back(sample(denoiser, condition, sched, base_seed + static_cast<std::uint64_t>(k)));
  return out;
}

// Mean and population variance across samples. Per-element addends are
// sorted before accumulation so the result is exactly invariant under any
// permutation of the sample list.
template <typename T>
UncertaintyMap<T> estimate_uncertainty(const std::vector<Tensor<T>>& samples) {
  if (samples.size() < 2)
    throw std::invalid_argument("estimate_uncertainty: need at least 2 samples");
  for (const auto& s : samples)
    check_shape(s.same_shape(samples[0]), "estimate_uncertainty sample shapes");

  const int s_n = static_cast<int>(samples.size());
  const std::int64_t n = samples[0].numel();
  UncertaintyMap<T> u;
  u.samples = s_n;
  u.mean = Tensor<T>(samples[0].shape);
  u.delta = Tensor<T>(samples[0].shape);

  std::vector<double> vals(s_n);
  for (std::int64_t i = 0; i < n; ++i) {
    for (int k = 0; k < s_n; ++k) vals[k] = static_cast<double>(samples[k][i]);
    std::sort(vals.begin(), vals.end());
    double acc = 0;
    for (double v : vals) acc += v;
    const double mean = acc / s_n;
    double var = 0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= s_n;
    u.mean[i] = static_cast<T>(mean);
    u.delta[i] = static_cast<T>(var < 0 ? 0 : var);
  }
  return u;
}

// Distortion weight for the uncertainty-weighted R-D objective:
//   w = max(lambda + log(max(delta / mean(delta), eps)), kappa * lambda)
// The per-image mean normalization centers the log at zero, so a constant
// uncertainty map reduces the weight to exactly lambda everywhere; the
// kappa floor keeps the weight a positive distortion penalty. All-zero
// delta falls back to the plain lambda weighting.
template <typename T>
Tensor<T> build_weight_map(const Tensor<T>& delta, double lambda) {
  if (!(lambda > 0)) throw std::invalid_argument("build_weight_map: lambda must be positive");
  constexpr double kEps = 1e-6;
  constexpr double kKappa = 0.1;
  Tensor<T> w(delta.shape);
  double acc = 0;
  for (std::int64_t i = 0; i < delta.numel(); ++i) {
    const double d = static_cast<double>(delta[i]);
    if (d < 0) throw std::invalid_argument("build_weight_map: negative delta");
    acc += d;
  }
  const double mean = acc / static_cast<double>(delta.numel());
  if (mean == 0) {
    w.fill(static_cast<T>(lambda));
    return w;
  }
  const double floor_w = kKappa * lambda;
  for (std::int64_t i = 0; i < delta.numel(); ++i) {
    const double ratio = std::max(static_cast<double>(delta[i]) / mean, kEps);
    const double v = lambda + std::log(ratio);
    w[i] = static_cast<T>(v < floor_w ? floor_w : v);
  }
  return w;
}

}  // namespace ugdiff
