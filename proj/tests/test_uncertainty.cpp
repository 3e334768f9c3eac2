#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "testutil.hpp"
#include "ugdiff/uncertainty.hpp"

using namespace ugdiff;

namespace {
DenoiseFn<float> noisy_denoiser() {
  // Depends on x_t so different seeds give different trajectories.
  return [](const Tensor<float>& x, int, const Tensor<float>& c) {
    Tensor<float> out(x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = 0.3f * x[i] + 0.1f * c[i];
    return out;
  };
}
}  // namespace

TEST_CASE("mc_predict: seed control, shapes, and the S >= 2 precondition") {
  auto s = make_schedule(20, 1e-3, 0.05, 4);
  Tensor<float> cond({9, 4, 4}, 0.2f);
  auto fn = noisy_denoiser();

  CHECK_THROWS_AS(mc_predict<float>(fn, cond, s, 1, 7), std::invalid_argument);

  auto samples = mc_predict<float>(fn, cond, s, 4, 7);
  CHECK(samples.size() == 4);
  for (const auto& t : samples) CHECK(t.shape == cond.shape);

  // Forcing the same seed reproduces the same tensor.
  auto a = sample<float>(fn, cond, s, 99);
  auto b = sample<float>(fn, cond, s, 99);
  CHECK(a.data == b.data);

  // Distinct seeds differ somewhere.
  bool differs = false;
  for (std::int64_t i = 0; i < samples[0].numel(); ++i)
    differs |= (samples[0][i] != samples[1][i]);
  CHECK(differs);
}

TEST_CASE("estimate_uncertainty: identical samples give exactly zero variance") {
  Tensor<float> t({9, 3, 3}, 0.37f);
  auto u = estimate_uncertainty<float>({t, t, t});
  CHECK(u.samples == 3);
  for (float v : u.delta.data) CHECK(v == 0.0f);
  for (float v : u.mean.data) CHECK(v == 0.37f);
}

TEST_CASE("estimate_uncertainty: S=2 hand case {0,2} -> mean 1, delta 1") {
  Tensor<float> a({1, 1, 1}, 0.0f), b({1, 1, 1}, 2.0f);
  auto u = estimate_uncertainty<float>({a, b});
  CHECK(u.mean[0] == 1.0f);
  CHECK(u.delta[0] == 1.0f);
}

TEST_CASE("estimate_uncertainty: scaling samples by c scales delta by c^2") {
  RandomEngine rng(3);
  std::vector<Tensor<float>> samples;
  for (int k = 0; k < 5; ++k) {
    Tensor<float> t({2, 4, 4});
    rng.fill_normal(t);
    samples.push_back(t);
  }
  auto u1 = estimate_uncertainty(samples);
  const float c = 2.5f;
  for (auto& t : samples)
    for (auto& v : t.data) v *= c;
  auto u2 = estimate_uncertainty(samples);
  for (std::int64_t i = 0; i < u1.delta.numel(); ++i)
    CHECK(u2.delta[i] == doctest::Approx(c * c * u1.delta[i]).epsilon(1e-6));
}

TEST_CASE("estimate_uncertainty is exactly permutation invariant") {
  RandomEngine rng(4);
  std::vector<Tensor<float>> samples;
  for (int k = 0; k < 6; ++k) {
    Tensor<float> t({3, 5, 5});
    rng.fill_normal(t);
    samples.push_back(t);
  }
  auto u1 = estimate_uncertainty(samples);
  std::reverse(samples.begin(), samples.end());
  std::swap(samples[1], samples[4]);
  auto u2 = estimate_uncertainty(samples);
  CHECK(u1.delta.data == u2.delta.data);
  CHECK(u1.mean.data == u2.mean.data);
}

TEST_CASE("estimate_uncertainty rejects mismatched or insufficient samples") {
  Tensor<float> a({1, 2, 2}), b({1, 2, 3});
  CHECK_THROWS_AS(estimate_uncertainty<float>({a}), std::invalid_argument);
  CHECK_THROWS_AS(estimate_uncertainty<float>({a, b}), std::invalid_argument);
}

TEST_CASE("weight map: constant delta reduces to exactly lambda everywhere") {
  for (float d : {0.1f, 0.7f, 3.14159f}) {
    Tensor<float> delta({9, 4, 4}, d);
    auto w = build_weight_map(delta, 0.1);
    for (float v : w.data) CHECK(v == 0.1f);
  }
}

TEST_CASE("weight map: delta at e times the mean adds exactly one nat") {
  // 16 elements: one at delta = e * m, rest chosen so the mean is m.
  const double e = std::exp(1.0);
  const double m = 0.25;
  const int n = 16;
  Tensor<float> delta({1, 4, 4});
  const double rest = (n * m - e * m) / (n - 1);
  for (auto& v : delta.data) v = static_cast<float>(rest);
  delta[0] = static_cast<float>(e * m);
  auto w = build_weight_map(delta, 0.2);
  const double mean_actual =
      [&] {
        double acc = 0;
        for (float v : delta.data) acc += v;
        return acc / n;
      }();
  CHECK(w[0] == doctest::Approx(0.2 + std::log(delta[0] / mean_actual)).epsilon(1e-6));
  CHECK(w[0] == doctest::Approx(1.2).epsilon(1e-3));
}

TEST_CASE("weight map: vanishing delta hits the kappa floor") {
  Tensor<float> delta({1, 2, 2}, 1.0f);
  delta[0] = 0.0f;
  auto w = build_weight_map(delta, 0.5);
  CHECK(w[0] == doctest::Approx(0.05f));  // kappa * lambda
  CHECK(w[1] > w[0]);
}

TEST_CASE("weight map: all-zero delta falls back to plain lambda") {
  Tensor<float> delta({2, 3, 3});
  auto w = build_weight_map(delta, 0.3);
  for (float v : w.data) CHECK(v == 0.3f);
}

TEST_CASE("weight map: monotone non-decreasing in delta and floored") {
  RandomEngine rng(5);
  Tensor<float> delta({1, 8, 8});
  rng.fill_uniform(delta, 0.0, 2.0);
  auto w = build_weight_map(delta, 0.1);
  const float floor_w = static_cast<float>(0.1 * 0.1);  // double math, as computed
  for (std::int64_t i = 0; i < delta.numel(); ++i) {
    CHECK(w[i] >= floor_w);
    for (std::int64_t j = 0; j < delta.numel(); ++j)
      if (delta[i] < delta[j]) CHECK(w[i] <= w[j]);
  }
  Tensor<float> neg({1, 1, 1}, -1.0f);
  CHECK_THROWS_AS(build_weight_map(neg, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(build_weight_map(delta, 0.0), std::invalid_argument);
}
