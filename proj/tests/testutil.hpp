#pragma once

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ugdiff/image_io.hpp"
#include "ugdiff/layers.hpp"
#include "ugdiff/random.hpp"
#include "ugdiff/tensor.hpp"

namespace testutil {

using ugdiff::RandomEngine;
using ugdiff::Tensor;

// ---------------------------------------------------------------------------
// Central finite-difference gradient check (64-bit). `make_loss` must build a
// fresh graph over the given leaves/parameters on every call.
// ---------------------------------------------------------------------------

struct GradCheck {
  std::vector<ugdiff::Var<double>> leaves;  // leaves with requires_grad
  std::function<ugdiff::Var<double>()> make_loss;
  double step = 1e-4;
  int max_checks_per_tensor = 24;

  // Returns the worst relative error over sampled elements.
  double max_rel_error() const {
    // Analytic pass.
    for (auto& v : leaves) v->grad = Tensor<double>();
    auto loss = make_loss();
    ugdiff::backward(loss);
    double worst = 0;
    for (auto& leaf : leaves) {
      Tensor<double> analytic =
          leaf->grad.data.empty() ? Tensor<double>(leaf->value.shape) : leaf->grad;
      const std::int64_t n = leaf->value.numel();
      const std::int64_t stride =
          std::max<std::int64_t>(1, n / max_checks_per_tensor);
      for (std::int64_t i = 0; i < n; i += stride) {
        const double saved = leaf->value[i];
        leaf->value[i] = saved + step;
        const double up = eval();
        leaf->value[i] = saved - step;
        const double dn = eval();
        leaf->value[i] = saved;
        const double numeric = (up - dn) / (2 * step);
        const double a = analytic[i];
        // The absolute floor keeps central-difference roundoff (~1e-8) from
        // dominating the ratio for near-zero gradients.
        const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-4});
        worst = std::max(worst, std::fabs(a - numeric) / denom);
      }
    }
    return worst;
  }

 private:
  double eval() const {
    ugdiff::NoGradGuard ng;
    return make_loss()->value[0];
  }
};

inline ugdiff::Var<double> leaf_of(Tensor<double> t) {
  return ugdiff::make_leaf<double>(std::move(t), true);
}

inline Tensor<double> random_tensor(std::vector<int> shape, RandomEngine& rng,
                                    double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  rng.fill_normal(t, scale);
  return t;
}

// ---------------------------------------------------------------------------
// Synthetic image corpus: smooth color fields plus hard-edged shapes and
// oriented gratings, so the high bands carry learnable structure.
// ---------------------------------------------------------------------------

inline Tensor<float> synthetic_image(std::uint64_t seed, int h, int w) {
  RandomEngine rng(seed);
  Tensor<float> img({3, h, w});

  // Smooth base: linear gradient plus two low-frequency waves per channel,
  // correlated across channels through a shared luminance term.
  double gx = rng.uniform(-0.3, 0.3), gy = rng.uniform(-0.3, 0.3);
  double base = rng.uniform(0.25, 0.75);
  double f1 = rng.uniform(0.5, 2.0), f2 = rng.uniform(0.5, 2.0);
  double p1 = rng.uniform(0, 6.28), p2 = rng.uniform(0, 6.28);
  double chroma[3] = {rng.uniform(-0.12, 0.12), rng.uniform(-0.12, 0.12),
                      rng.uniform(-0.12, 0.12)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double u = static_cast<double>(x) / w, v = static_cast<double>(y) / h;
      const double lum = base + gx * (u - 0.5) + gy * (v - 0.5) +
                         0.1 * std::sin(6.283 * f1 * u + p1) +
                         0.1 * std::cos(6.283 * f2 * v + p2);
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(lum + chroma[c]);
    }

  // Hard-edged rectangles and ellipses (solid fill).
  const int n_shapes = static_cast<int>(rng.uniform_int(3, 7));
  for (int s = 0; s < n_shapes; ++s) {
    const bool ellipse = rng.uniform() < 0.4;
    const int cx = static_cast<int>(rng.uniform_int(0, w - 1));
    const int cy = static_cast<int>(rng.uniform_int(0, h - 1));
    const int rx = static_cast<int>(rng.uniform_int(w / 16 + 1, w / 4 + 1));
    const int ry = static_cast<int>(rng.uniform_int(h / 16 + 1, h / 4 + 1));
    float col[3] = {static_cast<float>(rng.uniform(0.05, 0.95)),
                    static_cast<float>(rng.uniform(0.05, 0.95)),
                    static_cast<float>(rng.uniform(0.05, 0.95))};
    for (int y = std::max(0, cy - ry); y < std::min(h, cy + ry); ++y)
      for (int x = std::max(0, cx - rx); x < std::min(w, cx + rx); ++x) {
        if (ellipse) {
          const double dx = static_cast<double>(x - cx) / rx;
          const double dy = static_cast<double>(y - cy) / ry;
          if (dx * dx + dy * dy > 1.0) continue;
        }
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = col[c];
      }
  }

  // Occasionally, a gentle oriented grating confined to a box. Kept small:
  // phase beyond the low-band Nyquist is irreducibly unpredictable, and the
  // corpus should stay dominated by structure the low band determines.
  if (rng.uniform() < 0.6) {
    const int x0 = static_cast<int>(rng.uniform_int(0, std::max(1, w - w / 3)));
    const int y0 = static_cast<int>(rng.uniform_int(0, std::max(1, h - h / 3)));
    const int tw = std::min(w - x0, w / 3 + 2), th = std::min(h - y0, h / 3 + 2);
    const double freq = rng.uniform(0.8, 2.4);
    const double ang = rng.uniform(0, 3.14159);
    const double amp = rng.uniform(0.03, 0.09);
    const double ca = std::cos(ang), sa = std::sin(ang);
    for (int y = y0; y < y0 + th; ++y)
      for (int x = x0; x < x0 + tw; ++x) {
        const double ph = freq * (ca * x + sa * y);
        const float d = static_cast<float>(amp * std::sin(ph));
        for (int c = 0; c < 3; ++c) img.at(c, y, x) += d;
      }
  }

  for (auto& v : img.data) v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
  return img;
}

inline void write_synthetic_dataset(const std::string& dir, int count, int h, int w,
                                    std::uint64_t seed_base) {
  std::filesystem::create_directories(dir);
  for (int i = 0; i < count; ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "%s/img_%04d.ppm", dir.c_str(), i);
    ugdiff::save_image(name, synthetic_image(seed_base + static_cast<std::uint64_t>(i), h, w));
  }
}

inline std::string fresh_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() /
             ("ugdiff_test_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace testutil
