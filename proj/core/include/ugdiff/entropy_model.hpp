#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "ugdiff/layers.hpp"
#include "ugdiff/range_coder.hpp"

namespace ugdiff {

// Learned factorized prior for the side-information channels: a per-channel
// monotone network of shape 1-3-3-3-1 whose sigmoid output is the CDF.
// Monotonicity comes from softplus-positive weights and tanh-bounded gates.
// The probability of integer bin v is CDF(v + 1/2) - CDF(v - 1/2).
template <typename T>
class FactorizedPrior : public Module<T> {
 public:
  static constexpr int kLayers = 4;
  // ranks per layer boundary: 1 -> 3 -> 3 -> 3 -> 1
  static constexpr std::array<int, kLayers + 1> kRanks = {1, 3, 3, 3, 1};

  explicit FactorizedPrior(int channels, RandomEngine& rng) : channels_(channels) {
    for (int k = 0; k < kLayers; ++k) {
      const int rin = kRanks[k], rout = kRanks[k + 1];
      // Initial per-layer slope ~0.8 gives a gentle CDF over roughly +-15.
      Tensor<T> h({channels, rout, rin}, static_cast<T>(softplus_inverse(0.8)));
      Tensor<T> b({channels, rout});
      rng.fill_uniform(b, -0.5, 0.5);
      h_raw_[k] = this->add_param("h" + std::to_string(k), std::move(h));
      bias_[k] = this->add_param("b" + std::to_string(k), std::move(b));
      if (k < kLayers - 1)
        gate_raw_[k] = this->add_param("a" + std::to_string(k), Tensor<T>({channels, rout}));
    }
  }

  int channels() const { return channels_; }

  // Plain CDF evaluation (used when building coding tables).
  double cdf_value(int channel, double x) const {
    double u[3] = {x, 0, 0};
    int rin = 1;
    for (int k = 0; k < kLayers; ++k) {
      const int rout = kRanks[k + 1];
      double z[3] = {0, 0, 0};
      for (int i = 0; i < rout; ++i) {
        double acc = bias(k, channel, i);
        for (int j = 0; j < rin; ++j) acc += weight(k, channel, i, j) * u[j];
        z[i] = acc;
      }
      if (k < kLayers - 1) {
        for (int i = 0; i < rout; ++i) u[i] = z[i] + gate(k, channel, i) * std::tanh(z[i]);
      } else {
        u[0] = z[0];
      }
      rin = rout;
    }
    return 1.0 / (1.0 + std::exp(-u[0]));
  }

  CdfTable table(int channel, int lo = -127, int hi = 128) const {
    const int n = hi - lo + 1;
    std::vector<double> pmf(n);
    for (int s = lo; s <= hi; ++s)
      pmf[s - lo] = cdf_value(channel, s + 0.5) - cdf_value(channel, s - 0.5);
    pmf[0] += cdf_value(channel, lo - 0.5);
    pmf[n - 1] += 1.0 - cdf_value(channel, hi + 0.5);
    for (double& p : pmf)
      if (p < 0) p = 0;
    return quantize_pmf(pmf, lo);
  }

  // Differentiable bin probability for a [C,H,W] tensor of (noisy) values.
  Var<T> bin_prob(const Var<T>& v) const {
    check_shape(v->value.ndim() == 3 && v->value.dim(0) == channels_,
                "factorized prior input " + shape_str(v->value.shape));
    const std::int64_t plane =
        static_cast<std::int64_t>(v->value.dim(1)) * v->value.dim(2);
    Tensor<T> out(v->value.shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) {
      const int c = static_cast<int>(i / plane);
      const double x = static_cast<double>(v->value[i]);
      double p = cdf_value(c, x + 0.5) - cdf_value(c, x - 0.5);
      out[i] = static_cast<T>(p < 1e-9 ? 1e-9 : p);
    }

    std::vector<Var<T>> parents = {v};
    for (int k = 0; k < kLayers; ++k) {
      parents.push_back(h_raw_[k]->var);
      parents.push_back(bias_[k]->var);
    }
    for (int k = 0; k < kLayers - 1; ++k) parents.push_back(gate_raw_[k]->var);

    auto self = this;
    return make_node<T>(std::move(out), std::move(parents),
                        [self, v, plane](Node<T>& n) { self->backprop_bin_prob(n, v, plane); });
  }

 private:
  double weight(int k, int c, int i, int j) const {
    const int rin = kRanks[k], rout = kRanks[k + 1];
    const T raw =
        h_raw_[k]->value()[(static_cast<std::int64_t>(c) * rout + i) * rin + j];
    const double x = static_cast<double>(raw);
    return x > 20 ? x : std::log1p(std::exp(x));
  }
  double bias(int k, int c, int i) const {
    return static_cast<double>(bias_[k]->value()[static_cast<std::int64_t>(c) * kRanks[k + 1] + i]);
  }
  double gate(int k, int c, int i) const {
    return std::tanh(static_cast<double>(
        gate_raw_[k]->value()[static_cast<std::int64_t>(c) * kRanks[k + 1] + i]));
  }

  // One CDF pass keeping intermediates, then reverse accumulation.
  struct PassState {
    std::array<std::array<double, 3>, kLayers> z;
    std::array<std::array<double, 3>, kLayers + 1> u;
    double sigmoid_out = 0;
  };

  void forward_pass(int c, double x, PassState& st) const {
    st.u[0] = {x, 0, 0};
    int rin = 1;
    for (int k = 0; k < kLayers; ++k) {
      const int rout = kRanks[k + 1];
      for (int i = 0; i < rout; ++i) {
        double acc = bias(k, c, i);
        for (int j = 0; j < rin; ++j) acc += weight(k, c, i, j) * st.u[k][j];
        st.z[k][i] = acc;
      }
      if (k < kLayers - 1) {
        for (int i = 0; i < rout; ++i)
          st.u[k + 1][i] = st.z[k][i] + gate(k, c, i) * std::tanh(st.z[k][i]);
      } else {
        st.u[k + 1][0] = st.z[k][0];
      }
      rin = rout;
    }
    st.sigmoid_out = 1.0 / (1.0 + std::exp(-st.u[kLayers][0]));
  }

  // Reverse pass for d(sigmoid_out)/d(params, x), scaled by `g`.
  void backward_pass(int c, const PassState& st, double g, double* dv) const {
    const double s = st.sigmoid_out;
    std::array<double, 3> du = {g * s * (1.0 - s), 0, 0};
    for (int k = kLayers - 1; k >= 0; --k) {
      const int rin = kRanks[k], rout = kRanks[k + 1];
      std::array<double, 3> dz = {0, 0, 0};
      if (k < kLayers - 1) {
        for (int i = 0; i < rout; ++i) {
          const double th = std::tanh(st.z[k][i]);
          const double a = gate(k, c, i);
          dz[i] = du[i] * (1.0 + a * (1.0 - th * th));
          // gate gradient through tanh reparameterization
          const double da = du[i] * th;
          gate_raw_[k]->var->grad[static_cast<std::int64_t>(c) * rout + i] +=
              static_cast<T>(da * (1.0 - a * a));
        }
      } else {
        dz[0] = du[0];
      }
      std::array<double, 3> dun = {0, 0, 0};
      for (int i = 0; i < rout; ++i) {
        bias_[k]->var->grad[static_cast<std::int64_t>(c) * rout + i] += static_cast<T>(dz[i]);
        for (int j = 0; j < rin; ++j) {
          const std::int64_t wi = (static_cast<std::int64_t>(c) * rout + i) * rin + j;
          const double raw = static_cast<double>(h_raw_[k]->value()[wi]);
          const double dsp = 1.0 / (1.0 + std::exp(-raw));  // softplus'
          h_raw_[k]->var->grad[wi] += static_cast<T>(dz[i] * st.u[k][j] * dsp);
          dun[j] += dz[i] * weight(k, c, i, j);
        }
      }
      du = dun;
    }
    *dv += du[0];
  }

  void backprop_bin_prob(Node<T>& n, const Var<T>& v, std::int64_t plane) const {
    for (int k = 0; k < kLayers; ++k) {
      h_raw_[k]->var->ensure_grad();
      bias_[k]->var->ensure_grad();
      if (k < kLayers - 1) gate_raw_[k]->var->ensure_grad();
    }
    const bool need_v = v->requires_grad;
    if (need_v) v->ensure_grad();
    PassState hi, lo;
    for (std::int64_t i = 0; i < n.value.numel(); ++i) {
      if (n.value[i] <= static_cast<T>(1e-9)) continue;  // floored: no gradient
      const int c = static_cast<int>(i / plane);
      const double x = static_cast<double>(v->value[i]);
      const double g = static_cast<double>(n.grad[i]);
      forward_pass(c, x + 0.5, hi);
      forward_pass(c, x - 0.5, lo);
      double dv = 0;
      backward_pass(c, hi, g, &dv);
      backward_pass(c, lo, -g, &dv);
      if (need_v) v->grad[i] += static_cast<T>(dv);
    }
  }

  int channels_;
  std::array<ParamPtr<T>, kLayers> h_raw_;
  std::array<ParamPtr<T>, kLayers> bias_;
  std::array<ParamPtr<T>, kLayers - 1> gate_raw_;
};

}  // namespace ugdiff
