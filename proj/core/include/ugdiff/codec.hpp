#pragma once

#include <cmath>
#include <memory>
#include <utility>
#include <vector>

#include "ugdiff/entropy_model.hpp"
#include "ugdiff/layers.hpp"
#include "ugdiff/random.hpp"
#include "ugdiff/range_coder.hpp"

namespace ugdiff {

constexpr int kSymbolSupportLo = -127;
constexpr int kSymbolSupportHi = 128;

struct CodecConfig {
  int in_ch = 3;
  int n = 32;  // transform width
  int m = 48;  // latent channels
  bool two_slice = false;  // channel-conditional entropy model, off by default
};

// Additive-noise relaxation for training.
template <typename T>
Var<T> quantize_train(const Var<T>& y, RandomEngine& rng) {
  Tensor<T> u(y->value.shape);
  rng.fill_uniform(u, -0.5, 0.5);
  return ops::add(y, make_leaf<T>(std::move(u)));
}

// Mean-centered rounding for coding. Returns (y_hat, integer symbols); the
// symbols are clamped to the coder support, and y_hat is reconstructed from
// the clamped symbols so encoder and decoder agree exactly.
template <typename T>
std::pair<Tensor<T>, std::vector<int>> quantize_eval(const Tensor<T>& y,
                                                     const Tensor<T>& mu) {
  check_shape(y.same_shape(mu), "quantize_eval y vs mu");
  Tensor<T> y_hat(y.shape);
  std::vector<int> symbols(static_cast<size_t>(y.numel()));
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    long k = std::lround(static_cast<double>(y[i]) - static_cast<double>(mu[i]));
    if (k < kSymbolSupportLo) k = kSymbolSupportLo;
    if (k > kSymbolSupportHi) k = kSymbolSupportHi;
    symbols[static_cast<size_t>(i)] = static_cast<int>(k);
    y_hat[i] = mu[i] + static_cast<T>(k);
  }
  return {std::move(y_hat), std::move(symbols)};
}

// Gaussian-conditional likelihood of quantization bins, sigma pre-clamped.
template <typename T>
Var<T> likelihood(const Var<T>& y_vals, const Var<T>& mu, const Var<T>& sigma) {
  return ops::gaussian_bin_prob(y_vals, mu, sigma);
}

// 255^2-scaled weighted squared error. Both R-D losses share this exact code
// path so a constant weight map reduces one to the other bit for bit.
template <typename T>
Var<T> weighted_distortion(const Var<T>& x, const Var<T>& x_hat, Tensor<T> weights) {
  check_shape(x->value.same_shape(x_hat->value) && x->value.same_shape(weights),
              "weighted_distortion operands");
  auto w = make_leaf<T>(std::move(weights));
  auto sq = ops::square(ops::sub(x, x_hat));
  return ops::scale(ops::mean(ops::mul(w, sq)), 255.0 * 255.0);
}

template <typename T>
Var<T> urd_loss(const Var<T>& x, const Var<T>& x_hat, const Var<T>& bits_y,
                const Var<T>& bits_h, const Tensor<T>& weight_map) {
  const double num_px = static_cast<double>(x->value.dim(1)) * x->value.dim(2);
  auto rate = ops::scale(ops::add(bits_y, bits_h), 1.0 / num_px);
  Tensor<T> w = weight_map;
  return ops::add(rate, weighted_distortion(x, x_hat, std::move(w)));
}

template <typename T>
Var<T> rd_loss(const Var<T>& x, const Var<T>& x_hat, const Var<T>& bits_y,
               const Var<T>& bits_h, double lambda) {
  if (!(lambda > 0)) throw std::invalid_argument("rd_loss: lambda must be positive");
  return urd_loss(x, x_hat, bits_y, bits_h, Tensor<T>(x->value.shape, static_cast<T>(lambda)));
}

// VAE-style transform codec with a mean-scale hyperprior. Analysis is four
// stride-2 conv+GDN stages (x16 spatial reduction); synthesis mirrors with
// IGDN and transposed convs. Side information is coded with the learned
// factorized prior. Optional two-slice mode predicts the second half of the
// latent channels conditioned on the decoded first half.
template <typename T>
class CodecModel : public Module<T> {
 public:
  CodecModel(const CodecConfig& cfg, RandomEngine& rng)
      : cfg_(cfg),
        a0_(cfg.in_ch, cfg.n, 5, 2, 2, rng), g0_(cfg.n, false),
        a1_(cfg.n, cfg.n, 5, 2, 2, rng), g1_(cfg.n, false),
        a2_(cfg.n, cfg.n, 5, 2, 2, rng), g2_(cfg.n, false),
        a3_(cfg.n, cfg.m, 5, 2, 2, rng),
        s0_(cfg.m, cfg.n, 5, 2, 2, 1, rng), i0_(cfg.n, true),
        s1_(cfg.n, cfg.n, 5, 2, 2, 1, rng), i1_(cfg.n, true),
        s2_(cfg.n, cfg.n, 5, 2, 2, 1, rng), i2_(cfg.n, true),
        s3_(cfg.n, cfg.in_ch, 5, 2, 2, 1, rng),
        ha0_(cfg.m, cfg.n, 3, 1, 1, rng),
        ha1_(cfg.n, cfg.n, 5, 2, 2, rng),
        ha2_(cfg.n, cfg.n, 5, 2, 2, rng),
        hs0_(cfg.n, cfg.n, 5, 2, 2, 1, rng),
        hs1_(cfg.n, cfg.n, 5, 2, 2, 1, rng),
        hs2_(cfg.n, 2 * cfg.m, 3, 1, 1, rng),
        prior_(cfg.n, rng) {
    this->add_child("a0", &a0_); this->add_child("g0", &g0_);
    this->add_child("a1", &a1_); this->add_child("g1", &g1_);
    this->add_child("a2", &a2_); this->add_child("g2", &g2_);
    this->add_child("a3", &a3_);
    this->add_child("s0", &s0_); this->add_child("i0", &i0_);
    this->add_child("s1", &s1_); this->add_child("i1", &i1_);
    this->add_child("s2", &s2_); this->add_child("i2", &i2_);
    this->add_child("s3", &s3_);
    this->add_child("ha0", &ha0_);
    this->add_child("ha1", &ha1_);
    this->add_child("ha2", &ha2_);
    this->add_child("hs0", &hs0_);
    this->add_child("hs1", &hs1_);
    this->add_child("hs2", &hs2_);
    this->add_child("prior", &prior_);
    if (cfg.two_slice) {
      if (cfg.m % 2 != 0)
        throw std::invalid_argument("two-slice codec requires an even latent width");
      slice0_ = std::make_unique<Conv2d<T>>(2 * cfg.m, cfg.m, 3, 1, 1, rng);
      slice1_ = std::make_unique<Conv2d<T>>(2 * cfg.m + cfg.m / 2, cfg.m, 3, 1, 1, rng);
      this->add_child("slice0", slice0_.get());
      this->add_child("slice1", slice1_.get());
    }
  }

  const CodecConfig& config() const { return cfg_; }
  const FactorizedPrior<T>& prior() const { return prior_; }

  Var<T> analyze(const Var<T>& x) const {
    check_shape(x->value.dim(0) == cfg_.in_ch && x->value.dim(1) % 16 == 0 &&
                    x->value.dim(2) % 16 == 0,
                "codec analyze input " + shape_str(x->value.shape));
    auto h = g0_(a0_(x));
    h = g1_(a1_(h));
    h = g2_(a2_(h));
    return a3_(h);
  }

  Var<T> synthesize(const Var<T>& y_hat) const {
    auto h = i0_(s0_(y_hat));
    h = i1_(s1_(h));
    h = i2_(s2_(h));
    return s3_(h);
  }

  Var<T> hyper_analyze(const Var<T>& y) const {
    auto h = ops::relu(ha0_(y));
    h = ops::relu(ha1_(h));
    return ha2_(h);
  }

  // Upsampled hyper features at the latent grid (cropped: hyper extents are
  // ceil(y/4), so the 4x upsampling can overshoot).
  Var<T> hyper_features(const Var<T>& h_hat, int yh, int yw) const {
    auto u = ops::relu(hs0_(h_hat));
    u = ops::relu(hs1_(u));
    u = hs2_(u);
    if (u->value.dim(1) != yh || u->value.dim(2) != yw) {
      check_shape(u->value.dim(1) >= yh && u->value.dim(2) >= yw, "hyper feature extents");
      Tensor<T> c({u->value.dim(0), yh, yw});
      auto uc = u;
      for (int ch = 0; ch < c.dim(0); ++ch)
        for (int y = 0; y < yh; ++y)
          for (int x = 0; x < yw; ++x) c.at(ch, y, x) = uc->value.at(ch, y, x);
      const int uh = u->value.dim(1), uw = u->value.dim(2);
      u = make_node<T>(std::move(c), {uc}, [uc, yh, yw, uh, uw](Node<T>& n) {
        uc->ensure_grad();
        const int cn = n.value.dim(0);
        for (int ch = 0; ch < cn; ++ch)
          for (int y = 0; y < yh; ++y)
            for (int x = 0; x < yw; ++x)
              uc->grad.data[(static_cast<size_t>(ch) * uh + y) * uw + x] +=
                  n.grad.at(ch, y, x);
      });
    }
    return u;
  }

  // Splits hyper features into per-element Gaussian parameters. The scale is
  // kept inside [sigma_min, sigma_max]: softplus above the floor (smooth, so
  // finite-difference checks hold) and a hard cap at the top.
  static Var<T> bounded_sigma(const Var<T>& raw) {
    return ops::upper_bound(ops::add_const(ops::softplus(raw), kSigmaMin), kSigmaMax);
  }

  std::pair<Var<T>, Var<T>> entropy_params(const Var<T>& features) const {
    auto mu = ops::slice_ch(features, 0, cfg_.m);
    auto sg = ops::slice_ch(features, cfg_.m, 2 * cfg_.m);
    return {mu, bounded_sigma(sg)};
  }

  // Slice parameter heads (two-slice mode). `context` is the dequantized
  // first slice when predicting the second.
  std::pair<Var<T>, Var<T>> slice_params(const Var<T>& features, int slice,
                                         const Var<T>& context) const {
    const int half = cfg_.m / 2;
    Var<T> raw;
    if (slice == 0) {
      raw = (*slice0_)(features);
    } else {
      raw = (*slice1_)(ops::concat_ch(features, context));
    }
    auto mu = ops::slice_ch(raw, 0, half);
    auto sg = ops::slice_ch(raw, half, 2 * half);
    return {mu, bounded_sigma(sg)};
  }

  // ---- training ----

  struct TrainForward {
    Var<T> x;         // input leaf
    Var<T> x_hat;     // noisy-quantized reconstruction
    Var<T> bits_y;    // scalar, main latent rate in bits
    Var<T> bits_h;    // scalar, side-information rate in bits
  };

  TrainForward train_forward(const Tensor<T>& input, RandomEngine& rng) const {
    auto x = make_leaf<T>(input);
    auto y = analyze(x);
    const int yh = y->value.dim(1), yw = y->value.dim(2);
    auto h = hyper_analyze(y);
    auto h_tilde = quantize_train(h, rng);
    auto bits_h = ops::total_bits(prior_.bin_prob(h_tilde));
    auto feats = hyper_features(h_tilde, yh, yw);
    auto y_tilde = quantize_train(y, rng);
    Var<T> bits_y;
    if (!cfg_.two_slice) {
      auto [mu, sigma] = entropy_params(feats);
      bits_y = ops::total_bits(likelihood(y_tilde, mu, sigma));
    } else {
      const int half = cfg_.m / 2;
      auto y0 = ops::slice_ch(y_tilde, 0, half);
      auto y1 = ops::slice_ch(y_tilde, half, cfg_.m);
      auto [mu0, sg0] = slice_params(feats, 0, nullptr);
      auto bits0 = ops::total_bits(likelihood(y0, mu0, sg0));
      auto [mu1, sg1] = slice_params(feats, 1, y0);
      auto bits1 = ops::total_bits(likelihood(y1, mu1, sg1));
      bits_y = ops::add(bits0, bits1);
    }
    auto x_hat = synthesize(y_tilde);
    return {x, x_hat, bits_y, bits_h};
  }

  // ---- coding ----

  struct Coded {
    std::vector<int> y_symbols, h_symbols;
    std::vector<int> y_shape, h_shape;
    Tensor<T> x_hat;
    double est_bits_y = 0, est_bits_h = 0;
  };

  Coded encode_eval(const Tensor<T>& input) const {
    NoGradGuard ng;
    auto y = analyze(make_leaf<T>(input))->value;
    auto h = hyper_analyze(make_leaf<T>(y))->value;
    Coded c;
    c.y_shape = y.shape;
    c.h_shape = h.shape;
    Tensor<T> h_hat(h.shape);
    c.h_symbols.resize(static_cast<size_t>(h.numel()));
    for (std::int64_t i = 0; i < h.numel(); ++i) {
      long k = std::lround(static_cast<double>(h[i]));
      if (k < kSymbolSupportLo) k = kSymbolSupportLo;
      if (k > kSymbolSupportHi) k = kSymbolSupportHi;
      c.h_symbols[static_cast<size_t>(i)] = static_cast<int>(k);
      h_hat[i] = static_cast<T>(k);
    }
    c.est_bits_h = estimate_prior_bits(c.h_symbols, h.shape);

    Tensor<T> y_hat;
    c.y_symbols.assign(static_cast<size_t>(y.numel()), 0);
    dequantize_with_params(h_hat, y.dim(1), y.dim(2), &y, &c.y_symbols, &y_hat,
                           &c.est_bits_y);
    c.x_hat = synthesize(make_leaf<T>(y_hat))->value;
    return c;
  }

  // Rebuilds y_hat (and optionally symbols + analytic bits) from decoded side
  // info. When `y` is null the symbols are taken from *io_symbols (decoder
  // direction); otherwise symbols are produced from y (encoder direction).
  void dequantize_with_params(const Tensor<T>& h_hat, int yh, int yw, const Tensor<T>* y,
                              std::vector<int>* io_symbols, Tensor<T>* y_hat_out,
                              double* est_bits, RangeDecoder* dec = nullptr,
                              RangeEncoder* enc = nullptr) const {
    NoGradGuard ng;
    auto feats = hyper_features(make_leaf<T>(h_hat), yh, yw);
    Tensor<T> y_hat({cfg_.m, yh, yw});
    const std::int64_t plane = static_cast<std::int64_t>(yh) * yw;
    if (!cfg_.two_slice) {
      auto [mu_v, sg_v] = entropy_params(feats);
      code_slice(mu_v->value, sg_v->value, 0, y, io_symbols, &y_hat, est_bits, dec, enc);
    } else {
      const int half = cfg_.m / 2;
      auto [mu0, sg0] = slice_params(feats, 0, nullptr);
      code_slice(mu0->value, sg0->value, 0, y, io_symbols, &y_hat, est_bits, dec, enc);
      Tensor<T> ctx({half, yh, yw});
      std::copy(y_hat.data.begin(), y_hat.data.begin() + half * plane, ctx.data.begin());
      auto [mu1, sg1] = slice_params(feats, 1, make_leaf<T>(ctx));
      code_slice(mu1->value, sg1->value, half * plane, y, io_symbols, &y_hat, est_bits,
                 dec, enc);
    }
    if (y_hat_out) *y_hat_out = std::move(y_hat);
  }

  // Serializes symbols with the shared sigma-bucket tables / factorized
  // tables. Byte streams round-trip exactly.
  std::vector<std::uint8_t> code_y_stream(const Coded& c, const Tensor<T>& h_hat) const {
    RangeEncoder enc;
    std::vector<int> symbols = c.y_symbols;
    dequantize_with_params(h_hat, c.y_shape[1], c.y_shape[2], nullptr, &symbols, nullptr,
                           nullptr, nullptr, &enc);
    return enc.finish();
  }

  std::vector<std::uint8_t> code_h_stream(const Coded& c) const {
    RangeEncoder enc;
    const std::int64_t plane =
        static_cast<std::int64_t>(c.h_shape[1]) * c.h_shape[2];
    for (size_t i = 0; i < c.h_symbols.size(); ++i) {
      const int ch = static_cast<int>(static_cast<std::int64_t>(i) / plane);
      enc.encode_symbol(c.h_symbols[i], prior_table(ch));
    }
    return enc.finish();
  }

  struct Decoded {
    Tensor<T> x_hat;
    Tensor<T> h_hat;
    std::vector<int> y_symbols, h_symbols;
  };

  Decoded decode_streams(std::span<const std::uint8_t> y_stream,
                         std::span<const std::uint8_t> h_stream,
                         const std::vector<int>& y_shape,
                         const std::vector<int>& h_shape) const {
    NoGradGuard ng;
    Decoded d;
    const std::int64_t hplane = static_cast<std::int64_t>(h_shape[1]) * h_shape[2];
    const std::int64_t hn = static_cast<std::int64_t>(h_shape[0]) * hplane;
    RangeDecoder hdec(h_stream);
    d.h_symbols.resize(static_cast<size_t>(hn));
    d.h_hat = Tensor<T>(h_shape);
    for (std::int64_t i = 0; i < hn; ++i) {
      const int ch = static_cast<int>(i / hplane);
      d.h_symbols[static_cast<size_t>(i)] = hdec.decode_symbol(prior_table(ch));
      d.h_hat[i] = static_cast<T>(d.h_symbols[static_cast<size_t>(i)]);
    }
    RangeDecoder ydec(y_stream);
    d.y_symbols.assign(static_cast<size_t>(Tensor<T>::count(y_shape)), 0);
    Tensor<T> y_hat;
    double dummy = 0;
    dequantize_with_params(d.h_hat, y_shape[1], y_shape[2], nullptr, &d.y_symbols, &y_hat,
                           &dummy, &ydec, nullptr);
    d.x_hat = synthesize(make_leaf<T>(y_hat))->value;
    return d;
  }

  double estimate_prior_bits(const std::vector<int>& h_symbols,
                             const std::vector<int>& h_shape) const {
    const std::int64_t plane = static_cast<std::int64_t>(h_shape[1]) * h_shape[2];
    double bits = 0;
    for (size_t i = 0; i < h_symbols.size(); ++i) {
      const int ch = static_cast<int>(static_cast<std::int64_t>(i) / plane);
      double p = prior_.cdf_value(ch, h_symbols[i] + 0.5) -
                 prior_.cdf_value(ch, h_symbols[i] - 0.5);
      if (p < 1e-9) p = 1e-9;
      bits -= std::log2(p);
    }
    return bits;
  }

  // Per-channel factorized coding tables, rebuilt when parameters change.
  const CdfTable& prior_table(int channel) const {
    if (prior_tables_.empty()) {
      prior_tables_.resize(static_cast<size_t>(cfg_.n));
      for (int c = 0; c < cfg_.n; ++c)
        prior_tables_[static_cast<size_t>(c)] =
            prior_.table(c, kSymbolSupportLo, kSymbolSupportHi);
    }
    return prior_tables_[static_cast<size_t>(channel)];
  }

  void invalidate_tables() { prior_tables_.clear(); }

 private:
  // Quantizes/encodes or decodes one contiguous channel block, given its
  // per-element Gaussian parameters. Offsets index the flattened layout.
  void code_slice(const Tensor<T>& mu, const Tensor<T>& sigma, std::int64_t base,
                  const Tensor<T>* y, std::vector<int>* io_symbols, Tensor<T>* y_hat,
                  double* est_bits, RangeDecoder* dec, RangeEncoder* enc) const {
    for (std::int64_t i = 0; i < mu.numel(); ++i) {
      const double m = static_cast<double>(mu[i]);
      const double s = static_cast<double>(sigma[i]);
      int k;
      if (dec) {
        k = dec->decode_symbol(gaussian_bucket_table(sigma_bucket_index(s)));
        (*io_symbols)[static_cast<size_t>(base + i)] = k;
      } else if (y) {
        long kk = std::lround(static_cast<double>(y->data[static_cast<size_t>(base + i)]) - m);
        if (kk < kSymbolSupportLo) kk = kSymbolSupportLo;
        if (kk > kSymbolSupportHi) kk = kSymbolSupportHi;
        k = static_cast<int>(kk);
        io_symbols->operator[](static_cast<size_t>(base + i)) = k;
      } else {
        k = (*io_symbols)[static_cast<size_t>(base + i)];
      }
      if (enc) enc->encode_symbol(k, gaussian_bucket_table(sigma_bucket_index(s)));
      if (est_bits) {
        double p = ops::std_normal_cdf((k + 0.5) / s) - ops::std_normal_cdf((k - 0.5) / s);
        if (p < 1e-9) p = 1e-9;
        *est_bits += -std::log2(p);
      }
      y_hat->data[static_cast<size_t>(base + i)] = static_cast<T>(m) + static_cast<T>(k);
    }
  }

  CodecConfig cfg_;
  Conv2d<T> a0_; GDN<T> g0_;
  Conv2d<T> a1_; GDN<T> g1_;
  Conv2d<T> a2_; GDN<T> g2_;
  Conv2d<T> a3_;
  ConvTranspose2d<T> s0_; GDN<T> i0_;
  ConvTranspose2d<T> s1_; GDN<T> i1_;
  ConvTranspose2d<T> s2_; GDN<T> i2_;
  ConvTranspose2d<T> s3_;
  Conv2d<T> ha0_, ha1_, ha2_;
  ConvTranspose2d<T> hs0_, hs1_;
  Conv2d<T> hs2_;
  FactorizedPrior<T> prior_;
  std::unique_ptr<Conv2d<T>> slice0_, slice1_;
  mutable std::vector<CdfTable> prior_tables_;
};

}  // namespace ugdiff
