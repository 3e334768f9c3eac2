#pragma once

#include <memory>
#include <vector>

#include "ugdiff/diffusion.hpp"
#include "ugdiff/layers.hpp"

namespace ugdiff {

// Residual conv block with a timestep bias injected between the convs.
template <typename T>
class ResBlock : public Module<T> {
 public:
  ResBlock(int in_ch, int out_ch, int t_dim, RandomEngine& rng)
      : conv1_(in_ch, out_ch, 3, 1, 1, rng),
        conv2_(out_ch, out_ch, 3, 1, 1, rng),
        t_proj_(t_dim, out_ch, rng),
        skip_(in_ch == out_ch ? nullptr : new Conv2d<T>(in_ch, out_ch, 1, 1, 0, rng)) {
    this->add_child("conv1", &conv1_);
    this->add_child("conv2", &conv2_);
    this->add_child("t_proj", &t_proj_);
    if (skip_) this->add_child("skip", skip_.get());
  }

  Var<T> operator()(const Var<T>& x, const Var<T>& temb) const {
    auto h = conv1_(ops::silu(x));
    h = ops::add_channel_bias(h, t_proj_(temb));
    h = conv2_(ops::silu(h));
    auto s = skip_ ? (*skip_)(x) : x;
    return ops::add(s, h);
  }

 private:
  Conv2d<T> conv1_, conv2_;
  Linear<T> t_proj_;
  std::unique_ptr<Conv2d<T>> skip_;
};

// Conditional noise predictor over the stacked high-frequency bands. The
// condition is concatenated to x_t at the input; two stride-2 stages, an
// attention block at the lowest resolution, and a zero-initialized head so
// the untrained predictor outputs zero noise.
template <typename T>
class DenoiserUNet : public Module<T> {
 public:
  struct Config {
    int bands = 9;      // channels of x_t and of the condition
    int width = 16;     // base channel count
    int mult1 = 2;      // width multiplier after the first downsample
    int mult2 = 4;      // after the second
    int t_dim = 64;
    bool attention = true;
  };

  DenoiserUNet(const Config& cfg, RandomEngine& rng)
      : cfg_(cfg),
        w0_(cfg.width),
        w1_(cfg.width * cfg.mult1),
        w2_(cfg.width * cfg.mult2),
        t_lin1_(cfg.t_dim, cfg.t_dim, rng),
        t_lin2_(cfg.t_dim, cfg.t_dim, rng),
        stem_(2 * cfg.bands, w0_, 3, 1, 1, rng),
        rb_down1_(w0_, w0_, cfg.t_dim, rng),
        down1_(w0_, w1_, 3, 2, 1, rng),
        rb_down2_(w1_, w1_, cfg.t_dim, rng),
        down2_(w1_, w2_, 3, 2, 1, rng),
        rb_mid1_(w2_, w2_, cfg.t_dim, rng),
        rb_mid2_(w2_, w2_, cfg.t_dim, rng),
        attn_(cfg.attention ? new SelfAttention2d<T>(w2_, rng) : nullptr),
        up2_(w2_, w1_, 2, 2, 0, 0, rng),
        rb_up2_(2 * w1_, w1_, cfg.t_dim, rng),
        up1_(w1_, w0_, 2, 2, 0, 0, rng),
        rb_up1_(2 * w0_, w0_, cfg.t_dim, rng),
        head_(w0_, cfg.bands, 3, 1, 1, rng) {
    this->add_child("t_lin1", &t_lin1_);
    this->add_child("t_lin2", &t_lin2_);
    this->add_child("stem", &stem_);
    this->add_child("rb_down1", &rb_down1_);
    this->add_child("down1", &down1_);
    this->add_child("rb_down2", &rb_down2_);
    this->add_child("down2", &down2_);
    this->add_child("rb_mid1", &rb_mid1_);
    this->add_child("rb_mid2", &rb_mid2_);
    if (attn_) this->add_child("attn", attn_.get());
    this->add_child("up2", &up2_);
    this->add_child("rb_up2", &rb_up2_);
    this->add_child("up1", &up1_);
    this->add_child("rb_up1", &rb_up1_);
    this->add_child("head", &head_);
    head_.zero_init();
  }

  const Config& config() const { return cfg_; }

  Var<T> operator()(const Var<T>& x_t, int t, const Var<T>& condition) const {
    check_shape(x_t->value.same_shape(condition->value), "denoiser x_t vs condition");
    check_shape(x_t->value.dim(1) % 4 == 0 && x_t->value.dim(2) % 4 == 0,
                "denoiser input extents must be divisible by 4");
    auto temb = make_leaf<T>(timestep_embedding<T>(t, cfg_.t_dim));
    auto tfeat = t_lin2_(ops::silu(t_lin1_(temb)));

    auto h0 = stem_(ops::concat_ch(x_t, condition));
    auto s1 = rb_down1_(h0, tfeat);
    auto h1 = down1_(s1);
    auto s2 = rb_down2_(h1, tfeat);
    auto h2 = down2_(s2);
    auto m = rb_mid1_(h2, tfeat);
    if (attn_) m = (*attn_)(m);
    m = rb_mid2_(m, tfeat);
    auto u2 = rb_up2_(ops::concat_ch(up2_(m), s2), tfeat);
    auto u1 = rb_up1_(ops::concat_ch(up1_(u2), s1), tfeat);
    return head_(ops::silu(u1));
  }

  // Inference closure for the sampler.
  DenoiseFn<T> inference_fn() const {
    return [this](const Tensor<T>& x_t, int t, const Tensor<T>& cond) {
      NoGradGuard ng;
      auto out = (*this)(make_leaf<T>(x_t), t, make_leaf<T>(cond));
      return out->value;
    };
  }

  DenoiseGraphFn<T> graph_fn() {
    return [this](const Var<T>& x_t, int t, const Var<T>& cond) {
      return (*this)(x_t, t, cond);
    };
  }

 private:
  Config cfg_;
  int w0_, w1_, w2_;
  Linear<T> t_lin1_, t_lin2_;
  Conv2d<T> stem_;
  ResBlock<T> rb_down1_;
  Conv2d<T> down1_;
  ResBlock<T> rb_down2_;
  Conv2d<T> down2_;
  ResBlock<T> rb_mid1_, rb_mid2_;
  std::unique_ptr<SelfAttention2d<T>> attn_;
  ConvTranspose2d<T> up2_;
  ResBlock<T> rb_up2_;
  ConvTranspose2d<T> up1_;
  ResBlock<T> rb_up1_;
  Conv2d<T> head_;
};

}  // namespace ugdiff
