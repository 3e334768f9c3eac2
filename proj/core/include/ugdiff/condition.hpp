#pragma once

#include <array>
#include <memory>

#include "ugdiff/layers.hpp"

namespace ugdiff {

// Maps a reconstructed low band (3 channels) to a refined estimate of the
// nine high-band channels. U-Net: four [conv-conv-pool] encoder stages and
// four [upsample-concat-conv-conv] decoder stages; the final conv starts at
// zero so the untrained net is the zero predictor.
template <typename T>
class ConditionNet : public Module<T> {
 public:
  struct Config {
    int in_ch = 3;
    int out_ch = 9;
    std::array<int, 4> widths = {32, 64, 128, 256};
  };

  ConditionNet(const Config& cfg, RandomEngine& rng) : cfg_(cfg) {
    int prev = cfg.in_ch;
    for (int i = 0; i < 4; ++i) {
      enc1_[i] = std::make_unique<Conv2d<T>>(prev, cfg.widths[i], 3, 1, 1, rng);
      enc2_[i] = std::make_unique<Conv2d<T>>(cfg.widths[i], cfg.widths[i], 3, 1, 1, rng);
      this->add_child("enc" + std::to_string(i) + "a", enc1_[i].get());
      this->add_child("enc" + std::to_string(i) + "b", enc2_[i].get());
      prev = cfg.widths[i];
    }
    for (int i = 0; i < 4; ++i) {
      // Decoder stage i consumes the bottom feature (or previous stage) and
      // the skip from encoder stage 3-i.
      const int skip_ch = cfg.widths[3 - i];
      const int up_out = skip_ch;
      up_[i] = std::make_unique<ConvTranspose2d<T>>(prev, up_out, 2, 2, 0, 0, rng);
      dec1_[i] = std::make_unique<Conv2d<T>>(up_out + skip_ch, skip_ch, 3, 1, 1, rng);
      dec2_[i] = std::make_unique<Conv2d<T>>(skip_ch, skip_ch, 3, 1, 1, rng);
      this->add_child("up" + std::to_string(i), up_[i].get());
      this->add_child("dec" + std::to_string(i) + "a", dec1_[i].get());
      this->add_child("dec" + std::to_string(i) + "b", dec2_[i].get());
      prev = skip_ch;
    }
    head_ = std::make_unique<Conv2d<T>>(prev, cfg.out_ch, 3, 1, 1, rng);
    this->add_child("head", head_.get());
    head_->zero_init();
  }

  const Config& config() const { return cfg_; }

  Var<T> operator()(const Var<T>& x) const {
    check_shape(x->value.ndim() == 3 && x->value.dim(0) == cfg_.in_ch &&
                    x->value.dim(1) % 16 == 0 && x->value.dim(2) % 16 == 0,
                "condition net input " + shape_str(x->value.shape));
    std::array<Var<T>, 4> skips;
    Var<T> h = x;
    for (int i = 0; i < 4; ++i) {
      h = ops::relu((*enc1_[i])(h));
      h = ops::relu((*enc2_[i])(h));
      skips[i] = h;
      h = ops::maxpool2x2(h);
    }
    for (int i = 0; i < 4; ++i) {
      h = ops::concat_ch((*up_[i])(h), skips[3 - i]);
      h = ops::relu((*dec1_[i])(h));
      h = ops::relu((*dec2_[i])(h));
    }
    return (*head_)(h);
  }

  // Tensor-level inference with reflect pad-and-trim for extents that are
  // not multiples of 16.
  Tensor<T> generate(const Tensor<T>& low_band) const;

 private:
  Config cfg_;
  std::array<std::unique_ptr<Conv2d<T>>, 4> enc1_, enc2_;
  std::array<std::unique_ptr<ConvTranspose2d<T>>, 4> up_;
  std::array<std::unique_ptr<Conv2d<T>>, 4> dec1_, dec2_;
  std::unique_ptr<Conv2d<T>> head_;
};

// Per-element mean squared error against the true high bands.
template <typename T>
Var<T> condition_loss(const Var<T>& predicted, const Var<T>& target) {
  check_shape(predicted->value.same_shape(target->value), "condition_loss operands");
  return ops::mean(ops::square(ops::sub(predicted, target)));
}

// Folded mirror index; repeats the reflection for targets beyond 2h-2.
inline int mirror_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n - 2;
  int m = i % period;
  return m < n ? m : period - m;
}

// Reflect padding on the bottom/right edges of a [C,H,W] tensor.
template <typename T>
Tensor<T> pad_reflect_to(const Tensor<T>& x, int target_h, int target_w) {
  const int c_n = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (target_h == h && target_w == w) return x;
  check_shape(target_h >= h && target_w >= w, "pad_reflect_to target smaller than input");
  Tensor<T> out({c_n, target_h, target_w});
  for (int c = 0; c < c_n; ++c)
    for (int y = 0; y < target_h; ++y) {
      const int sy = mirror_index(y, h);
      for (int x2 = 0; x2 < target_w; ++x2) {
        const int sx = mirror_index(x2, w);
        out.at(c, y, x2) = x.at(c, sy, sx);
      }
    }
  return out;
}

template <typename T>
Tensor<T> crop_to(const Tensor<T>& x, int target_h, int target_w) {
  const int c_n = x.dim(0);
  if (x.dim(1) == target_h && x.dim(2) == target_w) return x;
  check_shape(x.dim(1) >= target_h && x.dim(2) >= target_w, "crop_to target larger than input");
  Tensor<T> out({c_n, target_h, target_w});
  for (int c = 0; c < c_n; ++c)
    for (int y = 0; y < target_h; ++y)
      for (int x2 = 0; x2 < target_w; ++x2) out.at(c, y, x2) = x.at(c, y, x2);
  return out;
}

template <typename T>
Tensor<T> ConditionNet<T>::generate(const Tensor<T>& low_band) const {
  NoGradGuard ng;
  const int h = low_band.dim(1), w = low_band.dim(2);
  const int ph = (h + 15) / 16 * 16, pw = (w + 15) / 16 * 16;
  auto out = (*this)(make_leaf<T>(pad_reflect_to(low_band, ph, pw)))->value;
  return crop_to(out, h, w);
}

}  // namespace ugdiff
