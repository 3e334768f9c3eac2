#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ugdiff/ops.hpp"
#include "ugdiff/random.hpp"

namespace ugdiff {

// Trainable tensor plus its Adam state.
template <typename T>
struct Parameter {
  Var<T> var;
  Tensor<T> adam_m, adam_v;
  std::int64_t step_count = 0;

  explicit Parameter(Tensor<T> init) {
    adam_m = Tensor<T>(init.shape);
    adam_v = Tensor<T>(init.shape);
    var = make_leaf<T>(std::move(init), /*requires_grad=*/true);
  }

  Tensor<T>& value() { return var->value; }
  const Tensor<T>& value() const { return var->value; }
};

template <typename T>
using ParamPtr = std::shared_ptr<Parameter<T>>;

// Base for anything with named parameters. Names are hierarchical
// ("analysis.conv0.weight") and drive the checkpoint format.
template <typename T>
class Module {
 public:
  virtual ~Module() = default;

  void named_parameters(const std::string& prefix,
                        std::vector<std::pair<std::string, ParamPtr<T>>>& out) const {
    for (const auto& [name, p] : params_)
      out.emplace_back(prefix.empty() ? name : prefix + "." + name, p);
    for (const auto& [name, m] : children_)
      m->named_parameters(prefix.empty() ? name : prefix + "." + name, out);
  }

  std::vector<std::pair<std::string, ParamPtr<T>>> named_parameters() const {
    std::vector<std::pair<std::string, ParamPtr<T>>> out;
    named_parameters("", out);
    return out;
  }

  std::vector<ParamPtr<T>> parameters() const {
    std::vector<ParamPtr<T>> out;
    for (const auto& [name, p] : named_parameters()) out.push_back(p);
    return out;
  }

 protected:
  ParamPtr<T> add_param(const std::string& name, Tensor<T> init) {
    auto p = std::make_shared<Parameter<T>>(std::move(init));
    params_.emplace_back(name, p);
    return p;
  }

  void add_child(const std::string& name, Module<T>* m) { children_.emplace_back(name, m); }

 private:
  std::vector<std::pair<std::string, ParamPtr<T>>> params_;
  std::vector<std::pair<std::string, Module<T>*>> children_;
};

inline double softplus_inverse(double y) { return std::log(std::expm1(y)); }

// ---------------------------------------------------------------------------
// Layers.
// ---------------------------------------------------------------------------

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d(int in_ch, int out_ch, int k, int stride, int pad, RandomEngine& rng)
      : stride_(stride), pad_(pad) {
    Tensor<T> w({out_ch, in_ch, k, k});
    const double bound = std::sqrt(6.0 / (static_cast<double>(in_ch) * k * k));
    rng.fill_uniform(w, -bound, bound);
    Tensor<T> b({out_ch});
    rng.fill_uniform(b, -bound, bound);
    weight = this->add_param("weight", std::move(w));
    bias = this->add_param("bias", std::move(b));
  }

  Var<T> operator()(const Var<T>& x) const {
    return ops::conv2d(x, weight->var, bias->var, stride_, pad_);
  }

  void zero_init() {
    weight->value().fill(T(0));
    bias->value().fill(T(0));
  }

  ParamPtr<T> weight, bias;

 private:
  int stride_, pad_;
};

template <typename T>
class ConvTranspose2d : public Module<T> {
 public:
  ConvTranspose2d(int in_ch, int out_ch, int k, int stride, int pad, int out_pad,
                  RandomEngine& rng)
      : stride_(stride), pad_(pad), out_pad_(out_pad) {
    Tensor<T> w({in_ch, out_ch, k, k});
    const double bound = std::sqrt(6.0 / (static_cast<double>(in_ch) * k * k));
    rng.fill_uniform(w, -bound, bound);
    Tensor<T> b({out_ch});
    rng.fill_uniform(b, -bound, bound);
    weight = this->add_param("weight", std::move(w));
    bias = this->add_param("bias", std::move(b));
  }

  Var<T> operator()(const Var<T>& x) const {
    return ops::conv_transpose2d(x, weight->var, bias->var, stride_, pad_, out_pad_);
  }

  ParamPtr<T> weight, bias;

 private:
  int stride_, pad_, out_pad_;
};

// GDN / IGDN with the positivity constraints folded into a softplus
// reparameterization, so raw parameters are unconstrained.
template <typename T>
class GDN : public Module<T> {
 public:
  explicit GDN(int channels, bool inverse) : inverse_(inverse) {
    Tensor<T> braw({channels}, static_cast<T>(softplus_inverse(1.0)));
    Tensor<T> graw({channels, channels}, static_cast<T>(softplus_inverse(1e-4)));
    beta_raw = this->add_param("beta_raw", std::move(braw));
    gamma_raw = this->add_param("gamma_raw", std::move(graw));
  }

  Var<T> operator()(const Var<T>& x) const {
    auto beta = ops::add_const(ops::softplus(beta_raw->var), 1e-6);
    auto gamma = ops::softplus(gamma_raw->var);
    return ops::gdn(x, beta, gamma, inverse_);
  }

  ParamPtr<T> beta_raw, gamma_raw;

 private:
  bool inverse_;
};

template <typename T>
class Linear : public Module<T> {
 public:
  Linear(int in_dim, int out_dim, RandomEngine& rng) {
    Tensor<T> w({out_dim, in_dim});
    const double bound = std::sqrt(6.0 / in_dim);
    rng.fill_uniform(w, -bound, bound);
    Tensor<T> b({out_dim});
    rng.fill_uniform(b, -bound, bound);
    weight = this->add_param("weight", std::move(w));
    bias = this->add_param("bias", std::move(b));
  }

  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight->var, bias->var); }

  ParamPtr<T> weight, bias;
};

// Single-head self-attention over all spatial sites of a [C,H,W] map. The
// output projection starts at zero so the block is initially the identity.
template <typename T>
class SelfAttention2d : public Module<T> {
 public:
  SelfAttention2d(int channels, RandomEngine& rng) : channels_(channels) {
    auto make = [&](double s) {
      Tensor<T> w({channels, channels});
      rng.fill_uniform(w, -s, s);
      return w;
    };
    const double bound = std::sqrt(6.0 / channels);
    wq = this->add_param("wq", make(bound));
    wk = this->add_param("wk", make(bound));
    wv = this->add_param("wv", make(bound));
    wo = this->add_param("wo", Tensor<T>({channels, channels}));
  }

  Var<T> operator()(const Var<T>& x) const {
    const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    check_shape(c == channels_, "self_attention channels");
    auto flat = ops::reshape(x, {c, h * w});
    auto q = ops::matmul(wq->var, flat);
    auto k = ops::matmul(wk->var, flat);
    auto v = ops::matmul(wv->var, flat);
    auto scores = ops::scale(ops::matmul(ops::transpose(q), k), 1.0 / std::sqrt(double(c)));
    auto attn = ops::softmax_rows(scores);
    auto mixed = ops::matmul(v, ops::transpose(attn));
    return ops::add(x, ops::reshape(ops::matmul(wo->var, mixed), {c, h, w}));
  }

  ParamPtr<T> wq, wk, wv, wo;

 private:
  int channels_;
};

// Sinusoidal timestep features; a leaf tensor, the MLP on top is trainable.
template <typename T>
Tensor<T> timestep_embedding(int t, int dim) {
  Tensor<T> e({dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    e[i] = static_cast<T>(std::sin(t * freq));
    e[half + i] = static_cast<T>(std::cos(t * freq));
  }
  return e;
}

}  // namespace ugdiff
