#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "testutil.hpp"
#include "ugdiff/codec.hpp"
#include "ugdiff/entropy_model.hpp"
#include "ugdiff/layers.hpp"
#include "ugdiff/uncertainty.hpp"

using namespace ugdiff;
using testutil::GradCheck;
using testutil::leaf_of;
using testutil::random_tensor;

namespace {

// Collects a module's parameter leaves next to explicit input leaves.
std::vector<Var<double>> with_params(std::vector<Var<double>> leaves, Module<double>& m) {
  for (auto& p : m.parameters()) leaves.push_back(p->var);
  return leaves;
}

}  // namespace

TEST_CASE("conv2d gradients (stride 1 and 2) match finite differences") {
  RandomEngine rng(11);
  for (int stride : {1, 2}) {
    Conv2d<double> conv(2, 3, 3, stride, 1, rng);
    auto x = leaf_of(random_tensor({2, 6, 6}, rng));
    GradCheck gc{with_params({x}, conv),
                 [&] { return ops::mean(ops::square(conv(x))); }};
    CHECK(gc.max_rel_error() < 1e-3);
  }
}

TEST_CASE("conv_transpose2d gradients match finite differences") {
  RandomEngine rng(12);
  ConvTranspose2d<double> deconv(3, 2, 5, 2, 2, 1, rng);
  auto x = leaf_of(random_tensor({3, 4, 4}, rng));
  GradCheck gc{with_params({x}, deconv),
               [&] { return ops::mean(ops::square(deconv(x))); }};
  CHECK(gc.max_rel_error() < 1e-3);
}

TEST_CASE("gdn and igdn gradients match finite differences") {
  RandomEngine rng(13);
  for (bool inverse : {false, true}) {
    GDN<double> gdn(3, inverse);
    // Keep x away from zero so the kernel is smooth at the probe points.
    auto x = leaf_of(random_tensor({3, 4, 4}, rng));
    GradCheck gc{with_params({x}, gdn), [&] { return ops::mean(ops::square(gdn(x))); }};
    CHECK(gc.max_rel_error() < 1e-3);
  }
}

TEST_CASE("gdn identity and scalar cases") {
  // gamma = 0, beta = 1 reduces to the identity.
  RandomEngine rng(14);
  Tensor<double> x = random_tensor({2, 3, 3}, rng);
  auto beta = make_leaf<double>(Tensor<double>({2}, 1.0));
  auto gamma = make_leaf<double>(Tensor<double>({2, 2}));
  auto y = ops::gdn(make_leaf(x), beta, gamma, false);
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y->value[i] == doctest::Approx(x[i]));

  // C=1, x=1, beta=1, gamma=1 -> 1/sqrt(2).
  auto one = make_leaf<double>(Tensor<double>({1, 1, 1}, 1.0));
  auto b1 = make_leaf<double>(Tensor<double>({1}, 1.0));
  auto g1 = make_leaf<double>(Tensor<double>({1, 1}, 1.0));
  CHECK(ops::gdn(one, b1, g1, false)->value[0] == doctest::Approx(0.70710678).epsilon(1e-6));
}

TEST_CASE("igdn undoes gdn when the normalizer is recomputed") {
  // Only exact with a shared normalizer; at the documented init scale
  // (beta 1, gamma 1e-4) the recomputed round trip stays within 1e-3.
  RandomEngine rng(15);
  Tensor<double> x({2, 4, 4});
  rng.fill_uniform(x, -8.0, 8.0);
  auto beta = make_leaf<double>(Tensor<double>({2}, 1.0));
  auto gamma = make_leaf<double>(Tensor<double>({2, 2}, 1e-4));
  auto fwd = ops::gdn(make_leaf(x), beta, gamma, false);
  auto back = ops::gdn(fwd, beta, gamma, true);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(std::fabs(back->value[i] - x[i]) <= 1e-3);
}

TEST_CASE("gdn rejects non-positive beta") {
  auto x = make_leaf<double>(Tensor<double>({1, 2, 2}, 1.0));
  auto beta = make_leaf<double>(Tensor<double>({1}, 0.0));
  auto gamma = make_leaf<double>(Tensor<double>({1, 1}, 0.1));
  CHECK_THROWS_AS(ops::gdn(x, beta, gamma, false), std::runtime_error);
}

TEST_CASE("linear, attention and activation gradients match finite differences") {
  RandomEngine rng(16);
  Linear<double> lin(5, 4, rng);
  auto xv = leaf_of(random_tensor({5}, rng));
  GradCheck gl{with_params({xv}, lin), [&] { return ops::mean(ops::square(lin(xv))); }};
  CHECK(gl.max_rel_error() < 1e-3);

  SelfAttention2d<double> attn(4, rng);
  // Zero-initialized output projection has zero gradient to wq/wk/wv; nudge it.
  rng.fill_normal(attn.wo->value(), 0.3);
  auto xa = leaf_of(random_tensor({4, 3, 3}, rng));
  GradCheck ga{with_params({xa}, attn), [&] { return ops::mean(ops::square(attn(xa))); }};
  CHECK(ga.max_rel_error() < 1e-3);

  auto xu = leaf_of(random_tensor({3, 3}, rng));
  for (auto fn : {+[](const Var<double>& v) { return ops::silu(v); },
                  +[](const Var<double>& v) { return ops::softplus(v); },
                  +[](const Var<double>& v) { return ops::tanh(v); },
                  +[](const Var<double>& v) { return ops::sigmoid(v); }}) {
    GradCheck gu{{xu}, [&] { return ops::mean(ops::square(fn(xu))); }};
    CHECK(gu.max_rel_error() < 1e-3);
  }
}

TEST_CASE("maxpool gradients match finite differences away from ties") {
  RandomEngine rng(17);
  auto x = leaf_of(random_tensor({2, 4, 4}, rng));
  GradCheck gc{{x}, [&] { return ops::mean(ops::square(ops::maxpool2x2(x))); }};
  CHECK(gc.max_rel_error() < 1e-3);
}

TEST_CASE("gaussian bin probability gradients match finite differences") {
  RandomEngine rng(18);
  auto v = leaf_of(random_tensor({2, 3, 3}, rng));
  auto mu = leaf_of(random_tensor({2, 3, 3}, rng));
  Tensor<double> s({2, 3, 3});
  rng.fill_uniform(s, 0.3, 3.0);
  auto sigma = leaf_of(s);
  GradCheck gc{{v, mu, sigma},
               [&] { return ops::mean(ops::log(ops::gaussian_bin_prob(v, mu, sigma))); }};
  CHECK(gc.max_rel_error() < 1e-3);
}

TEST_CASE("factorized prior gradients match finite differences") {
  RandomEngine rng(19);
  FactorizedPrior<double> prior(2, rng);
  auto v = leaf_of(random_tensor({2, 2, 2}, rng, 2.0));
  GradCheck gc{with_params({v}, prior),
               [&] { return ops::mean(ops::log(prior.bin_prob(v))); }};
  CHECK(gc.max_rel_error() < 1e-3);
}

TEST_CASE("rate-distortion losses pass finite-difference checks end to end") {
  RandomEngine rng(20);
  CodecConfig cc{3, 4, 6, false};
  CodecModel<double> codec(cc, rng);
  Tensor<double> input({3, 16, 16});
  rng.fill_uniform(input, 0.0, 1.0);

  // Fixed quantization noise so the loss is a deterministic function.
  SUBCASE("plain R-D loss") {
    GradCheck gc{with_params({}, codec), [&] {
                   RandomEngine noise(99);
                   auto fw = codec.train_forward(input, noise);
                   return rd_loss(fw.x, fw.x_hat, fw.bits_y, fw.bits_h, 0.1);
                 }};
    gc.max_checks_per_tensor = 3;
    CHECK(gc.max_rel_error() < 1e-3);
  }
  SUBCASE("uncertainty-weighted R-D loss") {
    Tensor<double> delta({3, 16, 16});
    rng.fill_uniform(delta, 0.0, 0.5);
    Tensor<double> w = build_weight_map(delta, 0.1);
    GradCheck gc{with_params({}, codec), [&] {
                   RandomEngine noise(99);
                   auto fw = codec.train_forward(input, noise);
                   return urd_loss(fw.x, fw.x_hat, fw.bits_y, fw.bits_h, w);
                 }};
    gc.max_checks_per_tensor = 3;
    CHECK(gc.max_rel_error() < 1e-3);
  }
}
