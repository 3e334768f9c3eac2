#include <benchmark/benchmark.h>

#include "ugdiff/adam.hpp"
#include "ugdiff/codec.hpp"
#include "ugdiff/denoiser.hpp"

using namespace ugdiff;

static void bm_conv2d_forward(benchmark::State& state) {
  RandomEngine rng(1);
  const int c = static_cast<int>(state.range(0));
  Conv2d<float> conv(c, c, 3, 1, 1, rng);
  Tensor<float> x({c, 32, 32});
  rng.fill_normal(x);
  NoGradGuard ng;
  for (auto _ : state) {
    auto y = conv(make_leaf(x));
    benchmark::DoNotOptimize(y->value.data.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * c * c * 9 * 32 * 32);
}
BENCHMARK(bm_conv2d_forward)->Arg(16)->Arg(32)->Arg(64);

static void bm_conv2d_train_step(benchmark::State& state) {
  RandomEngine rng(2);
  const int c = static_cast<int>(state.range(0));
  Conv2d<float> conv(c, c, 3, 1, 1, rng);
  Tensor<float> x({c, 32, 32});
  rng.fill_normal(x);
  AdamOptimizer<float> opt(conv.parameters(), 1e-4);
  for (auto _ : state) {
    opt.zero_grad();
    auto loss = ops::mean(ops::square(conv(make_leaf(x, true))));
    backward(loss);
    opt.step();
    benchmark::DoNotOptimize(loss->value[0]);
  }
}
BENCHMARK(bm_conv2d_train_step)->Arg(16)->Arg(32);

static void bm_denoiser_eval(benchmark::State& state) {
  RandomEngine rng(3);
  DenoiserUNet<float>::Config cfg;
  cfg.width = 16;
  cfg.mult1 = 2;
  cfg.mult2 = 4;
  DenoiserUNet<float> net(cfg, rng);
  Tensor<float> x({9, 32, 32}), cond({9, 32, 32});
  rng.fill_normal(x);
  rng.fill_normal(cond);
  auto fn = net.inference_fn();
  for (auto _ : state) {
    auto out = fn(x, 50, cond);
    benchmark::DoNotOptimize(out.data.data());
  }
}
BENCHMARK(bm_denoiser_eval);

static void bm_codec_train_forward(benchmark::State& state) {
  RandomEngine rng(4);
  CodecConfig cc{3, 32, 48, false};
  CodecModel<float> codec(cc, rng);
  Tensor<float> x({3, 32, 32});
  rng.fill_uniform(x, 0, 1);
  RandomEngine noise(5);
  for (auto _ : state) {
    auto fw = codec.train_forward(x, noise);
    auto loss = rd_loss(fw.x, fw.x_hat, fw.bits_y, fw.bits_h, 0.1);
    backward(loss);
    benchmark::DoNotOptimize(loss->value[0]);
  }
}
BENCHMARK(bm_codec_train_forward);

BENCHMARK_MAIN();
