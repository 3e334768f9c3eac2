#include <benchmark/benchmark.h>

#include "ugdiff/random.hpp"
#include "ugdiff/wavelet.hpp"

using namespace ugdiff;

static Tensor<float> make_image(int h, int w) {
  Tensor<float> img({3, h, w});
  RandomEngine rng(1);
  rng.fill_uniform(img, 0, 1);
  return img;
}

static void bm_dwt2(benchmark::State& state) {
  auto img = make_image(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  for (auto _ : state) {
    auto pyr = dwt2(img);
    benchmark::DoNotOptimize(pyr.ll.data.data());
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations()) * img.numel() * 4);
}
BENCHMARK(bm_dwt2)->Args({512, 768})->Args({600, 600});

static void bm_idwt2(benchmark::State& state) {
  auto pyr = dwt2(make_image(static_cast<int>(state.range(0)), static_cast<int>(state.range(1))));
  for (auto _ : state) {
    auto img = idwt2(pyr);
    benchmark::DoNotOptimize(img.data.data());
  }
}
BENCHMARK(bm_idwt2)->Args({512, 768});

static void bm_roundtrip(benchmark::State& state) {
  auto img = make_image(511, 767);  // odd extents: reflect pad + trim
  for (auto _ : state) {
    auto rec = idwt2(dwt2(img));
    benchmark::DoNotOptimize(rec.data.data());
  }
}
BENCHMARK(bm_roundtrip);

BENCHMARK_MAIN();
