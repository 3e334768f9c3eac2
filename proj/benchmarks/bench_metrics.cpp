#include <benchmark/benchmark.h>

#include "testutil.hpp"
#include "ugdiff/metrics.hpp"

using namespace ugdiff;

static void bm_psnr(benchmark::State& state) {
  auto a = testutil::synthetic_image(1, 512, 768);
  auto b = testutil::synthetic_image(2, 512, 768);
  for (auto _ : state) benchmark::DoNotOptimize(psnr(a, b));
}
BENCHMARK(bm_psnr);

static void bm_ms_ssim(benchmark::State& state) {
  auto a = testutil::synthetic_image(1, 512, 768);
  auto b = testutil::synthetic_image(2, 512, 768);
  for (auto _ : state) benchmark::DoNotOptimize(ms_ssim(a, b).value);
}
BENCHMARK(bm_ms_ssim);

static void bm_bd_rate(benchmark::State& state) {
  RDCurve anchor = {{0.25, 30, 0}, {0.5, 33, 0}, {0.9, 36, 0}, {1.5, 38, 0}};
  RDCurve test = {{0.22, 30.2, 0}, {0.46, 33.4, 0}, {0.8, 36.1, 0}, {1.4, 38.4, 0}};
  for (auto _ : state) benchmark::DoNotOptimize(bd_rate(anchor, test));
}
BENCHMARK(bm_bd_rate);

BENCHMARK_MAIN();
