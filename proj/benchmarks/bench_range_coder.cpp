#include <benchmark/benchmark.h>

#include "ugdiff/random.hpp"
#include "ugdiff/range_coder.hpp"

using namespace ugdiff;

namespace {

struct Stream {
  std::vector<int> symbols;
  std::vector<const CdfTable*> tables;
  std::vector<std::uint8_t> bytes;
};

Stream make_stream(int n) {
  Stream s;
  RandomEngine rng(7);
  for (int i = 0; i < n; ++i) {
    const int bucket = static_cast<int>(rng.uniform_int(0, kSigmaBuckets - 1));
    const CdfTable& t = gaussian_bucket_table(bucket);
    s.tables.push_back(&t);
    const auto f = static_cast<std::uint32_t>(rng.uniform_int(0, CdfTable::kTotal - 1));
    s.symbols.push_back(t.find_bin(f) + t.offset);
  }
  s.bytes = encode_with_tables(s.symbols, s.tables);
  return s;
}

}  // namespace

static void bm_encode(benchmark::State& state) {
  auto s = make_stream(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    auto bytes = encode_with_tables(s.symbols, s.tables);
    benchmark::DoNotOptimize(bytes.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * state.range(0));
}
BENCHMARK(bm_encode)->Arg(1 << 16)->Arg(1 << 20);

static void bm_decode(benchmark::State& state) {
  auto s = make_stream(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    auto symbols = decode_with_tables(s.bytes, s.tables);
    benchmark::DoNotOptimize(symbols.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * state.range(0));
}
BENCHMARK(bm_decode)->Arg(1 << 16)->Arg(1 << 20);

static void bm_build_gaussian_table(benchmark::State& state) {
  for (auto _ : state) {
    auto t = gaussian_cdf_table(0.73);
    benchmark::DoNotOptimize(t.cum.data());
  }
}
BENCHMARK(bm_build_gaussian_table);

BENCHMARK_MAIN();
