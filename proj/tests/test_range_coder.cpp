#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "testutil.hpp"
#include "ugdiff/range_coder.hpp"

using namespace ugdiff;

namespace {

// Draws a symbol index from a quantized table (inverse-CDF on a uniform).
int draw_from_table(const CdfTable& t, RandomEngine& rng) {
  const auto f = static_cast<std::uint32_t>(rng.uniform_int(0, CdfTable::kTotal - 1));
  return t.find_bin(f) + t.offset;
}

double table_bits(const CdfTable& t, int symbol) {
  const int bin = symbol - t.offset;
  const double p =
      static_cast<double>(t.cum[bin + 1] - t.cum[bin]) / CdfTable::kTotal;
  return -std::log2(p);
}

}  // namespace

TEST_CASE("uniform 4-bin pmf quantizes to exact quarters") {
  auto t = quantize_pmf({0.25, 0.25, 0.25, 0.25}, 0);
  CHECK(t.cum == std::vector<std::uint32_t>{0, 16384, 32768, 49152, 65536});
}

TEST_CASE("every quantized table has total mass 2^16 and positive bins") {
  RandomEngine rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const int bins = static_cast<int>(rng.uniform_int(1, 300));
    std::vector<double> pmf(bins);
    for (auto& p : pmf) p = rng.uniform() < 0.3 ? 0.0 : rng.uniform();
    if (std::all_of(pmf.begin(), pmf.end(), [](double p) { return p == 0.0; }))
      pmf[0] = 1.0;
    auto t = quantize_pmf(pmf, -5);
    CHECK(t.cum.front() == 0u);
    CHECK(t.cum.back() == CdfTable::kTotal);
    for (int i = 0; i < t.bins(); ++i) CHECK(t.cum[i + 1] > t.cum[i]);
  }
}

TEST_CASE("tight sigma concentrates nearly all mass in the central bins") {
  auto t = gaussian_cdf_table(0.11);
  const int zero_bin = -t.offset;
  double central = 0;
  for (int b = zero_bin - 1; b <= zero_bin + 1; ++b)
    central += static_cast<double>(t.cum[b + 1] - t.cum[b]);
  CHECK(central / CdfTable::kTotal >= 0.99);
}

TEST_CASE("sigma buckets are log-spaced, clamped, and consistent") {
  CHECK(sigma_bucket_index(0.05) == 0);
  CHECK(sigma_bucket_index(1000.0) == kSigmaBuckets - 1);
  CHECK(sigma_bucket_value(0) == doctest::Approx(kSigmaMin));
  CHECK(sigma_bucket_value(kSigmaBuckets - 1) == doctest::Approx(kSigmaMax));
  for (int i = 0; i < kSigmaBuckets; ++i)
    CHECK(sigma_bucket_index(sigma_bucket_value(i)) == i);
}

TEST_CASE("empty stream: fixed-size terminator that decodes to nothing") {
  RangeEncoder enc;
  auto bytes = enc.finish();
  CHECK(bytes.size() == 4);
  auto out = decode_with_tables(bytes, {});
  CHECK(out.empty());
}

TEST_CASE("single symbol with a 2-bin uniform table fits in 5 bytes") {
  auto t = quantize_pmf({0.5, 0.5}, 0);
  RangeEncoder enc;
  enc.encode_symbol(1, t);
  auto bytes = enc.finish();
  CHECK(bytes.size() <= 5);
  RangeDecoder dec(bytes);
  CHECK(dec.decode_symbol(t) == 1);
}

TEST_CASE("round trip is bit exact over random tables and symbols") {
  RandomEngine rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const double sigma = std::exp(rng.uniform(std::log(0.11), std::log(256.0)));
    const CdfTable& t = gaussian_bucket_table(sigma_bucket_index(sigma));
    std::vector<int> symbols(2000);
    std::vector<const CdfTable*> tables(symbols.size(), &t);
    for (auto& s : symbols) s = draw_from_table(t, rng);
    auto bytes = encode_with_tables(symbols, tables);
    auto decoded = decode_with_tables(bytes, tables);
    REQUIRE(decoded == symbols);
  }
}

TEST_CASE("mixed per-position tables round trip") {
  RandomEngine rng(3);
  std::vector<CdfTable> tables;
  for (int i = 0; i < 8; ++i)
    tables.push_back(gaussian_cdf_table(0.2 + 2.0 * i, -20, 20));
  std::vector<int> symbols;
  std::vector<const CdfTable*> per_symbol;
  for (int i = 0; i < 5000; ++i) {
    const auto& t = tables[static_cast<size_t>(rng.uniform_int(0, 7))];
    per_symbol.push_back(&t);
    symbols.push_back(draw_from_table(t, rng));
  }
  auto bytes = encode_with_tables(symbols, per_symbol);
  CHECK(decode_with_tables(bytes, per_symbol) == symbols);
}

TEST_CASE("coded length stays within the budget over the ideal cross-entropy") {
  RandomEngine rng(4);
  const CdfTable& t = gaussian_bucket_table(sigma_bucket_index(3.7));
  std::vector<int> symbols(50000);
  std::vector<const CdfTable*> tables(symbols.size(), &t);
  double ideal_bits = 0;
  for (auto& s : symbols) {
    s = draw_from_table(t, rng);
    ideal_bits += table_bits(t, s);
  }
  auto bytes = encode_with_tables(symbols, tables);
  const double coded_bits = 8.0 * static_cast<double>(bytes.size());
  CHECK(coded_bits <= ideal_bits + 32.0 + 0.01 * static_cast<double>(symbols.size()));
}

TEST_CASE("out-of-support symbols are rejected at encode") {
  auto t = quantize_pmf({0.5, 0.5}, 0);
  RangeEncoder enc;
  CHECK_THROWS_AS(enc.encode_symbol(2, t), std::out_of_range);
  CHECK_THROWS_AS(enc.encode_symbol(-1, t), std::out_of_range);
}

TEST_CASE("truncated streams are rejected at decode") {
  auto t = quantize_pmf({0.5, 0.5}, 0);
  RangeEncoder enc;
  for (int i = 0; i < 64; ++i) enc.encode_symbol(i & 1, t);
  auto bytes = enc.finish();
  bytes.resize(2);  // shorter than the 4-byte bootstrap
  CHECK_THROWS_AS(RangeDecoder dec(bytes), std::runtime_error);
}

TEST_CASE("decoding far past the stream end fails rather than fabricating data") {
  auto t = gaussian_cdf_table(0.5, -4, 4);
  RangeEncoder enc;
  enc.encode_symbol(0, t);
  auto bytes = enc.finish();
  RangeDecoder dec(bytes);
  CHECK(dec.decode_symbol(t) == 0);
  CHECK_THROWS_AS(
      [&] {
        for (int i = 0; i < 100000; ++i) (void)dec.decode_symbol(t);
      }(),
      std::runtime_error);
}

TEST_CASE("stream length is deterministic in its inputs") {
  RandomEngine rng(5);
  const CdfTable& t = gaussian_bucket_table(10);
  std::vector<int> symbols(512);
  std::vector<const CdfTable*> tables(symbols.size(), &t);
  for (auto& s : symbols) s = draw_from_table(t, rng);
  auto a = encode_with_tables(symbols, tables);
  auto b = encode_with_tables(symbols, tables);
  CHECK(a == b);
}
