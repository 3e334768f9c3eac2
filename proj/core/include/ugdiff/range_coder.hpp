#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace ugdiff {

// Quantized cumulative distribution with 16-bit precision. cum has one entry
// per bin plus a terminator: cum.front() == 0, cum.back() == 1 << 16, strictly
// increasing (every bin carries non-zero mass). `offset` is the symbol value
// of bin 0.
struct CdfTable {
  static constexpr std::uint32_t kTotal = 1u << 16;

  int offset = 0;
  std::vector<std::uint32_t> cum;

  int bins() const { return static_cast<int>(cum.size()) - 1; }
  int min_symbol() const { return offset; }
  int max_symbol() const { return offset + bins() - 1; }

  bool contains(int symbol) const {
    return symbol >= min_symbol() && symbol <= max_symbol();
  }

  // Inverse lookup: bin whose [cum[i], cum[i+1]) interval contains f.
  int find_bin(std::uint32_t f) const;
};

// Quantizes a probability vector to integer frequencies summing to 2^16 with
// every bin >= 1. Deterministic.
CdfTable quantize_pmf(const std::vector<double>& pmf, int offset);

// Integrated-Gaussian table over symbols [lo, hi] for N(0, sigma^2); tail
// mass is folded into the edge bins.
CdfTable gaussian_cdf_table(double sigma, int lo = -127, int hi = 128);

// 64 log-spaced sigma buckets over the entropy-model clamp range.
constexpr int kSigmaBuckets = 64;
constexpr double kSigmaMin = 0.11;
constexpr double kSigmaMax = 256.0;

int sigma_bucket_index(double sigma);
double sigma_bucket_value(int index);

// Shared per-bucket Gaussian tables over the default support, built lazily.
const CdfTable& gaussian_bucket_table(int index);

// ---------------------------------------------------------------------------
// Carry-less byte-oriented range coder (32-bit state, 16-bit probabilities).
// ---------------------------------------------------------------------------

class RangeEncoder {
 public:
  RangeEncoder() = default;

  void encode(std::uint32_t cum_freq, std::uint32_t freq);
  void encode_symbol(int symbol, const CdfTable& table);

  // Flushes the state; no further encode calls are valid.
  std::vector<std::uint8_t> finish();

 private:
  void normalize();

  std::uint32_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> bytes);

  // Scaled frequency of the pending symbol; pass it to CdfTable::find_bin.
  std::uint32_t decode_freq();
  void update(std::uint32_t cum_freq, std::uint32_t freq);
  int decode_symbol(const CdfTable& table);

 private:
  void normalize();
  std::uint8_t next_byte();

  std::span<const std::uint8_t> in_;
  size_t pos_ = 0;
  std::uint32_t low_ = 0;
  std::uint32_t code_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
};

// Convenience wrappers: one substream, one table per symbol position.
std::vector<std::uint8_t> encode_with_tables(std::span<const int> symbols,
                                             const std::vector<const CdfTable*>& tables);
std::vector<int> decode_with_tables(std::span<const std::uint8_t> bytes,
                                    const std::vector<const CdfTable*>& tables);

}  // namespace ugdiff
