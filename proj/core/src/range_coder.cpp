#include "ugdiff/range_coder.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>

namespace ugdiff {

namespace {
constexpr std::uint32_t kTop = 1u << 24;
constexpr std::uint32_t kBot = 1u << 16;

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865475244); }
}  // namespace

int CdfTable::find_bin(std::uint32_t f) const {
  // upper_bound over cum[1..bins]: first entry > f, minus one.
  int lo = 0, hi = bins() - 1;
  while (lo < hi) {
    const int mid = (lo + hi) / 2;
    if (cum[mid + 1] > f)
      hi = mid;
    else
      lo = mid + 1;
  }
  return lo;
}

CdfTable quantize_pmf(const std::vector<double>& pmf, int offset) {
  const int n = static_cast<int>(pmf.size());
  if (n < 1 || n >= static_cast<int>(CdfTable::kTotal))
    throw std::invalid_argument("quantize_pmf: bin count out of range");

  double total = 0;
  for (double p : pmf) {
    if (!(p >= 0) || !std::isfinite(p)) throw std::invalid_argument("quantize_pmf: bad mass");
    total += p;
  }
  if (total <= 0) throw std::invalid_argument("quantize_pmf: zero total mass");

  std::vector<std::uint32_t> freq(n);
  std::int64_t sum = 0;
  for (int i = 0; i < n; ++i) {
    auto f = static_cast<std::int64_t>(std::llround(pmf[i] / total * CdfTable::kTotal));
    if (f < 1) f = 1;
    freq[i] = static_cast<std::uint32_t>(f);
    sum += f;
  }

  // Distribute the rounding surplus/deficit over the heaviest bins; when
  // removing, never drive a bin to zero.
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return freq[a] > freq[b]; });
  std::int64_t diff = static_cast<std::int64_t>(CdfTable::kTotal) - sum;
  size_t k = 0;
  while (diff != 0) {
    int i = order[k % order.size()];
    if (diff > 0) {
      ++freq[i];
      --diff;
    } else if (freq[i] > 1) {
      --freq[i];
      ++diff;
    }
    ++k;
    if (k > static_cast<size_t>(n) * (CdfTable::kTotal + 1))
      throw std::logic_error("quantize_pmf: failed to balance mass");
  }

  CdfTable t;
  t.offset = offset;
  t.cum.resize(n + 1);
  t.cum[0] = 0;
  for (int i = 0; i < n; ++i) t.cum[i + 1] = t.cum[i] + freq[i];
  return t;
}

CdfTable gaussian_cdf_table(double sigma, int lo, int hi) {
  if (!(sigma > 0)) throw std::invalid_argument("gaussian_cdf_table: sigma must be positive");
  if (hi <= lo) throw std::invalid_argument("gaussian_cdf_table: empty support");
  const int n = hi - lo + 1;
  std::vector<double> pmf(n);
  for (int s = lo; s <= hi; ++s)
    pmf[s - lo] = std_normal_cdf((s + 0.5) / sigma) - std_normal_cdf((s - 0.5) / sigma);
  // Fold tails into the edge bins.
  pmf[0] += std_normal_cdf((lo - 0.5) / sigma);
  pmf[n - 1] += 1.0 - std_normal_cdf((hi + 0.5) / sigma);
  return quantize_pmf(pmf, lo);
}

int sigma_bucket_index(double sigma) {
  if (sigma < kSigmaMin) sigma = kSigmaMin;
  if (sigma > kSigmaMax) sigma = kSigmaMax;
  const double step = std::log(kSigmaMax / kSigmaMin) / (kSigmaBuckets - 1);
  int idx = static_cast<int>(std::lround(std::log(sigma / kSigmaMin) / step));
  return std::clamp(idx, 0, kSigmaBuckets - 1);
}

double sigma_bucket_value(int index) {
  const double step = std::log(kSigmaMax / kSigmaMin) / (kSigmaBuckets - 1);
  return kSigmaMin * std::exp(step * index);
}

const CdfTable& gaussian_bucket_table(int index) {
  if (index < 0 || index >= kSigmaBuckets)
    throw std::invalid_argument("gaussian_bucket_table: bad bucket index");
  static std::vector<CdfTable> tables(kSigmaBuckets);
  static std::vector<std::once_flag> flags(kSigmaBuckets);
  std::call_once(flags[index], [index] {
    tables[index] = gaussian_cdf_table(sigma_bucket_value(index));
  });
  return tables[index];
}

// --------------------------------------------------------------------------

void RangeEncoder::normalize() {
  while ((low_ ^ (low_ + range_)) < kTop ||
         (range_ < kBot && ((range_ = static_cast<std::uint32_t>(-low_) & (kBot - 1)), true))) {
    out_.push_back(static_cast<std::uint8_t>(low_ >> 24));
    low_ <<= 8;
    range_ <<= 8;
  }
}

void RangeEncoder::encode(std::uint32_t cum_freq, std::uint32_t freq) {
  range_ /= CdfTable::kTotal;
  low_ += cum_freq * range_;
  range_ *= freq;
  normalize();
}

void RangeEncoder::encode_symbol(int symbol, const CdfTable& table) {
  if (!table.contains(symbol))
    throw std::out_of_range("range encoder: symbol " + std::to_string(symbol) +
                            " outside table support [" + std::to_string(table.min_symbol()) +
                            ", " + std::to_string(table.max_symbol()) + "]");
  const int bin = symbol - table.offset;
  encode(table.cum[bin], table.cum[bin + 1] - table.cum[bin]);
}

std::vector<std::uint8_t> RangeEncoder::finish() {
  for (int i = 0; i < 4; ++i) {
    out_.push_back(static_cast<std::uint8_t>(low_ >> 24));
    low_ <<= 8;
  }
  return std::move(out_);
}

RangeDecoder::RangeDecoder(std::span<const std::uint8_t> bytes) : in_(bytes) {
  for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
}

std::uint8_t RangeDecoder::next_byte() {
  if (pos_ >= in_.size())
    throw std::runtime_error("range decoder: truncated stream");
  return in_[pos_++];
}

void RangeDecoder::normalize() {
  while ((low_ ^ (low_ + range_)) < kTop ||
         (range_ < kBot && ((range_ = static_cast<std::uint32_t>(-low_) & (kBot - 1)), true))) {
    code_ = (code_ << 8) | next_byte();
    low_ <<= 8;
    range_ <<= 8;
  }
}

std::uint32_t RangeDecoder::decode_freq() {
  range_ /= CdfTable::kTotal;
  std::uint32_t f = (code_ - low_) / range_;
  return f >= CdfTable::kTotal ? CdfTable::kTotal - 1 : f;
}

void RangeDecoder::update(std::uint32_t cum_freq, std::uint32_t freq) {
  low_ += cum_freq * range_;
  range_ *= freq;
  normalize();
}

int RangeDecoder::decode_symbol(const CdfTable& table) {
  const std::uint32_t f = decode_freq();
  const int bin = table.find_bin(f);
  update(table.cum[bin], table.cum[bin + 1] - table.cum[bin]);
  return bin + table.offset;
}

std::vector<std::uint8_t> encode_with_tables(std::span<const int> symbols,
                                             const std::vector<const CdfTable*>& tables) {
  if (symbols.size() != tables.size())
    throw std::invalid_argument("encode_with_tables: one table per symbol required");
  RangeEncoder enc;
  for (size_t i = 0; i < symbols.size(); ++i) enc.encode_symbol(symbols[i], *tables[i]);
  return enc.finish();
}

std::vector<int> decode_with_tables(std::span<const std::uint8_t> bytes,
                                    const std::vector<const CdfTable*>& tables) {
  RangeDecoder dec(bytes);
  std::vector<int> out(tables.size());
  for (size_t i = 0; i < tables.size(); ++i) out[i] = dec.decode_symbol(*tables[i]);
  return out;
}

}  // namespace ugdiff
