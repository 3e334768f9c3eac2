#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace ugdiff {

// Serialized bitstream layout (all integers big-endian):
//   magic "UGDF" | version u8 | orig_w u32 | orig_h u32 | n_infer_steps u16 |
//   seed u64 | model_id u8 | 4 x (u32 byte length + payload)
// Substream order: low-y, low-h, res-y, res-h.
struct Container {
  static constexpr std::uint8_t kVersion = 1;
  static constexpr int kHeaderBytes = 4 + 1 + 4 + 4 + 2 + 8 + 1;

  std::uint32_t orig_w = 0;
  std::uint32_t orig_h = 0;
  std::uint16_t n_infer_steps = 0;
  std::uint64_t seed = 0;
  std::uint8_t model_id = 0;
  std::array<std::vector<std::uint8_t>, 4> substreams;

  std::size_t total_bytes() const {
    std::size_t n = kHeaderBytes;
    for (const auto& s : substreams) n += 4 + s.size();
    return n;
  }

  std::vector<std::uint8_t> serialize() const;

  // Throws std::runtime_error with a diagnostic on bad magic, unknown
  // version, or truncation.
  static Container parse(std::span<const std::uint8_t> bytes);
};

}  // namespace ugdiff
