#include "ugdiff/container.hpp"

#include <cstring>
#include <stdexcept>
#include <string>

namespace ugdiff {
namespace {

constexpr char kMagic[4] = {'U', 'G', 'D', 'F'};

template <typename T>
void put_be(std::vector<std::uint8_t>& out, T v) {
  for (int i = static_cast<int>(sizeof(T)) - 1; i >= 0; --i)
    out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

template <typename T>
T get_be(std::span<const std::uint8_t> in, size_t& pos) {
  if (pos + sizeof(T) > in.size())
    throw std::runtime_error("container: truncated header or stream");
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v = static_cast<T>((v << 8) | in[pos++]);
  return v;
}

}  // namespace

std::vector<std::uint8_t> Container::serialize() const {
  std::vector<std::uint8_t> out;
  out.reserve(total_bytes());
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(kVersion);
  put_be<std::uint32_t>(out, orig_w);
  put_be<std::uint32_t>(out, orig_h);
  put_be<std::uint16_t>(out, n_infer_steps);
  put_be<std::uint64_t>(out, seed);
  out.push_back(model_id);
  for (const auto& s : substreams) {
    put_be<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

Container Container::parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw std::runtime_error("container: bad magic (expected \"UGDF\")");
  size_t pos = 4;
  if (pos >= bytes.size()) throw std::runtime_error("container: truncated header or stream");
  const std::uint8_t version = bytes[pos++];
  if (version != kVersion)
    throw std::runtime_error("container: unsupported version " + std::to_string(version));
  Container c;
  c.orig_w = get_be<std::uint32_t>(bytes, pos);
  c.orig_h = get_be<std::uint32_t>(bytes, pos);
  c.n_infer_steps = get_be<std::uint16_t>(bytes, pos);
  c.seed = get_be<std::uint64_t>(bytes, pos);
  if (pos >= bytes.size()) throw std::runtime_error("container: truncated header or stream");
  c.model_id = bytes[pos++];
  for (auto& s : c.substreams) {
    const std::uint32_t len = get_be<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size())
      throw std::runtime_error("container: truncated substream (declared " +
                               std::to_string(len) + " bytes)");
    s.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
             bytes.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  if (pos != bytes.size())
    throw std::runtime_error("container: trailing garbage after substreams");
  return c;
}

}  // namespace ugdiff
