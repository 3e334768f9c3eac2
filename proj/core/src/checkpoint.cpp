#include "ugdiff/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ugdiff {
namespace {

constexpr char kMagic[4] = {'U', 'G', 'W', 'T'};
constexpr std::uint8_t kVersion = 1;

void put_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32le(const std::string& in, size_t& pos) {
  if (pos + 4 > in.size()) throw std::runtime_error("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos++])) << (8 * i);
  return v;
}

}  // namespace

const Tensor<float>& Checkpoint::get(const std::string& name) const {
  auto it = entries.find(name);
  if (it == entries.end()) throw std::runtime_error("checkpoint: missing entry " + name);
  return it->second;
}

double Checkpoint::get_scalar(const std::string& name) const {
  const auto& t = get(name);
  if (t.numel() != 1) throw std::runtime_error("checkpoint: " + name + " is not a scalar");
  return static_cast<double>(t.data[0]);
}

void Checkpoint::save(const std::string& path) const {
  std::string buf;
  buf.append(kMagic, 4);
  buf.push_back(static_cast<char>(kVersion));
  put_u32le(buf, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put_u32le(buf, static_cast<std::uint32_t>(name.size()));
    buf.append(name);
    put_u32le(buf, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u32le(buf, static_cast<std::uint32_t>(d));
    static_assert(sizeof(float) == 4);
    for (float v : t.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32le(buf, bits);
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 9 || std::memcmp(buf.data(), kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  size_t pos = 4;
  const std::uint8_t version = static_cast<std::uint8_t>(buf[pos++]);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t count = get_u32le(buf, pos);
  Checkpoint ckpt;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t name_len = get_u32le(buf, pos);
    if (pos + name_len > buf.size()) throw std::runtime_error("checkpoint: truncated name");
    std::string name = buf.substr(pos, name_len);
    pos += name_len;
    const std::uint32_t ndim = get_u32le(buf, pos);
    if (ndim > 8) throw std::runtime_error("checkpoint: implausible rank");
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = static_cast<int>(get_u32le(buf, pos));
    Tensor<float> t(shape);
    for (auto& v : t.data) {
      std::uint32_t bits = get_u32le(buf, pos);
      std::memcpy(&v, &bits, 4);
    }
    ckpt.entries.emplace(std::move(name), std::move(t));
  }
  return ckpt;
}

}  // namespace ugdiff
