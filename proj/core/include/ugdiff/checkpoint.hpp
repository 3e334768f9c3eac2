#pragma once

#include <map>
#include <string>
#include <vector>

#include "ugdiff/layers.hpp"
#include "ugdiff/tensor.hpp"

namespace ugdiff {

// Versioned binary weight file: magic "UGWT", version byte, then a named
// tensor table (length-prefixed name, shape, raw little-endian float32).
// Scalar metadata travels as 1-element tensors under "meta/" names.
struct Checkpoint {
  std::map<std::string, Tensor<float>> entries;

  void put(const std::string& name, Tensor<float> t) { entries[name] = std::move(t); }

  void put_scalar(const std::string& name, double v) {
    entries[name] = Tensor<float>::scalar(static_cast<float>(v));
  }

  bool has(const std::string& name) const { return entries.count(name) != 0; }

  const Tensor<float>& get(const std::string& name) const;
  double get_scalar(const std::string& name) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

// Snapshot / restore of a module's named parameters under a prefix.
template <typename T>
void store_module(Checkpoint& ckpt, const std::string& prefix, const Module<T>& m) {
  for (const auto& [name, p] : m.named_parameters())
    ckpt.put(prefix + "." + name, p->value().template cast<float>());
}

template <typename T>
void load_module(const Checkpoint& ckpt, const std::string& prefix, Module<T>& m) {
  for (auto& [name, p] : m.named_parameters()) {
    const Tensor<float>& src = ckpt.get(prefix + "." + name);
    if (src.shape != p->value().shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + prefix + "." + name +
                               ": file " + shape_str(src.shape) + " vs model " +
                               shape_str(p->value().shape));
    p->value() = src.template cast<T>();
  }
}

}  // namespace ugdiff
