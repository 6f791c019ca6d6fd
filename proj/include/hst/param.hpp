#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "hst/tensor.hpp"

namespace hst {

/// A named model weight. Frozen parameters never carry a gradient buffer.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = false;
  bool decay = true;  // subject to decoupled weight decay when trainable
};

/// Owns every parameter of a model, keyed by a unique hierarchical name.
/// Iteration is in lexicographic name order.
template <class T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> value, bool trainable, bool decay = true) {
    if (params_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
    Parameter<T> p{name, std::move(value), false, decay};
    auto& slot = params_.emplace(name, std::move(p)).first->second;
    set_trainable(slot, trainable);
    return slot.value;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Parameter<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }

  void set_trainable(const std::string& name, bool on) { set_trainable(at(name), on); }

  static void set_trainable(Parameter<T>& p, bool on) {
    p.trainable = on;
    p.value.set_requires_grad(on);
  }

  void zero_grads() {
    for (auto& [_, p] : params_)
      if (p.value.has_grad()) p.value.zero_grad();
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [n, _] : params_) out.push_back(n);
    return out;
  }

  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [n, p] : params_)
      if (p.trainable) out.push_back(n);
    return out;
  }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter<T>> params_;
};

/// Truncated normal N(0, std^2) restricted to [-2 std, 2 std], by rejection.
template <class T>
Tensor<T> trunc_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.data()) {
    double z;
    do z = dist(rng);
    while (std::abs(z) > 2.0);
    v = static_cast<T>(z * stddev);
  }
  return t;
}

/// Stable 64-bit FNV-1a, used for config hashes and checkpoint checksums.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

// Derives an independent generator for a named sub-stream.
inline std::mt19937_64 substream(std::uint64_t seed, const std::string& tag) {
  return std::mt19937_64(fnv1a(tag.data(), tag.size(), seed ^ 0x9e3779b97f4a7c15ull));
}

}  // namespace hst
