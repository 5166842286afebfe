// Named registry of trainable tensors.
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "w2w/rng.hpp"
#include "w2w/tensor.hpp"

namespace w2w {

template <typename T>
class ParamStore {
 public:
  // Registers a leaf under a unique name and returns a handle sharing its storage.
  Tensor<T> add(const std::string& name, Tensor<T> tensor) {
    if (index_.count(name) != 0) throw ConfigError("duplicate parameter name: " + name);
    tensor.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, tensor);
    return tensor;
  }

  Tensor<T> normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(stddev * rng.normal());
    return add(name, Tensor<T>(std::move(shape), std::move(v)));
  }
  Tensor<T> zeros(const std::string& name, Shape shape) { return add(name, Tensor<T>::zeros(std::move(shape))); }
  Tensor<T> ones(const std::string& name, Shape shape) { return add(name, Tensor<T>::full(std::move(shape), T(1))); }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return entries_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

// Copies values between stores of possibly different precision; names and
// shapes must agree.
template <typename To, typename From>
void copy_params(const ParamStore<From>& src, ParamStore<To>& dst) {
  for (const auto& [name, t] : src.entries()) {
    Tensor<To> target = dst.get(name);
    if (target.shape() != t.shape()) throw DimensionError("parameter " + name + " shape mismatch");
    auto out = target.mutable_data();
    for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<To>(t[i]);
  }
}

}  // namespace w2w
