// AdamW with decoupled weight decay and a cosine learning-rate schedule.
#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "w2w/params.hpp"

namespace w2w {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Learning rate at `step` of `total`: lr at step 0, min_lr at step == total.
inline double cosine_lr(std::size_t step, std::size_t total, double lr, double min_lr) {
  if (total == 0) return min_lr;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return min_lr + 0.5 * (lr - min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

template <typename T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamStore<T>& params, AdamWConfig config) : config_(config) {
    for (const auto& [name, t] : params.entries()) {
      first_.add("adam.m." + name, Tensor<T>::zeros(t.shape()));
      second_.add("adam.v." + name, Tensor<T>::zeros(t.shape()));
    }
  }

  // Applies one update from the accumulated gradients; parameters without a
  // gradient still decay.
  void step(ParamStore<T>& params, double lr) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    const auto& entries = params.entries();
    for (std::size_t p = 0; p < entries.size(); ++p) {
      Tensor<T> param = entries[p].second;
      Tensor<T> m = first_.entries()[p].second;
      Tensor<T> v = second_.entries()[p].second;
      auto w = param.mutable_data();
      auto md = m.mutable_data();
      auto vd = v.mutable_data();
      const bool has_grad = param.has_grad();
      const auto g = param.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = has_grad ? static_cast<double>(g[i]) : 0.0;
        const double mi = config_.beta1 * md[i] + (1.0 - config_.beta1) * gi;
        const double vi = config_.beta2 * vd[i] + (1.0 - config_.beta2) * gi * gi;
        md[i] = static_cast<T>(mi);
        vd[i] = static_cast<T>(vi);
        double wi = static_cast<double>(w[i]) * (1.0 - lr * config_.weight_decay);
        wi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + config_.eps);
        w[i] = static_cast<T>(wi);
      }
    }
  }

  std::size_t steps() const { return steps_; }
  void set_steps(std::size_t s) { steps_ = s; }
  const ParamStore<T>& first_moments() const { return first_; }
  const ParamStore<T>& second_moments() const { return second_; }
  ParamStore<T>& first_moments_mut() { return first_; }
  ParamStore<T>& second_moments_mut() { return second_; }

 private:
  AdamWConfig config_;
  ParamStore<T> first_, second_;
  std::size_t steps_ = 0;
};

}  // namespace w2w
