// Finite-difference verification of reverse-mode gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "w2w/rng.hpp"
#include "w2w/tensor.hpp"

namespace w2w {

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  // 0 probes every element; otherwise a seeded subset per input.
  std::size_t max_probes_per_input = 0;
  std::uint64_t probe_seed = 0;
};

struct InputGradError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t probes = 0;
  std::size_t reprobed = 0;  // coordinates re-measured at a smaller step
};

struct GradCheckReport {
  std::string op;
  std::vector<InputGradError> inputs;
  double max_rel_error = 0.0;
  bool finite = true;
  bool passed = false;
};

using ScalarFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// Compares the tape gradient of a scalar function against central differences
// (f(x+h) - f(x-h)) / 2h. The error of an input is the largest elementwise
// deviation divided by the larger of the two gradients' max-norms (floored at
// 1e-6). A coordinate that disagrees at step h is re-measured with central
// and one-sided differences at h/10, h/100 and h/1000 and keeps its best
// agreement, so probes straddling a kink of max(0, x), max-pooling or the
// hard window argmax are not reported as gradient errors.
inline GradCheckReport grad_check(const std::string& op, const ScalarFn& fn,
                                  std::vector<Tensor<double>> inputs,
                                  std::vector<std::string> names = {},
                                  const GradCheckOptions& options = {}) {
  GradCheckReport report;
  report.op = op;
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = fn(inputs);
    if (!std::isfinite(loss.item())) {
      report.finite = false;
      return report;
    }
    tape.backward(loss);
    for (auto& t : inputs) {
      if (t.has_grad()) {
        analytic.emplace_back(t.grad().begin(), t.grad().end());
      } else {
        analytic.emplace_back(t.size(), 0.0);
      }
    }
  }

  NoGradScope<double> no_grad;
  auto eval = [&]() { return fn(inputs).item(); };
  Rng rng(options.probe_seed);

  for (std::size_t in = 0; in < inputs.size(); ++in) {
    auto values = inputs[in].mutable_data();
    const auto& a = analytic[in];
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_probes_per_input != 0 && coords.size() > options.max_probes_per_input) {
      rng.shuffle(coords);
      coords.resize(options.max_probes_per_input);
    }

    auto central = [&](std::size_t i, double h) {
      const double orig = values[i];
      values[i] = orig + h;
      const double up = eval();
      values[i] = orig - h;
      const double down = eval();
      values[i] = orig;
      return (up - down) / (2.0 * h);
    };
    // Forward and backward differences at h; the one facing away from a
    // nearby kink stays smooth.
    auto one_sided = [&](std::size_t i, double h, double base) {
      const double orig = values[i];
      values[i] = orig + h;
      const double up = eval();
      values[i] = orig - h;
      const double down = eval();
      values[i] = orig;
      return std::pair<double, double>{(up - base) / h, (base - down) / h};
    };

    std::vector<double> numeric(coords.size());
    for (std::size_t p = 0; p < coords.size(); ++p) numeric[p] = central(coords[p], options.step);

    double scale = 1e-6;
    for (double g : a) scale = std::max(scale, std::abs(g));
    for (double g : numeric) scale = std::max(scale, std::abs(g));

    InputGradError err;
    err.name = in < names.size() ? names[in] : "input" + std::to_string(in);
    err.probes = coords.size();
    for (std::size_t p = 0; p < coords.size(); ++p) {
      const std::size_t i = coords[p];
      if (!std::isfinite(numeric[p]) || !std::isfinite(a[i])) {
        report.finite = false;
        err.max_rel_error = std::numeric_limits<double>::infinity();
        continue;
      }
      double e = std::abs(a[i] - numeric[p]) / scale;
      if (e > options.tolerance) {
        ++err.reprobed;
        const double base = eval();
        for (double h : {options.step / 10.0, options.step / 100.0, options.step / 1000.0}) {
          e = std::min(e, std::abs(a[i] - central(i, h)) / scale);
          const auto [fwd, bwd] = one_sided(i, h, base);
          e = std::min({e, std::abs(a[i] - fwd) / scale, std::abs(a[i] - bwd) / scale});
        }
      }
      err.max_rel_error = std::max(err.max_rel_error, e);
    }
    report.max_rel_error = std::max(report.max_rel_error, err.max_rel_error);
    report.inputs.push_back(std::move(err));
  }
  report.passed = report.finite && report.max_rel_error <= options.tolerance;
  return report;
}

}  // namespace w2w
