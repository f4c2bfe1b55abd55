#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "glc/ops.hpp"
#include "glc/rng.hpp"
#include "glc/tensor.hpp"

namespace glc {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Elements probed per input; <= 0 probes every element.
  std::int64_t max_probes_per_input = 0;
  std::uint64_t seed = 7;
  /// Denominator floor of the relative error; below it the error is absolute.
  double floor = 1.0;
};

struct GradCheckReport {
  std::string name;
  bool passed = true;
  double worst_error = 0.0;
  std::size_t worst_input = 0;
  std::int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  std::int64_t probes = 0;

  std::string summary() const {
    std::ostringstream out;
    out << name << ": " << (passed ? "pass" : "FAIL") << " worst_rel_err=" << worst_error << " probes=" << probes;
    if (!passed) {
      out << " at input " << worst_input << " index " << worst_index << " (analytic " << analytic << ", numeric "
          << numeric << ")";
    }
    return out.str();
  }
};

using TensorFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Central-difference check of d f / d inputs. Non-scalar outputs are reduced
/// with fixed random weights so the whole Jacobian participates. Relative error
/// per element is |a - n| / max(floor, |a|, |n|).
inline GradCheckReport grad_check(const std::string& name, const TensorFn& f, std::vector<Tensor<double>> inputs,
                                  const GradCheckOptions& options = {}) {
  GradCheckReport report;
  report.name = name;

  std::vector<double> projection;
  auto scalarize = [&](const Tensor<double>& out) {
    if (out.numel() == 1) return out.rank() == 0 ? out : reshape(out, Shape{});
    if (projection.size() != static_cast<std::size_t>(out.numel())) {
      Rng rng(options.seed);
      projection.resize(static_cast<std::size_t>(out.numel()));
      for (auto& w : projection) w = rng.uniform(-1.0, 1.0);
    }
    return sum(mul(out, Tensor<double>(out.shape(), projection)));
  };

  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  backward(scalarize(f(inputs)));

  NoGradGuard no_grad;
  Rng picker(options.seed + 1);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    const auto analytic = in.grad();
    std::vector<std::int64_t> probe;
    if (options.max_probes_per_input <= 0 || in.numel() <= options.max_probes_per_input) {
      for (std::int64_t i = 0; i < in.numel(); ++i) probe.push_back(i);
    } else {
      for (std::int64_t i = 0; i < options.max_probes_per_input; ++i) probe.push_back(picker.index(in.numel()));
    }
    auto values = in.mutable_data();
    for (const auto i : probe) {
      const double saved = values[i];
      values[i] = saved + options.step;
      const double plus = scalarize(f(inputs)).item();
      values[i] = saved - options.step;
      const double minus = scalarize(f(inputs)).item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max({options.floor, std::abs(a), std::abs(numeric)});
      ++report.probes;
      if (err > report.worst_error || !std::isfinite(err)) {
        report.worst_error = std::isfinite(err) ? err : INFINITY;
        report.worst_input = k;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  report.passed = report.worst_error <= options.tolerance;
  return report;
}

}  // namespace glc
