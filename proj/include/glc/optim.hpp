#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "glc/error.hpp"
#include "glc/params.hpp"

namespace glc {

struct AdamWOptions {
  double lr = 1e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment optimizer with decoupled weight decay and bias-corrected
/// moments. Decay applies to entries flagged `decay` (weight matrices and
/// kernels); biases, norms and token tables are not decayed.
template <class T>
class AdamW {
 public:
  AdamW(ParamStore<T>& store, AdamWOptions options) : store_(&store), options_(options) {
    for (const auto& e : store.entries()) {
      first_.emplace_back(e.tensor.numel(), 0.0);
      second_.emplace_back(e.tensor.numel(), 0.0);
    }
  }

  std::int64_t step_count() const { return steps_; }
  const AdamWOptions& options() const { return options_; }

  /// One update at learning rate `lr`.
  void step(double lr) {
    auto& entries = store_->entries();
    for (const auto& e : entries) {
      if (!e.tensor.has_grad()) fail(ErrorKind::usage, "parameter " + e.name + " has no gradient");
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < entries.size(); ++k) {
      auto& tensor = entries[k].tensor;
      auto values = tensor.mutable_data();
      const auto grad = tensor.mutable_grad();
      auto& m = first_[k];
      auto& v = second_[k];
      const double decay = entries[k].decay ? options_.weight_decay : 0.0;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double g = grad[i];
        double theta = values[i];
        theta -= lr * decay * theta;
        m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g;
        v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g * g;
        theta -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + options_.eps);
        values[i] = static_cast<T>(theta);
      }
    }
  }

  void step() { step(options_.lr); }

 private:
  ParamStore<T>* store_;
  AdamWOptions options_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  std::int64_t steps_ = 0;
};

/// Linear warmup over the first `warmup_fraction` of steps, then cosine decay to zero.
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr, double warmup_fraction = 0.05) {
  if (total_steps <= 0) return base_lr;
  const auto warmup = static_cast<std::int64_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(std::max<std::int64_t>(1, total_steps - warmup));
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
}

}  // namespace glc
