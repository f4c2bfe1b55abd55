#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "glc/error.hpp"
#include "glc/ops.hpp"
#include "glc/rng.hpp"
#include "glc/tensor.hpp"

namespace glc {

enum class Init { truncated_normal, zeros, ones };

/// Named trainable tensors in declaration order. Each tensor is initialized
/// from a seed derived from (run seed, name), so submodules that share a name
/// across model variants start from identical values.
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool decay = false;
  };

  explicit ParamStore(std::uint64_t seed) : seed_(seed) {}

  Tensor<T> add(const std::string& name, Shape shape, Init init, double stddev = 0.02) {
    for (const auto& e : entries_) {
      if (e.name == name) fail(ErrorKind::config, "duplicate parameter name " + name);
    }
    std::vector<T> values(static_cast<std::size_t>(numel(shape)));
    switch (init) {
      case Init::zeros: break;
      case Init::ones: std::fill(values.begin(), values.end(), T(1)); break;
      case Init::truncated_normal: {
        Rng rng(mix_seed(seed_, fnv1a(name)));
        for (auto& v : values) v = static_cast<T>(rng.truncated_normal(stddev));
        break;
      }
    }
    Tensor<T> t(std::move(shape), std::move(values), true);
    entries_.push_back({name, t, init == Init::truncated_normal && t.rank() >= 2});
    return t;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  const Entry* find(const std::string& name) const {
    for (const auto& e : entries_) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::uint64_t seed_;
  std::vector<Entry> entries_;
};

template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, std::int64_t in, std::int64_t out, bool with_bias = true)
      : weight(store.add(name + ".weight", {in, out}, Init::truncated_normal)) {
    if (with_bias) bias = store.add(name + ".bias", {out}, Init::zeros);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  std::int64_t in_features() const { return weight.dim(0); }
  std::int64_t out_features() const { return weight.dim(1); }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& name, std::int64_t width)
      : gamma(store.add(name + ".weight", {width}, Init::ones)), beta(store.add(name + ".bias", {width}, Init::zeros)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layernorm(x, gamma, beta, T(1e-6)); }
};

}  // namespace glc
