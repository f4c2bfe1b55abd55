#pragma once

// Differentiable primitives. Every op computes its forward value eagerly and,
// when an input requires grad, registers a backward rule on the tape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "glc/error.hpp"
#include "glc/gemm.hpp"
#include "glc/tensor.hpp"
#include "glc/vmath.hpp"

namespace glc {

/// Triple of (time, height, width) extents: grids, strides, paddings, kernels.
struct Extent3 {
  std::int64_t t = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  std::int64_t volume() const { return t * h * w; }
  bool unit() const { return t == 1 && h == 1 && w == 1; }
  friend bool operator==(const Extent3&, const Extent3&) = default;
};

inline std::string to_string(const Extent3& e) {
  return std::to_string(e.t) + "x" + std::to_string(e.h) + "x" + std::to_string(e.w);
}

using Grid = Extent3;

namespace detail {

inline std::int64_t normalize_axis(std::int64_t axis, std::int64_t rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    fail(ErrorKind::shape, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return axis;
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) fail(ErrorKind::shape, std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) + " differ");
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    fail(ErrorKind::shape, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(s));
  }
}

/// (outer, extent, inner) factorization of a shape around one axis.
struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t extent = 1;
  std::int64_t inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::int64_t axis) {
  AxisSplit s;
  for (std::int64_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = x[i] + y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "add", {&a, &b}, [a, b](Node<T>& self) {
    const auto& g = self.grad;
    if (T* ga = detail::grad_of(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (T* gb = detail::grad_of(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = x[i] - y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "sub", {&a, &b}, [a, b](Node<T>& self) {
    const auto& g = self.grad;
    if (T* ga = detail::grad_of(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (T* gb = detail::grad_of(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = x[i] * y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {&a, &b}, [a, b](Node<T>& self) {
    const auto& g = self.grad;
    const auto x = a.data();
    const auto y = b.data();
    if (T* ga = detail::grad_of(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (T* gb = detail::grad_of(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return detail::make_result<T>(a.shape(), std::move(out), "scale", {&a}, [a, factor](Node<T>& self) {
    T* ga = detail::grad_of(a);
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += factor * self.grad[i];
  });
}

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  const T* x = a.data().data();
  const std::int64_t n = a.numel();
  constexpr T rsqrt2 = T(std::numbers::sqrt2 / 2);
  for (std::int64_t i = 0; i < n; ++i) out[i] = T(0.5) * x[i] * (T(1) + vm::erf(x[i] * rsqrt2));
  return detail::make_result<T>(a.shape(), std::move(out), "gelu", {&a}, [a](Node<T>& self) {
    T* ga = detail::grad_of(a);
    const T* x = a.data().data();
    const T* g = self.grad.data();
    const std::int64_t n = a.numel();
    constexpr T inv_sqrt_2pi = T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    for (std::int64_t i = 0; i < n; ++i) {
      const T cdf = T(0.5) * (T(1) + vm::erf(x[i] * rsqrt2));
      const T pdf = inv_sqrt_2pi * vm::exp(T(-0.5) * x[i] * x[i]);
      ga[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (const auto v : a.data()) total += v;
  return detail::make_result<T>(Shape{}, {total}, "sum", {&a}, [a](Node<T>& self) {
    T* ga = detail::grad_of(a);
    const T g = self.grad[0];
    for (std::int64_t i = 0; i < a.numel(); ++i) ga[i] += g;
  });
}

/// Mean over one axis; the axis is removed from the shape.
template <class T>
Tensor<T> mean(const Tensor<T>& a, std::int64_t axis) {
  axis = detail::normalize_axis(axis, a.rank());
  const auto s = detail::split_at(a.shape(), axis);
  if (s.extent == 0) fail(ErrorKind::shape, "mean over an empty axis");
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + axis);
  std::vector<T> out(static_cast<std::size_t>(s.outer * s.inner), T(0));
  const auto x = a.data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t e = 0; e < s.extent; ++e) {
      const T* src = x.data() + (o * s.extent + e) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (std::int64_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  const T inv = T(1) / static_cast<T>(s.extent);
  for (auto& v : out) v *= inv;
  return detail::make_result<T>(std::move(out_shape), std::move(out), "mean", {&a}, [a, s, inv](Node<T>& self) {
    T* ga = detail::grad_of(a);
    for (std::int64_t o = 0; o < s.outer; ++o) {
      const T* g = self.grad.data() + o * s.inner;
      for (std::int64_t e = 0; e < s.extent; ++e) {
        T* dst = ga + (o * s.extent + e) * s.inner;
        for (std::int64_t i = 0; i < s.inner; ++i) dst[i] += g[i] * inv;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    fail(ErrorKind::shape, "matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  }
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m * n));
  kernel::gemm(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), false);
  return detail::make_result<T>(Shape{m, n}, std::move(out), "matmul", {&a, &b}, [a, b, m, n, k](Node<T>& self) {
    if (T* ga = detail::grad_of(a)) kernel::gemm(false, true, m, k, n, self.grad.data(), b.data().data(), ga, true);
    if (T* gb = detail::grad_of(b)) kernel::gemm(true, false, k, n, m, a.data().data(), self.grad.data(), gb, true);
  });
}

/// Affine map y = x W + b with x [n x in], W [in x out], b [out] (may be undefined).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(0)) {
    fail(ErrorKind::shape, "linear: input " + to_string(x.shape()) + " vs weight " + to_string(weight.shape()));
  }
  const std::int64_t rows = x.dim(0), in = x.dim(1), out_dim = weight.dim(1);
  if (bias.defined() && bias.shape() != Shape{out_dim}) {
    fail(ErrorKind::shape, "linear: bias " + to_string(bias.shape()) + " for output width " + std::to_string(out_dim));
  }
  std::vector<T> out(static_cast<std::size_t>(rows * out_dim));
  if (bias.defined()) {
    const auto bv = bias.data();
    for (std::int64_t r = 0; r < rows; ++r) std::copy(bv.begin(), bv.end(), out.begin() + r * out_dim);
  }
  kernel::gemm(false, false, rows, out_dim, in, x.data().data(), weight.data().data(), out.data(), bias.defined());
  return detail::make_result<T>(
      Shape{rows, out_dim}, std::move(out), "linear", {&x, &weight, &bias},
      [x, weight, bias, rows, in, out_dim](Node<T>& self) {
        const T* g = self.grad.data();
        if (T* gx = detail::grad_of(x)) kernel::gemm(false, true, rows, in, out_dim, g, weight.data().data(), gx, true);
        if (T* gw = detail::grad_of(weight)) kernel::gemm(true, false, in, out_dim, rows, x.data().data(), g, gw, true);
        if (T* gb = detail::grad_of(bias)) {
          for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t c = 0; c < out_dim; ++c) gb[c] += g[r * out_dim + c];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Layout

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    fail(ErrorKind::shape, "reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), "reshape", {&a}, [a](Node<T>& self) {
    T* ga = detail::grad_of(a);
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

/// General axis permutation: out.shape[i] = in.shape[perm[i]].
template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::int64_t>& perm) {
  const auto rank = a.rank();
  if (static_cast<std::int64_t>(perm.size()) != rank) fail(ErrorKind::shape, "permute: wrong permutation length");
  std::vector<bool> seen(rank, false);
  for (const auto p : perm) {
    if (p < 0 || p >= rank || seen[p]) fail(ErrorKind::shape, "permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(rank);
  std::vector<std::int64_t> in_strides(rank, 1);
  for (std::int64_t i = rank - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * a.shape()[i + 1];
  std::vector<std::int64_t> strides(rank);
  for (std::int64_t i = 0; i < rank; ++i) {
    out_shape[i] = a.shape()[perm[i]];
    strides[i] = in_strides[perm[i]];
  }
  // source offset of every output element, in output order
  std::vector<std::int64_t> source(static_cast<std::size_t>(a.numel()));
  std::vector<std::int64_t> index(rank, 0);
  std::int64_t offset = 0;
  for (std::int64_t flat = 0; flat < a.numel(); ++flat) {
    source[flat] = offset;
    for (std::int64_t d = rank - 1; d >= 0; --d) {
      ++index[d];
      offset += strides[d];
      if (index[d] < out_shape[d]) break;
      offset -= strides[d] * index[d];
      index[d] = 0;
    }
  }
  std::vector<T> out(static_cast<std::size_t>(a.numel()));
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[source[i]];
  return detail::make_result<T>(std::move(out_shape), std::move(out), "permute", {&a},
                                [a, source = std::move(source)](Node<T>& self) {
                                  T* ga = detail::grad_of(a);
                                  for (std::size_t i = 0; i < source.size(); ++i) ga[source[i]] += self.grad[i];
                                });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a.shape(), 2, "transpose");
  const std::int64_t rows = a.dim(0), cols = a.dim(1);
  std::vector<T> out(static_cast<std::size_t>(a.numel()));
  kernel::transpose(a.data().data(), rows, cols, out.data());
  return detail::make_result<T>(Shape{cols, rows}, std::move(out), "transpose", {&a}, [a, rows, cols](Node<T>& self) {
    T* ga = detail::grad_of(a);
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t c = 0; c < cols; ++c) ga[r * cols + c] += self.grad[c * rows + r];
    }
  });
}

/// Half-open range [begin, end) along one axis.
template <class T>
Tensor<T> slice(const Tensor<T>& a, std::int64_t axis, std::int64_t begin, std::int64_t end) {
  axis = detail::normalize_axis(axis, a.rank());
  const auto s = detail::split_at(a.shape(), axis);
  if (begin < 0 || end > s.extent || begin > end) {
    fail(ErrorKind::shape, "slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for " +
                               to_string(a.shape()) + " axis " + std::to_string(axis));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::int64_t len = end - begin;
  std::vector<T> out(static_cast<std::size_t>(s.outer * len * s.inner));
  const auto x = a.data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data() + (o * s.extent + begin) * s.inner, len * s.inner, out.data() + o * len * s.inner);
  }
  return detail::make_result<T>(std::move(out_shape), std::move(out), "slice", {&a},
                                [a, s, begin, len](Node<T>& self) {
                                  T* ga = detail::grad_of(a);
                                  for (std::int64_t o = 0; o < s.outer; ++o) {
                                    const T* g = self.grad.data() + o * len * s.inner;
                                    T* dst = ga + (o * s.extent + begin) * s.inner;
                                    for (std::int64_t i = 0; i < len * s.inner; ++i) dst[i] += g[i];
                                  }
                                });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::int64_t axis) {
  if (parts.empty()) fail(ErrorKind::shape, "concat of zero tensors");
  axis = detail::normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape expect = parts[0].shape();
    expect[axis] = p.shape().size() > static_cast<std::size_t>(axis) ? p.shape()[axis] : -1;
    if (p.shape() != expect) {
      fail(ErrorKind::shape, "concat: " + to_string(p.shape()) + " incompatible with " + to_string(parts[0].shape()) +
                                 " along axis " + std::to_string(axis));
    }
    out_shape[axis] += p.shape()[axis];
  }
  const auto s = detail::split_at(out_shape, axis);
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    const std::int64_t len = p.shape()[axis];
    const auto x = p.data();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      std::copy_n(x.data() + o * len * s.inner, len * s.inner, out.data() + (o * s.extent + at) * s.inner);
    }
    at += len;
  }
  return detail::make_result<T>(std::move(out_shape), std::move(out), "concat", parts,
                                [parts, offsets, s, axis](Node<T>& self) {
                                  for (std::size_t k = 0; k < parts.size(); ++k) {
                                    T* gp = detail::grad_of(parts[k]);
                                    if (!gp) continue;
                                    const std::int64_t len = parts[k].shape()[axis];
                                    for (std::int64_t o = 0; o < s.outer; ++o) {
                                      const T* g = self.grad.data() + (o * s.extent + offsets[k]) * s.inner;
                                      T* dst = gp + o * len * s.inner;
                                      for (std::int64_t i = 0; i < len * s.inner; ++i) dst[i] += g[i];
                                    }
                                  }
                                });
}

/// Rows of `table` [V x D] selected by `indices` -> [n x D].
template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<std::int64_t>& indices) {
  detail::require_rank(table.shape(), 2, "embedding_lookup");
  const std::int64_t vocab = table.dim(0), width = table.dim(1);
  const auto n = static_cast<std::int64_t>(indices.size());
  std::vector<T> out(static_cast<std::size_t>(n * width));
  const auto x = table.data();
  for (std::int64_t r = 0; r < n; ++r) {
    if (indices[r] < 0 || indices[r] >= vocab) {
      fail(ErrorKind::shape, "embedding index " + std::to_string(indices[r]) + " outside table of " +
                                 std::to_string(vocab) + " rows");
    }
    std::copy_n(x.data() + indices[r] * width, width, out.data() + r * width);
  }
  return detail::make_result<T>(Shape{n, width}, std::move(out), "embedding_lookup", {&table},
                                [table, indices, width](Node<T>& self) {
                                  T* gt = detail::grad_of(table);
                                  for (std::size_t r = 0; r < indices.size(); ++r) {
                                    const T* g = self.grad.data() + r * width;
                                    T* dst = gt + indices[r] * width;
                                    for (std::int64_t c = 0; c < width; ++c) dst[c] += g[c];
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Normalization

/// exp(x / tau) normalized along `axis`, max-subtracted.
template <class T>
Tensor<T> softmax(const Tensor<T>& a, std::int64_t axis, T tau = T(1)) {
  if (!(tau > T(0))) fail(ErrorKind::config, "softmax temperature must be positive, got " + std::to_string(tau));
  axis = detail::normalize_axis(axis, a.rank());
  const auto s = detail::split_at(a.shape(), axis);
  std::vector<T> out(static_cast<std::size_t>(a.numel()));
  const auto x = a.data();
  const T inv_tau = T(1) / tau;
  if (s.inner == 1) {
    for (std::int64_t o = 0; o < s.outer; ++o) {
      T* row = out.data() + o * s.extent;
      std::copy_n(x.data() + o * s.extent, s.extent, row);
      const T total = vm::exp_shifted(row, s.extent, vm::max(row, s.extent), inv_tau);
      const T inv_total = T(1) / total;
      for (std::int64_t e = 0; e < s.extent; ++e) row[e] *= inv_total;
    }
  } else {
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t i = 0; i < s.inner; ++i) {
        const std::int64_t base = o * s.extent * s.inner + i;
        T peak = -std::numeric_limits<T>::infinity();
        for (std::int64_t e = 0; e < s.extent; ++e) peak = std::max(peak, x[base + e * s.inner]);
        T total = 0;
        for (std::int64_t e = 0; e < s.extent; ++e) {
          const T v = vm::exp((x[base + e * s.inner] - peak) * inv_tau);
          out[base + e * s.inner] = v;
          total += v;
        }
        for (std::int64_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= total;
      }
    }
  }
  return detail::make_result<T>(a.shape(), std::move(out), "softmax", {&a}, [a, s, tau](Node<T>& self) {
    T* ga = detail::grad_of(a);
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t i = 0; i < s.inner; ++i) {
        const std::int64_t base = o * s.extent * s.inner + i;
        T dot = 0;
        for (std::int64_t e = 0; e < s.extent; ++e) dot += g[base + e * s.inner] * y[base + e * s.inner];
        for (std::int64_t e = 0; e < s.extent; ++e) {
          const auto k = base + e * s.inner;
          ga[k] += y[k] * (g[k] - dot) / tau;
        }
      }
    }
  });
}

/// Per-row layer normalization over the last axis. Rows whose variance is
/// below eps normalize to zero before the affine part.
template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-6)) {
  const std::int64_t width = x.dim(-1);
  if (gamma.shape() != Shape{width} || beta.shape() != Shape{width}) {
    fail(ErrorKind::shape, "layernorm: scale/shift must be [" + std::to_string(width) + "]");
  }
  const std::int64_t rows = x.numel() / std::max<std::int64_t>(1, width);
  std::vector<T> normed(static_cast<std::size_t>(x.numel()));
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * width;
    T mu = 0;
    for (std::int64_t c = 0; c < width; ++c) mu += row[c];
    mu /= static_cast<T>(width);
    T var = 0;
    for (std::int64_t c = 0; c < width; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(width);
    const T is = var < eps ? T(0) : T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::int64_t c = 0; c < width; ++c) {
      const T n = (row[c] - mu) * is;
      normed[r * width + c] = n;
      out[r * width + c] = n * gv[c] + bv[c];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), "layernorm", {&x, &gamma, &beta},
      [x, gamma, beta, normed = std::move(normed), inv_std = std::move(inv_std), rows, width](Node<T>& self) {
        const T* g = self.grad.data();
        T* gx = detail::grad_of(x);
        T* gg = detail::grad_of(gamma);
        T* gb = detail::grad_of(beta);
        const auto gv = gamma.data();
        std::vector<T> dn(static_cast<std::size_t>(width));
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* gr = g + r * width;
          const T* nr = normed.data() + r * width;
          if (gg) {
            for (std::int64_t c = 0; c < width; ++c) gg[c] += gr[c] * nr[c];
          }
          if (gb) {
            for (std::int64_t c = 0; c < width; ++c) gb[c] += gr[c];
          }
          if (!gx || inv_std[r] == T(0)) continue;
          T mean_dn = 0, mean_dn_n = 0;
          for (std::int64_t c = 0; c < width; ++c) {
            dn[c] = gr[c] * gv[c];
            mean_dn += dn[c];
            mean_dn_n += dn[c] * nr[c];
          }
          mean_dn /= static_cast<T>(width);
          mean_dn_n /= static_cast<T>(width);
          T* gxr = gx + r * width;
          for (std::int64_t c = 0; c < width; ++c) gxr[c] += inv_std[r] * (dn[c] - mean_dn - nr[c] * mean_dn_n);
        }
      });
}

// ---------------------------------------------------------------------------
// Volumetric ops on [C x T x H x W]

inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel, std::int64_t stride, std::int64_t pad) {
  const std::int64_t span = in + 2 * pad - kernel;
  if (span < 0 || stride < 1) return 0;
  return span / stride + 1;
}

/// Cross-correlation. weight is [C_out x C_in/groups x kT x kH x kW]; groups is
/// 1 (dense) or C_in == C_out (depthwise). bias may be undefined.
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Extent3 stride, Extent3 padding,
                 std::int64_t groups = 1) {
  detail::require_rank(x.shape(), 4, "conv3d input");
  detail::require_rank(weight.shape(), 5, "conv3d kernel");
  const std::int64_t cin = x.dim(0), tin = x.dim(1), hin = x.dim(2), win = x.dim(3);
  const std::int64_t cout = weight.dim(0);
  const Extent3 k{weight.dim(2), weight.dim(3), weight.dim(4)};
  const bool depthwise = groups != 1;
  if (depthwise && !(groups == cin && cout == cin && weight.dim(1) == 1)) {
    fail(ErrorKind::config, "conv3d: only dense or depthwise grouping is supported");
  }
  if (!depthwise && weight.dim(1) != cin) {
    fail(ErrorKind::shape, "conv3d: input " + to_string(x.shape()) + " vs kernel " + to_string(weight.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{cout}) fail(ErrorKind::shape, "conv3d: bias shape");
  const Extent3 o{conv_out_extent(tin, k.t, stride.t, padding.t), conv_out_extent(hin, k.h, stride.h, padding.h),
                  conv_out_extent(win, k.w, stride.w, padding.w)};
  if (o.t < 1 || o.h < 1 || o.w < 1) {
    fail(ErrorKind::config, "conv3d: non-positive output extent " + to_string(o) + " for input " +
                                to_string(x.shape()) + ", kernel " + to_string(k) + ", stride " + to_string(stride));
  }
  const std::int64_t plane = o.volume();
  const auto xv = x.data();

  if (depthwise) {
    std::vector<T> out(static_cast<std::size_t>(cout * plane), T(0));
    const auto wv = weight.data();
    auto visit = [=](auto&& body) {
      for (std::int64_t c = 0; c < cin; ++c) {
        for (std::int64_t ot = 0; ot < o.t; ++ot) {
          for (std::int64_t oh = 0; oh < o.h; ++oh) {
            for (std::int64_t ow = 0; ow < o.w; ++ow) {
              const std::int64_t oi = ((c * o.t + ot) * o.h + oh) * o.w + ow;
              for (std::int64_t kt = 0; kt < k.t; ++kt) {
                const std::int64_t it = ot * stride.t - padding.t + kt;
                if (it < 0 || it >= tin) continue;
                for (std::int64_t kh = 0; kh < k.h; ++kh) {
                  const std::int64_t ih = oh * stride.h - padding.h + kh;
                  if (ih < 0 || ih >= hin) continue;
                  for (std::int64_t kw = 0; kw < k.w; ++kw) {
                    const std::int64_t iw = ow * stride.w - padding.w + kw;
                    if (iw < 0 || iw >= win) continue;
                    body(oi, ((c * tin + it) * hin + ih) * win + iw, ((c * k.t + kt) * k.h + kh) * k.w + kw);
                  }
                }
              }
            }
          }
        }
      }
    };
    visit([&](std::int64_t oi, std::int64_t xi, std::int64_t wi) { out[oi] += xv[xi] * wv[wi]; });
    if (bias.defined()) {
      for (std::int64_t c = 0; c < cout; ++c) {
        for (std::int64_t p = 0; p < plane; ++p) out[c * plane + p] += bias.data()[c];
      }
    }
    return detail::make_result<T>(Shape{cout, o.t, o.h, o.w}, std::move(out), "conv3d_depthwise",
                                  {&x, &weight, &bias}, [x, weight, bias, visit, plane, cout](Node<T>& self) {
                                    const T* g = self.grad.data();
                                    T* gx = detail::grad_of(x);
                                    T* gw = detail::grad_of(weight);
                                    const auto xv = x.data();
                                    const auto wv = weight.data();
                                    if (gx || gw) {
                                      visit([&](std::int64_t oi, std::int64_t xi, std::int64_t wi) {
                                        if (gx) gx[xi] += g[oi] * wv[wi];
                                        if (gw) gw[wi] += g[oi] * xv[xi];
                                      });
                                    }
                                    if (T* gb = detail::grad_of(bias)) {
                                      for (std::int64_t c = 0; c < cout; ++c) {
                                        for (std::int64_t p = 0; p < plane; ++p) gb[c] += g[c * plane + p];
                                      }
                                    }
                                  });
  }

  // dense: im2col then one GEMM
  const std::int64_t patch = cin * k.volume();
  std::vector<T> cols(static_cast<std::size_t>(patch * plane), T(0));
  for (std::int64_t c = 0; c < cin; ++c) {
    for (std::int64_t kt = 0; kt < k.t; ++kt) {
      for (std::int64_t kh = 0; kh < k.h; ++kh) {
        for (std::int64_t kw = 0; kw < k.w; ++kw) {
          const std::int64_t row = ((c * k.t + kt) * k.h + kh) * k.w + kw;
          T* dst = cols.data() + row * plane;
          for (std::int64_t ot = 0; ot < o.t; ++ot) {
            const std::int64_t it = ot * stride.t - padding.t + kt;
            if (it < 0 || it >= tin) continue;
            for (std::int64_t oh = 0; oh < o.h; ++oh) {
              const std::int64_t ih = oh * stride.h - padding.h + kh;
              if (ih < 0 || ih >= hin) continue;
              for (std::int64_t ow = 0; ow < o.w; ++ow) {
                const std::int64_t iw = ow * stride.w - padding.w + kw;
                if (iw < 0 || iw >= win) continue;
                dst[(ot * o.h + oh) * o.w + ow] = xv[((c * tin + it) * hin + ih) * win + iw];
              }
            }
          }
        }
      }
    }
  }
  std::vector<T> out(static_cast<std::size_t>(cout * plane));
  if (bias.defined()) {
    for (std::int64_t c = 0; c < cout; ++c) std::fill_n(out.data() + c * plane, plane, bias.data()[c]);
  }
  kernel::gemm(false, false, cout, plane, patch, weight.data().data(), cols.data(), out.data(), bias.defined());
  return detail::make_result<T>(
      Shape{cout, o.t, o.h, o.w}, std::move(out), "conv3d", {&x, &weight, &bias},
      [x, weight, bias, cols = std::move(cols), cin, tin, hin, win, cout, k, o, stride, padding, patch,
       plane](Node<T>& self) {
        const T* g = self.grad.data();
        if (T* gw = detail::grad_of(weight)) kernel::gemm(false, true, cout, patch, plane, g, cols.data(), gw, true);
        if (T* gb = detail::grad_of(bias)) {
          for (std::int64_t c = 0; c < cout; ++c) {
            for (std::int64_t p = 0; p < plane; ++p) gb[c] += g[c * plane + p];
          }
        }
        T* gx = detail::grad_of(x);
        if (!gx) return;
        std::vector<T> dcols(static_cast<std::size_t>(patch * plane));
        kernel::gemm(true, false, patch, plane, cout, weight.data().data(), g, dcols.data(), false);
        for (std::int64_t c = 0; c < cin; ++c) {
          for (std::int64_t kt = 0; kt < k.t; ++kt) {
            for (std::int64_t kh = 0; kh < k.h; ++kh) {
              for (std::int64_t kw = 0; kw < k.w; ++kw) {
                const std::int64_t row = ((c * k.t + kt) * k.h + kh) * k.w + kw;
                const T* src = dcols.data() + row * plane;
                for (std::int64_t ot = 0; ot < o.t; ++ot) {
                  const std::int64_t it = ot * stride.t - padding.t + kt;
                  if (it < 0 || it >= tin) continue;
                  for (std::int64_t oh = 0; oh < o.h; ++oh) {
                    const std::int64_t ih = oh * stride.h - padding.h + kh;
                    if (ih < 0 || ih >= hin) continue;
                    for (std::int64_t ow = 0; ow < o.w; ++ow) {
                      const std::int64_t iw = ow * stride.w - padding.w + kw;
                      if (iw < 0 || iw >= win) continue;
                      gx[((c * tin + it) * hin + ih) * win + iw] += src[(ot * o.h + oh) * o.w + ow];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

/// Max pooling without padding. Ties resolve to the first maximum in scan order.
template <class T>
Tensor<T> max_pool3d(const Tensor<T>& x, Extent3 kernel, Extent3 stride) {
  detail::require_rank(x.shape(), 4, "max_pool3d");
  const std::int64_t c = x.dim(0), tin = x.dim(1), hin = x.dim(2), win = x.dim(3);
  const Extent3 o{conv_out_extent(tin, kernel.t, stride.t, 0), conv_out_extent(hin, kernel.h, stride.h, 0),
                  conv_out_extent(win, kernel.w, stride.w, 0)};
  if (o.t < 1 || o.h < 1 || o.w < 1) fail(ErrorKind::config, "max_pool3d: non-positive output extent");
  std::vector<T> out(static_cast<std::size_t>(c * o.volume()));
  std::vector<std::int64_t> argmax(out.size());
  const auto xv = x.data();
  std::int64_t oi = 0;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t ot = 0; ot < o.t; ++ot) {
      for (std::int64_t oh = 0; oh < o.h; ++oh) {
        for (std::int64_t ow = 0; ow < o.w; ++ow, ++oi) {
          T best = -std::numeric_limits<T>::infinity();
          std::int64_t best_index = -1;
          for (std::int64_t kt = 0; kt < kernel.t; ++kt) {
            for (std::int64_t kh = 0; kh < kernel.h; ++kh) {
              for (std::int64_t kw = 0; kw < kernel.w; ++kw) {
                const std::int64_t xi =
                    ((ch * tin + ot * stride.t + kt) * hin + oh * stride.h + kh) * win + ow * stride.w + kw;
                if (best_index < 0 || xv[xi] > best) {
                  best = xv[xi];
                  best_index = xi;
                }
              }
            }
          }
          out[oi] = best;
          argmax[oi] = best_index;
        }
      }
    }
  }
  return detail::make_result<T>(Shape{c, o.t, o.h, o.w}, std::move(out), "max_pool3d", {&x},
                                [x, argmax = std::move(argmax)](Node<T>& self) {
                                  T* gx = detail::grad_of(x);
                                  for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += self.grad[i];
                                });
}

namespace detail {

/// Linear interpolation taps for one axis, align_corners = false.
struct Taps {
  std::vector<std::int64_t> lo, hi;
  std::vector<double> frac;
};

inline Taps interpolation_taps(std::int64_t in, std::int64_t out) {
  Taps taps;
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::int64_t>(std::floor(src));
    lo = std::min(lo, in - 1);
    const std::int64_t hi = std::min(lo + 1, in - 1);
    taps.lo.push_back(lo);
    taps.hi.push_back(hi);
    taps.frac.push_back(src - static_cast<double>(lo));
  }
  return taps;
}

}  // namespace detail

/// Trilinear resampling of [C x T x H x W] to [C x T2 x H2 x W2] (align_corners = false).
template <class T>
Tensor<T> trilinear_resize(const Tensor<T>& x, Extent3 target) {
  detail::require_rank(x.shape(), 4, "trilinear_resize");
  if (target.t < 1 || target.h < 1 || target.w < 1) {
    fail(ErrorKind::shape, "trilinear_resize: target " + to_string(target) + " must be positive");
  }
  const std::int64_t c = x.dim(0), tin = x.dim(1), hin = x.dim(2), win = x.dim(3);
  if (tin < 1 || hin < 1 || win < 1) fail(ErrorKind::shape, "trilinear_resize: empty input");
  const auto tt = detail::interpolation_taps(tin, target.t);
  const auto th = detail::interpolation_taps(hin, target.h);
  const auto tw = detail::interpolation_taps(win, target.w);
  // visit(out_index, in_index, weight) over all eight corners
  auto visit = [=](auto&& body) {
    std::int64_t oi = 0;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t t = 0; t < target.t; ++t) {
        const std::int64_t t_idx[2] = {tt.lo[t], tt.hi[t]};
        const T t_w[2] = {T(1 - tt.frac[t]), T(tt.frac[t])};
        for (std::int64_t h = 0; h < target.h; ++h) {
          const std::int64_t h_idx[2] = {th.lo[h], th.hi[h]};
          const T h_w[2] = {T(1 - th.frac[h]), T(th.frac[h])};
          for (std::int64_t w = 0; w < target.w; ++w, ++oi) {
            const std::int64_t w_idx[2] = {tw.lo[w], tw.hi[w]};
            const T w_w[2] = {T(1 - tw.frac[w]), T(tw.frac[w])};
            for (int a = 0; a < 2; ++a) {
              for (int b = 0; b < 2; ++b) {
                for (int d = 0; d < 2; ++d) {
                  body(oi, ((ch * tin + t_idx[a]) * hin + h_idx[b]) * win + w_idx[d], t_w[a] * h_w[b] * w_w[d]);
                }
              }
            }
          }
        }
      }
    }
  };
  std::vector<T> out(static_cast<std::size_t>(c * target.volume()), T(0));
  const auto xv = x.data();
  visit([&](std::int64_t oi, std::int64_t xi, T weight) { out[oi] += weight * xv[xi]; });
  return detail::make_result<T>(Shape{c, target.t, target.h, target.w}, std::move(out), "trilinear_resize", {&x},
                                [x, visit](Node<T>& self) {
                                  T* gx = detail::grad_of(x);
                                  const T* g = self.grad.data();
                                  visit([&](std::int64_t oi, std::int64_t xi, T weight) { gx[xi] += weight * g[oi]; });
                                });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over rows (frames) of sum_j label * log(label / pred), 0 log 0 = 0.
/// `label` is treated as a constant target.
template <class T>
Tensor<T> kl_div(const Tensor<T>& pred, const Tensor<T>& label) {
  detail::require_same_shape(pred.shape(), label.shape(), "kl_div");
  const std::int64_t frames = pred.rank() == 0 ? 1 : pred.dim(0);
  const auto p = pred.data();
  const auto l = label.data();
  double total = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    if (l[i] > T(0)) total += static_cast<double>(l[i]) * (std::log(static_cast<double>(l[i])) - std::log(static_cast<double>(p[i])));
  }
  const T value = static_cast<T>(total / static_cast<double>(frames));
  return detail::make_result<T>(Shape{}, {value}, "kl_div", {&pred}, [pred, label, frames](Node<T>& self) {
    T* gp = detail::grad_of(pred);
    const auto p = pred.data();
    const auto l = label.data();
    const T g = self.grad[0] / static_cast<T>(frames);
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
      if (l[i] > T(0)) gp[i] -= g * l[i] / p[i];
    }
  });
}

/// -log softmax(logits)[target] for a logit vector.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::int64_t target) {
  if (logits.rank() != 1) fail(ErrorKind::shape, "cross_entropy expects a logit vector");
  const std::int64_t classes = logits.dim(0);
  if (target < 0 || target >= classes) {
    fail(ErrorKind::usage, "class index " + std::to_string(target) + " outside [0, " + std::to_string(classes) + ")");
  }
  const auto z = logits.data();
  const T peak = *std::max_element(z.begin(), z.end());
  T total = 0;
  for (const auto v : z) total += std::exp(v - peak);
  const T log_norm = peak + std::log(total);
  return detail::make_result<T>(Shape{}, {log_norm - z[target]}, "cross_entropy", {&logits},
                                [logits, target, log_norm](Node<T>& self) {
                                  T* gz = detail::grad_of(logits);
                                  const auto z = logits.data();
                                  for (std::int64_t i = 0; i < logits.numel(); ++i) {
                                    const T prob = std::exp(z[i] - log_norm);
                                    gz[i] += self.grad[0] * (prob - (i == target ? T(1) : T(0)));
                                  }
                                });
}

}  // namespace glc
