#pragma once

// Volumetric ops applied directly to token matrices. The input is
// [P + N x C]: the first P rows (global / class tokens) pass through
// unchanged and the N local rows form a T x H x W grid in T-major, then H,
// then W order. Working channels-last avoids transposing every token field to
// [C x T x H x W] and back, and lets the inner loops run over contiguous C.

#include <cstdint>
#include <string>
#include <vector>

#include "glc/error.hpp"
#include "glc/ops.hpp"
#include "glc/tensor.hpp"

namespace glc {

namespace detail {

inline void require_token_grid(const Shape& shape, std::int64_t prefix, Extent3 grid, const char* op) {
  if (shape.size() != 2 || prefix < 0 || shape[0] != prefix + grid.volume()) {
    fail(ErrorKind::shape, std::string(op) + ": tokens " + to_string(shape) + " do not hold " +
                               std::to_string(prefix) + " prefix rows plus grid " + to_string(grid));
  }
}

/// One (output row, input row, tap weight or kernel index) contribution.
struct TokenTap {
  std::int32_t out;
  std::int32_t in;
  std::int32_t tap;
};

}  // namespace detail

/// Depthwise cross-correlation over the local grid. weight is
/// [C x 1 x kT x kH x kW]; no bias.
template <class T>
Tensor<T> token_depthwise_conv(const Tensor<T>& x, std::int64_t prefix, Extent3 grid, const Tensor<T>& weight,
                               Extent3 stride, Extent3 padding) {
  detail::require_token_grid(x.shape(), prefix, grid, "token_depthwise_conv");
  const std::int64_t c = x.dim(1);
  if (weight.rank() != 5 || weight.dim(0) != c || weight.dim(1) != 1) {
    fail(ErrorKind::shape, "token_depthwise_conv: kernel " + to_string(weight.shape()) + " for width " +
                               std::to_string(c));
  }
  const Extent3 k{weight.dim(2), weight.dim(3), weight.dim(4)};
  const Extent3 o{conv_out_extent(grid.t, k.t, stride.t, padding.t), conv_out_extent(grid.h, k.h, stride.h, padding.h),
                  conv_out_extent(grid.w, k.w, stride.w, padding.w)};
  if (o.t < 1 || o.h < 1 || o.w < 1) {
    fail(ErrorKind::config, "token_depthwise_conv: non-positive output extent for grid " + to_string(grid));
  }
  const std::int64_t taps = k.volume();
  std::vector<detail::TokenTap> plan;
  plan.reserve(static_cast<std::size_t>(o.volume() * taps));
  for (std::int64_t ot = 0; ot < o.t; ++ot) {
    for (std::int64_t oh = 0; oh < o.h; ++oh) {
      for (std::int64_t ow = 0; ow < o.w; ++ow) {
        const auto oi = static_cast<std::int32_t>(prefix + (ot * o.h + oh) * o.w + ow);
        for (std::int64_t kt = 0; kt < k.t; ++kt) {
          const std::int64_t it = ot * stride.t - padding.t + kt;
          if (it < 0 || it >= grid.t) continue;
          for (std::int64_t kh = 0; kh < k.h; ++kh) {
            const std::int64_t ih = oh * stride.h - padding.h + kh;
            if (ih < 0 || ih >= grid.h) continue;
            for (std::int64_t kw = 0; kw < k.w; ++kw) {
              const std::int64_t iw = ow * stride.w - padding.w + kw;
              if (iw < 0 || iw >= grid.w) continue;
              plan.push_back({oi, static_cast<std::int32_t>(prefix + (it * grid.h + ih) * grid.w + iw),
                              static_cast<std::int32_t>((kt * k.h + kh) * k.w + kw)});
            }
          }
        }
      }
    }
  }
  // kernel as [taps x C] so each tap is a contiguous channel vector
  std::vector<T> wt(static_cast<std::size_t>(taps * c));
  kernel::transpose(weight.data().data(), c, taps, wt.data());

  const std::int64_t rows_out = prefix + o.volume();
  std::vector<T> out(static_cast<std::size_t>(rows_out * c), T(0));
  const T* xv = x.data().data();
  std::copy_n(xv, prefix * c, out.data());
  for (const auto& p : plan) {
    T* dst = out.data() + p.out * c;
    const T* src = xv + p.in * c;
    const T* w = wt.data() + p.tap * c;
    for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += w[ch] * src[ch];
  }
  return detail::make_result<T>(
      Shape{rows_out, c}, std::move(out), "token_depthwise_conv", {&x, &weight},
      [x, weight, prefix, c, taps, plan = std::move(plan), wt = std::move(wt)](Node<T>& self) {
        const T* g = self.grad.data();
        T* gx = detail::grad_of(x);
        T* gw = detail::grad_of(weight);
        const T* xv = x.data().data();
        if (gx) {
          for (std::int64_t i = 0; i < prefix * c; ++i) gx[i] += g[i];
        }
        std::vector<T> gwt(gw ? static_cast<std::size_t>(taps * c) : 0, T(0));
        for (const auto& p : plan) {
          const T* gr = g + p.out * c;
          if (gx) {
            T* dst = gx + p.in * c;
            const T* w = wt.data() + p.tap * c;
            for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += w[ch] * gr[ch];
          }
          if (gw) {
            T* dst = gwt.data() + p.tap * c;
            const T* src = xv + p.in * c;
            for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += gr[ch] * src[ch];
          }
        }
        if (gw) {
          for (std::int64_t ch = 0; ch < c; ++ch) {
            for (std::int64_t t = 0; t < taps; ++t) gw[ch * taps + t] += gwt[t * c + ch];
          }
        }
      });
}

/// Non-overlapping max pooling (kernel == stride) over the local grid. Ties
/// resolve to the first maximum in scan order.
template <class T>
Tensor<T> token_max_pool(const Tensor<T>& x, std::int64_t prefix, Extent3 grid, Extent3 kernel) {
  detail::require_token_grid(x.shape(), prefix, grid, "token_max_pool");
  if (kernel.t < 1 || kernel.h < 1 || kernel.w < 1 || grid.t % kernel.t || grid.h % kernel.h || grid.w % kernel.w) {
    fail(ErrorKind::config, "token_max_pool: grid " + to_string(grid) + " is not divisible by " + to_string(kernel));
  }
  const std::int64_t c = x.dim(1);
  const Extent3 o{grid.t / kernel.t, grid.h / kernel.h, grid.w / kernel.w};
  const std::int64_t rows_out = prefix + o.volume();
  std::vector<T> out(static_cast<std::size_t>(rows_out * c));
  std::vector<std::int32_t> argmax(static_cast<std::size_t>(o.volume() * c));
  const T* xv = x.data().data();
  std::copy_n(xv, prefix * c, out.data());
  std::int64_t oi = 0;
  for (std::int64_t ot = 0; ot < o.t; ++ot) {
    for (std::int64_t oh = 0; oh < o.h; ++oh) {
      for (std::int64_t ow = 0; ow < o.w; ++ow, ++oi) {
        T* best = out.data() + (prefix + oi) * c;
        std::int32_t* arg = argmax.data() + oi * c;
        bool first = true;
        for (std::int64_t kt = 0; kt < kernel.t; ++kt) {
          for (std::int64_t kh = 0; kh < kernel.h; ++kh) {
            for (std::int64_t kw = 0; kw < kernel.w; ++kw) {
              const auto row = static_cast<std::int32_t>(
                  prefix + ((ot * kernel.t + kt) * grid.h + oh * kernel.h + kh) * grid.w + ow * kernel.w + kw);
              const T* src = xv + row * c;
              for (std::int64_t ch = 0; ch < c; ++ch) {
                if (first || src[ch] > best[ch]) {
                  best[ch] = src[ch];
                  arg[ch] = row;
                }
              }
              first = false;
            }
          }
        }
      }
    }
  }
  return detail::make_result<T>(Shape{rows_out, c}, std::move(out), "token_max_pool", {&x},
                                [x, prefix, c, argmax = std::move(argmax)](Node<T>& self) {
                                  T* gx = detail::grad_of(x);
                                  const T* g = self.grad.data();
                                  for (std::int64_t i = 0; i < prefix * c; ++i) gx[i] += g[i];
                                  const std::int64_t n = static_cast<std::int64_t>(argmax.size()) / c;
                                  for (std::int64_t o = 0; o < n; ++o) {
                                    const T* gr = g + (prefix + o) * c;
                                    const std::int32_t* arg = argmax.data() + o * c;
                                    for (std::int64_t ch = 0; ch < c; ++ch) gx[arg[ch] * c + ch] += gr[ch];
                                  }
                                });
}

/// Trilinear resampling (align_corners = false) of the local grid to `target`.
template <class T>
Tensor<T> token_resize(const Tensor<T>& x, std::int64_t prefix, Extent3 grid, Extent3 target) {
  detail::require_token_grid(x.shape(), prefix, grid, "token_resize");
  if (target.t < 1 || target.h < 1 || target.w < 1) {
    fail(ErrorKind::shape, "token_resize: target " + to_string(target) + " must be positive");
  }
  const std::int64_t c = x.dim(1);
  const auto tt = detail::interpolation_taps(grid.t, target.t);
  const auto th = detail::interpolation_taps(grid.h, target.h);
  const auto tw = detail::interpolation_taps(grid.w, target.w);
  struct Tap {
    std::int32_t out;
    std::int32_t in;
    T weight;
  };
  std::vector<Tap> plan;
  plan.reserve(static_cast<std::size_t>(target.volume() * 8));
  std::int64_t oi = prefix;
  for (std::int64_t t = 0; t < target.t; ++t) {
    for (std::int64_t h = 0; h < target.h; ++h) {
      for (std::int64_t w = 0; w < target.w; ++w, ++oi) {
        const std::int64_t t_idx[2] = {tt.lo[t], tt.hi[t]};
        const std::int64_t h_idx[2] = {th.lo[h], th.hi[h]};
        const std::int64_t w_idx[2] = {tw.lo[w], tw.hi[w]};
        const T t_w[2] = {T(1 - tt.frac[t]), T(tt.frac[t])};
        const T h_w[2] = {T(1 - th.frac[h]), T(th.frac[h])};
        const T w_w[2] = {T(1 - tw.frac[w]), T(tw.frac[w])};
        for (int a = 0; a < 2; ++a) {
          for (int b = 0; b < 2; ++b) {
            for (int d = 0; d < 2; ++d) {
              const T weight = t_w[a] * h_w[b] * w_w[d];
              if (weight == T(0)) continue;
              plan.push_back({static_cast<std::int32_t>(oi),
                              static_cast<std::int32_t>(prefix + (t_idx[a] * grid.h + h_idx[b]) * grid.w + w_idx[d]),
                              weight});
            }
          }
        }
      }
    }
  }
  const std::int64_t rows_out = prefix + target.volume();
  std::vector<T> out(static_cast<std::size_t>(rows_out * c), T(0));
  const T* xv = x.data().data();
  std::copy_n(xv, prefix * c, out.data());
  for (const auto& p : plan) {
    T* dst = out.data() + p.out * c;
    const T* src = xv + p.in * c;
    for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += p.weight * src[ch];
  }
  return detail::make_result<T>(Shape{rows_out, c}, std::move(out), "token_resize", {&x},
                                [x, prefix, c, plan = std::move(plan)](Node<T>& self) {
                                  T* gx = detail::grad_of(x);
                                  const T* g = self.grad.data();
                                  for (std::int64_t i = 0; i < prefix * c; ++i) gx[i] += g[i];
                                  for (const auto& p : plan) {
                                    T* dst = gx + p.in * c;
                                    const T* src = g + p.out * c;
                                    for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += p.weight * src[ch];
                                  }
                                });
}

}  // namespace glc
