#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <vector>

#include "glc/parallel.hpp"

namespace glc::kernel {

/// Row-major transpose of a rows x cols matrix.
template <class T>
void transpose(const T* src, std::int64_t rows, std::int64_t cols, T* dst) {
  constexpr std::int64_t block = 32;
  for (std::int64_t r0 = 0; r0 < rows; r0 += block) {
    for (std::int64_t c0 = 0; c0 < cols; c0 += block) {
      const std::int64_t r1 = std::min(rows, r0 + block);
      const std::int64_t c1 = std::min(cols, c0 + block);
      for (std::int64_t r = r0; r < r1; ++r) {
        for (std::int64_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
      }
    }
  }
}

namespace detail {

// 64-byte SIMD lanes; the compiler lowers these to whatever the target has.
template <class T>
struct Lane {
  static constexpr int width = 64 / sizeof(T);
  typedef T type __attribute__((vector_size(64)));
};

template <class T>
inline typename Lane<T>::type load(const T* p) {
  typename Lane<T>::type v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

template <class T>
inline void store(T* p, typename Lane<T>::type v) {
  std::memcpy(p, &v, sizeof(v));
}

constexpr int tile_rows = 6;
constexpr std::int64_t depth_block = 256;

/// Strided view of op(A): element (r, p) lives at data[r * rs + p * cs].
template <class T>
struct Operand {
  const T* data;
  std::int64_t rs;
  std::int64_t cs;
};

/// C[R x NV*W] tile (+)= sum_p A[R x k] * B[k x NV*W]. Accumulators stay in
/// registers over the k loop and each output element is summed in increasing
/// p order.
template <class T, int R, int NV>
inline void micro_tile(std::int64_t k, Operand<T> a, const T* b, std::int64_t ldb, T* c, std::int64_t ldc,
                       bool accumulate) {
  using V = typename Lane<T>::type;
  constexpr int W = Lane<T>::width;
  V acc[R][NV];
#pragma GCC unroll 8
  for (int r = 0; r < R; ++r) {
#pragma GCC unroll 2
    for (int v = 0; v < NV; ++v) acc[r][v] = accumulate ? load(c + r * ldc + v * W) : V{};
  }
  const T* ap = a.data;
  for (std::int64_t p = 0; p < k; ++p, ap += a.cs) {
    V bv[NV];
#pragma GCC unroll 2
    for (int v = 0; v < NV; ++v) bv[v] = load(b + p * ldb + v * W);
#pragma GCC unroll 8
    for (int r = 0; r < R; ++r) {
      const T s = ap[r * a.rs];
#pragma GCC unroll 2
      for (int v = 0; v < NV; ++v) acc[r][v] += s * bv[v];
    }
  }
#pragma GCC unroll 8
  for (int r = 0; r < R; ++r) {
#pragma GCC unroll 2
    for (int v = 0; v < NV; ++v) store(c + r * ldc + v * W, acc[r][v]);
  }
}

template <class T, int NV>
inline void micro_rows(int rows, std::int64_t k, Operand<T> a, const T* b, std::int64_t ldb, T* c, std::int64_t ldc,
                       bool accumulate) {
  switch (rows) {
    case 6: micro_tile<T, 6, NV>(k, a, b, ldb, c, ldc, accumulate); break;
    case 5: micro_tile<T, 5, NV>(k, a, b, ldb, c, ldc, accumulate); break;
    case 4: micro_tile<T, 4, NV>(k, a, b, ldb, c, ldc, accumulate); break;
    case 3: micro_tile<T, 3, NV>(k, a, b, ldb, c, ldc, accumulate); break;
    case 2: micro_tile<T, 2, NV>(k, a, b, ldb, c, ldc, accumulate); break;
    default: micro_tile<T, 1, NV>(k, a, b, ldb, c, ldc, accumulate); break;
  }
}

}  // namespace detail

/// C[M x N] (+)= op(A) * op(B), all row-major. op(A) is M x K, op(B) is K x N.
/// A transposed A is read in place; a transposed B is materialized. Output
/// rows are split across workers in fixed chunks and every element is summed
/// in increasing k order, so results are independent of the thread count.
template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b,
          T* c, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    return;
  }
  std::vector<T> b_buffer;
  if (trans_b) {
    b_buffer.resize(static_cast<std::size_t>(k * n));
    transpose(b, n, k, b_buffer.data());
    b = b_buffer.data();
  }
  constexpr std::int64_t W = detail::Lane<T>::width;
  constexpr std::int64_t panel = 2 * W;
  constexpr std::int64_t mr = detail::tile_rows;
  const detail::Operand<T> op_a = trans_a ? detail::Operand<T>{a, 1, m} : detail::Operand<T>{a, k, 1};
  const std::int64_t full_cols = n / panel * panel;
  const std::int64_t tail_cols = n - full_cols;
  const std::int64_t tail_width = tail_cols > W ? panel : W;
  // the ragged column edge goes through a zero-padded copy of B's last panel
  std::vector<T> b_tail;
  if (tail_cols) {
    b_tail.assign(static_cast<std::size_t>(k * tail_width), T(0));
    for (std::int64_t p = 0; p < k; ++p) std::copy_n(b + p * n + full_cols, tail_cols, b_tail.data() + p * tail_width);
  }
  const std::int64_t row_tiles = (m + mr - 1) / mr;
  parallel_for(row_tiles, 4, [&](std::int64_t tile_begin, std::int64_t tile_end) {
    T c_tail[detail::tile_rows * panel];
    for (std::int64_t p0 = 0; p0 < k; p0 += detail::depth_block) {
      const std::int64_t kc = std::min(detail::depth_block, k - p0);
      const bool acc = accumulate || p0 > 0;
      for (std::int64_t t = tile_begin; t < tile_end; ++t) {
        const std::int64_t i = t * mr;
        const int rows = static_cast<int>(std::min(mr, m - i));
        const detail::Operand<T> at{op_a.data + i * op_a.rs + p0 * op_a.cs, op_a.rs, op_a.cs};
        for (std::int64_t j = 0; j < full_cols; j += panel) {
          detail::micro_rows<T, 2>(rows, kc, at, b + p0 * n + j, n, c + i * n + j, n, acc);
        }
        if (!tail_cols) continue;
        for (int r = 0; r < rows; ++r) {
          std::fill_n(c_tail + r * tail_width, tail_width, T(0));
          if (acc) std::copy_n(c + (i + r) * n + full_cols, tail_cols, c_tail + r * tail_width);
        }
        const T* bt = b_tail.data() + p0 * tail_width;
        if (tail_width == panel) {
          detail::micro_rows<T, 2>(rows, kc, at, bt, tail_width, c_tail, tail_width, acc);
        } else {
          detail::micro_rows<T, 1>(rows, kc, at, bt, tail_width, c_tail, tail_width, acc);
        }
        for (int r = 0; r < rows; ++r) std::copy_n(c_tail + r * tail_width, tail_cols, c + (i + r) * n + full_cols);
      }
    }
  });
}

}  // namespace glc::kernel
