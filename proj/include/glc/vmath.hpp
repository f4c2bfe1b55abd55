#pragma once

// Elementwise transcendental functions written so that plain loops over them
// vectorize. The float versions are polynomial approximations (exp within
// about 1 ulp, erf within 2e-7 absolute); double forwards to <cmath> so
// float64 verification runs against the library functions.

#include <bit>
#include <cmath>
#include <cstdint>
#include <type_traits>

namespace glc::vm {

inline float exp_approx(float x) {
  constexpr float log2e = 1.44269504088896341f;
  constexpr float ln2_hi = 0.693359375f;
  constexpr float ln2_lo = -2.12194440e-4f;
  const bool underflow = x < -87.3f;
  x = x < -87.3f ? -87.3f : x;
  x = x > 88.7f ? 88.7f : x;
  // round to nearest via the 1.5 * 2^23 shifter (std::floor blocks vectorization)
  const float n = (x * log2e + 12582912.0f) - 12582912.0f;
  const float r = x - n * ln2_hi - n * ln2_lo;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  const auto bits = static_cast<std::uint32_t>(static_cast<std::int32_t>(n) + 127) << 23;
  const float result = p * std::bit_cast<float>(bits);
  return underflow ? 0.0f : result;
}

/// Abramowitz-Stegun 7.1.26 with an odd extension.
inline float erf_approx(float x) {
  const float ax = std::fabs(x);
  const float t = 1.0f / (1.0f + 0.3275911f * ax);
  float p = 1.061405429f;
  p = p * t - 1.453152027f;
  p = p * t + 1.421413741f;
  p = p * t - 0.284496736f;
  p = p * t + 0.254829592f;
  const float y = 1.0f - p * t * exp_approx(-ax * ax);
  return std::copysign(y, x);
}

template <class T>
inline T exp(T x) {
  if constexpr (std::is_same_v<T, float>) {
    return exp_approx(x);
  } else {
    return std::exp(x);
  }
}

template <class T>
inline T erf(T x) {
  if constexpr (std::is_same_v<T, float>) {
    return erf_approx(x);
  } else {
    return std::erf(x);
  }
}

/// Sum with a fixed lane-parallel order (deterministic, vectorizable).
template <class T>
inline T sum(const T* x, std::int64_t n) {
  constexpr int lanes = 16;
  T part[lanes] = {};
  std::int64_t i = 0;
  for (; i + lanes <= n; i += lanes) {
    for (int l = 0; l < lanes; ++l) part[l] += x[i + l];
  }
  T total = 0;
  for (int l = 0; l < lanes; ++l) total += part[l];
  for (; i < n; ++i) total += x[i];
  return total;
}

template <class T>
inline T max(const T* x, std::int64_t n) {
  T peak = -INFINITY;
  for (std::int64_t i = 0; i < n; ++i) peak = x[i] > peak ? x[i] : peak;
  return peak;
}

/// x[i] = exp((x[i] - shift) * scale); returns the sum of the results.
template <class T>
inline T exp_shifted(T* x, std::int64_t n, T shift, T scale) {
  for (std::int64_t i = 0; i < n; ++i) x[i] = exp<T>((x[i] - shift) * scale);
  return sum(x, n);
}

}  // namespace glc::vm
