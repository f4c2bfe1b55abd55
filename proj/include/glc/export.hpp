#pragma once

// Grayscale PGM output for head maps and predicted heatmaps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "glc/error.hpp"
#include "glc/network.hpp"
#include "glc/ops.hpp"

namespace glc {

/// Binary PGM ("P5", maxval 255). Values are scaled by the map's maximum so
/// the brightest pixel is 255; an all-nonpositive map is written black.
inline std::vector<std::uint8_t> encode_pgm(std::span<const double> values, std::int64_t h, std::int64_t w) {
  if (static_cast<std::int64_t>(values.size()) != h * w) fail(ErrorKind::shape, "encode_pgm: size mismatch");
  const std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  double peak = 0.0;
  for (const auto v : values) peak = std::max(peak, v);
  for (const auto v : values) {
    const double s = peak > 0.0 ? std::clamp(v / peak, 0.0, 1.0) : 0.0;
    out.push_back(static_cast<std::uint8_t>(std::lround(255.0 * s)));
  }
  return out;
}

inline void write_pgm(const std::filesystem::path& path, std::span<const double> values, std::int64_t h, std::int64_t w) {
  const auto bytes = encode_pgm(values, h, w);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
}

/// One [h x w] map per head: the head's global-token affinity averaged over
/// time, trilinearly resized to the input resolution.
inline std::vector<std::vector<double>> head_maps_at_input(const GazeModel<float>& model, const Tensor<float>& clip) {
  const auto& cfg = model.config();
  const Grid g = model.glc_grid();
  std::vector<std::vector<double>> out;
  for (const auto& affinity : model.glc_head_maps(clip)) {
    std::vector<double> mean(static_cast<std::size_t>(g.h * g.w), 0.0);
    for (std::int64_t t = 0; t < g.t; ++t) {
      for (std::int64_t i = 0; i < g.h * g.w; ++i) mean[static_cast<std::size_t>(i)] += affinity[static_cast<std::size_t>(t * g.h * g.w + i)];
    }
    for (auto& v : mean) v /= static_cast<double>(g.t);
    NoGradGuard no_grad;
    const auto up = trilinear_resize(Tensor<double>(Shape{1, 1, g.h, g.w}, mean), {1, cfg.height, cfg.width});
    out.emplace_back(up.data().begin(), up.data().end());
  }
  return out;
}

/// Per-frame predicted heatmaps [frames][h x w], resized from the output grid
/// to the input resolution.
inline std::vector<std::vector<double>> predictions_at_input(const GazeModel<float>& model, const Tensor<float>& clip) {
  const auto& cfg = model.config();
  NoGradGuard no_grad;
  const auto heat = model.forward(clip);
  const Grid o = cfg.output_grid();
  std::vector<double> values(heat.data().begin(), heat.data().end());
  const auto up = trilinear_resize(Tensor<double>(Shape{1, o.t, o.h, o.w}, values), {o.t, cfg.height, cfg.width});
  std::vector<std::vector<double>> out;
  const auto hw = static_cast<std::size_t>(cfg.height * cfg.width);
  for (std::int64_t f = 0; f < o.t; ++f) {
    const auto begin = up.data().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(f) * hw);
    out.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(hw));
  }
  return out;
}

}  // namespace glc
