#pragma once

// Gaze labels, fixation filtering and thresholded-disk F1 evaluation.
// Coordinates are (x, y) = (column, row); output-grid coordinates are raw
// input pixels divided by the patch stride.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glc/error.hpp"

namespace glc {

/// Spatial constants of the label/metric protocol. The reference values are
/// defined for a 256-pixel crop (64-cell output grid) and scale with the crop.
struct LabelGeometry {
  double radius = 9.0;              // label truncation and ground-truth disk, output cells
  double sigma = 3.0;               // label std, output cells
  double saccade_threshold = 40.0;  // input pixels

  static LabelGeometry for_crop(std::int64_t crop_width) {
    const double s = static_cast<double>(crop_width) / 256.0;
    return {9.0 * s, 3.0 * s, 40.0 * s};
  }
};

inline bool inside_grid(std::int64_t h, std::int64_t w, double x, double y) {
  return std::isfinite(x) && std::isfinite(y) && x >= -0.5 && x <= static_cast<double>(w) - 0.5 && y >= -0.5 &&
         y <= static_cast<double>(h) - 0.5;
}

/// Isotropic Gaussian centered at (x, y), truncated to the square window
/// |dx|, |dy| <= radius (the kernel's footprint), clipped at the grid border
/// and renormalized to sum 1. Row-major [h x w].
inline std::vector<double> gaussian_label(std::int64_t h, std::int64_t w, double x, double y, double radius,
                                          double sigma) {
  if (h < 1 || w < 1) fail(ErrorKind::shape, "gaussian_label: empty grid");
  if (!(sigma > 0) || !(radius >= 0)) fail(ErrorKind::config, "gaussian_label: sigma must be positive");
  if (!inside_grid(h, w, x, y)) {
    fail(ErrorKind::usage, "gaussian_label: gaze (" + std::to_string(x) + ", " + std::to_string(y) +
                               ") is outside the " + std::to_string(h) + "x" + std::to_string(w) + " grid");
  }
  std::vector<double> out(static_cast<std::size_t>(h * w), 0.0);
  double total = 0.0;
  for (std::int64_t i = 0; i < h; ++i) {
    const double dy = static_cast<double>(i) - y;
    if (std::abs(dy) > radius) continue;
    for (std::int64_t j = 0; j < w; ++j) {
      const double dx = static_cast<double>(j) - x;
      if (std::abs(dx) > radius) continue;
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      out[static_cast<std::size_t>(i * w + j)] = v;
      total += v;
    }
  }
  // a sub-cell radius can miss every cell center; fall back to the nearest cell
  if (total == 0.0) {
    const auto i = std::clamp<std::int64_t>(std::llround(y), 0, h - 1);
    const auto j = std::clamp<std::int64_t>(std::llround(x), 0, w - 1);
    out[static_cast<std::size_t>(i * w + j)] = 1.0;
    return out;
  }
  for (auto& v : out) v /= total;
  return out;
}

/// Kernel-size form: radius = (kernel_size - 1) / 2, kernel_size odd.
inline std::vector<double> gaussian_label(std::int64_t h, std::int64_t w, double x, double y,
                                          std::int64_t kernel_size, double sigma) {
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    fail(ErrorKind::config, "gaussian_label: kernel size must be odd, got " + std::to_string(kernel_size));
  }
  return gaussian_label(h, w, x, y, static_cast<double>(kernel_size - 1) / 2.0, sigma);
}

inline std::vector<double> uniform_label(std::int64_t h, std::int64_t w) {
  return std::vector<double>(static_cast<std::size_t>(h * w), 1.0 / static_cast<double>(h * w));
}

/// One tracked gaze sample in input-pixel coordinates.
struct GazePoint {
  bool tracked = false;
  double x = 0.0;
  double y = 0.0;

  bool operator==(const GazePoint&) const = default;
};

enum class GazeKind { fixation, saccade, untracked };

/// A tracked frame is a saccade when its gaze moved strictly more than
/// `threshold` from the previous frame's gaze. The first tracked frame, and a
/// frame following an untracked one, count as fixations.
inline std::vector<GazeKind> fixation_filter(std::span<const GazePoint> track, double threshold) {
  std::vector<GazeKind> kinds(track.size(), GazeKind::untracked);
  for (std::size_t f = 0; f < track.size(); ++f) {
    if (!track[f].tracked) continue;
    kinds[f] = GazeKind::fixation;
    if (f > 0 && track[f - 1].tracked) {
      const double d = std::hypot(track[f].x - track[f - 1].x, track[f].y - track[f - 1].y);
      if (d > threshold) kinds[f] = GazeKind::saccade;
    }
  }
  return kinds;
}

/// Cells whose center lies within `radius` of (x, y).
inline std::vector<std::uint8_t> gaze_disk(std::int64_t h, std::int64_t w, double x, double y, double radius) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(h * w), 0);
  for (std::int64_t i = 0; i < h; ++i) {
    for (std::int64_t j = 0; j < w; ++j) {
      const double dx = static_cast<double>(j) - x, dy = static_cast<double>(i) - y;
      out[static_cast<std::size_t>(i * w + j)] = dx * dx + dy * dy <= radius * radius;
    }
  }
  return out;
}

struct EvalReport {
  double f1 = 0.0;
  double recall = 0.0;
  double precision = 0.0;
  double threshold = 0.0;
  std::int64_t frames = 0;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"f1", r.f1}, {"recall", r.recall}, {"precision", r.precision}, {"threshold", r.threshold},
                     {"frames", r.frames}};
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  j.at("f1").get_to(r.f1);
  j.at("recall").get_to(r.recall);
  j.at("precision").get_to(r.precision);
  j.at("threshold").get_to(r.threshold);
  j.at("frames").get_to(r.frames);
}

/// Thresholds relative to each frame's peak: a cell is predicted positive when
/// p >= t * max(p). 0.1% and then 1/16 steps up to the peak itself.
inline std::vector<double> default_thresholds() {
  std::vector<double> t{0.001};
  for (int k = 1; k <= 16; ++k) t.push_back(k / 16.0);
  return t;
}

/// Micro-averaged pixel precision / recall over frames, per threshold.
class PrfAccumulator {
 public:
  explicit PrfAccumulator(std::vector<double> thresholds = default_thresholds())
      : thresholds_(std::move(thresholds)), counts_(thresholds_.size()) {
    if (thresholds_.empty()) fail(ErrorKind::config, "at least one threshold is required");
  }

  /// One scored frame: heatmap [h x w] and the gaze in output-grid coordinates.
  template <class T>
  void add(std::span<const T> heatmap, std::int64_t h, std::int64_t w, double x, double y, double radius) {
    if (static_cast<std::int64_t>(heatmap.size()) != h * w) fail(ErrorKind::shape, "heatmap does not match grid");
    const auto disk = gaze_disk(h, w, x, y, radius);
    double peak = 0.0;
    for (const auto v : heatmap) peak = std::max(peak, static_cast<double>(v));
    for (std::size_t k = 0; k < thresholds_.size(); ++k) {
      const double cut = thresholds_[k] * peak;
      auto& c = counts_[k];
      for (std::size_t i = 0; i < heatmap.size(); ++i) {
        // a heatmap without positive mass predicts nothing
        const bool predicted = peak > 0.0 && static_cast<double>(heatmap[i]) >= cut;
        c.tp += predicted && disk[i];
        c.fp += predicted && !disk[i];
        c.fn += !predicted && disk[i];
      }
    }
    ++frames_;
  }

  std::int64_t frames() const { return frames_; }

  /// Report at the threshold with the highest F1 (first one on ties).
  EvalReport report() const {
    EvalReport best;
    best.frames = frames_;
    best.threshold = thresholds_.front();
    if (frames_ == 0) return best;
    bool first = true;
    for (std::size_t k = 0; k < thresholds_.size(); ++k) {
      const auto r = at(k);
      if (first || r.f1 > best.f1) best = r;
      first = false;
    }
    return best;
  }

  EvalReport at(std::size_t k) const {
    const auto& c = counts_.at(k);
    EvalReport r;
    r.frames = frames_;
    r.threshold = thresholds_[k];
    r.precision = c.tp + c.fp > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
    r.recall = c.tp + c.fn > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
    r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
  }

  const std::vector<double>& thresholds() const { return thresholds_; }

 private:
  struct Counts {
    std::int64_t tp = 0, fp = 0, fn = 0;
  };
  std::vector<double> thresholds_;
  std::vector<Counts> counts_;
  std::int64_t frames_ = 0;
};

/// F1 of a uniform heatmap: every cell is predicted at every threshold, so
/// precision = disk area / grid area and recall = 1.
inline double uniform_prediction_f1(std::int64_t disk_cells, std::int64_t grid_cells) {
  const double p = static_cast<double>(disk_cells) / static_cast<double>(grid_cells);
  return 2 * p / (p + 1);
}

}  // namespace glc
