#pragma once

// Synthetic gaze video, the on-disk dataset container, the clip sampler and
// label-consistent augmentation.
//
// Container: `manifest.json` plus `data.bin`, little-endian float32 clips of
// shape C x T x H x W stored back to back at the offsets listed in the
// manifest. Each clip carries an FNV-1a checksum of its bytes.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glc/error.hpp"
#include "glc/objective.hpp"
#include "glc/ops.hpp"
#include "glc/rng.hpp"

namespace glc {

static_assert(std::endian::native == std::endian::little, "the dataset and checkpoint formats assume a little-endian host");

inline constexpr std::int64_t dataset_format_version = 1;
inline constexpr std::int64_t clip_samples = 8;
inline constexpr std::int64_t sample_interval = 8;
inline constexpr std::int64_t sample_window = (clip_samples - 1) * sample_interval + 1;  // 57 raw frames

enum class Split { train, test };

inline std::string split_tag(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(const std::string& tag) {
  if (tag == "train") return Split::train;
  if (tag == "test") return Split::test;
  fail(ErrorKind::dataset, "unknown split '" + tag + "'");
}

// ---------------------------------------------------------------------------
// Generator

struct SynthParams {
  std::uint64_t seed = 0;
  std::int64_t train_clips = 200;
  std::int64_t test_clips = 50;
  std::int64_t channels = 3;
  std::int64_t frames = 64;  // raw frames per clip
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int64_t distractors = 2;
  double blob_sigma = 3.0;      // pixels
  double max_speed = 1.5;       // pixels per frame
  double acceleration = 0.35;   // std of the per-frame velocity kick
  double jitter = 0.5;          // std of gaze noise around the target, clipped at 3 std
  double saccade_rate = 0.02;   // per-frame probability of a jump
  double saccade_jump = 30.0;   // jump length in pixels
  double gap_rate = 0.01;       // per-frame probability that an untracked gap starts
  std::int64_t max_gap = 4;
  double noise = 0.03;          // std of per-pixel sensor noise

  std::int64_t clip_count() const { return train_clips + test_clips; }

  void validate() const {
    if (train_clips < 0 || test_clips < 0) fail(ErrorKind::config, "clip counts must be non-negative");
    if (channels < 1 || height < 16 || width < 16) fail(ErrorKind::config, "frames must be at least 16x16");
    if (frames < sample_window) {
      fail(ErrorKind::config, "clips need at least " + std::to_string(sample_window) + " raw frames");
    }
    if (distractors < 0 || max_gap < 1) fail(ErrorKind::config, "invalid distractor or gap settings");
    if (!(blob_sigma > 0) || max_speed < 0 || acceleration < 0 || jitter < 0 || noise < 0) {
      fail(ErrorKind::config, "generator magnitudes must be non-negative");
    }
    if (saccade_rate < 0 || saccade_rate > 1 || gap_rate < 0 || gap_rate > 1) {
      fail(ErrorKind::config, "rates must lie in [0, 1]");
    }
    if (saccade_jump < 0 || 2 * saccade_jump >= static_cast<double>(std::min(height, width))) {
      fail(ErrorKind::config, "saccade jump must be shorter than half the frame");
    }
  }
};

inline void to_json(nlohmann::json& j, const SynthParams& p) {
  j = nlohmann::json{{"seed", p.seed},
                     {"train_clips", p.train_clips},
                     {"test_clips", p.test_clips},
                     {"channels", p.channels},
                     {"frames", p.frames},
                     {"height", p.height},
                     {"width", p.width},
                     {"distractors", p.distractors},
                     {"blob_sigma", p.blob_sigma},
                     {"max_speed", p.max_speed},
                     {"acceleration", p.acceleration},
                     {"jitter", p.jitter},
                     {"saccade_rate", p.saccade_rate},
                     {"saccade_jump", p.saccade_jump},
                     {"gap_rate", p.gap_rate},
                     {"max_gap", p.max_gap},
                     {"noise", p.noise}};
}

inline void from_json(const nlohmann::json& j, SynthParams& p) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("seed", p.seed);
  get("train_clips", p.train_clips);
  get("test_clips", p.test_clips);
  get("channels", p.channels);
  get("frames", p.frames);
  get("height", p.height);
  get("width", p.width);
  get("distractors", p.distractors);
  get("blob_sigma", p.blob_sigma);
  get("max_speed", p.max_speed);
  get("acceleration", p.acceleration);
  get("jitter", p.jitter);
  get("saccade_rate", p.saccade_rate);
  get("saccade_jump", p.saccade_jump);
  get("gap_rate", p.gap_rate);
  get("max_gap", p.max_gap);
  get("noise", p.noise);
}

/// One clip in memory. `video` is C x T x H x W in [0, 1].
struct ClipRecord {
  std::string id;
  Split split = Split::train;
  Shape shape;  // {C, T, H, W}
  std::vector<float> video;
  std::vector<GazePoint> track;        // one per raw frame, pixel coordinates
  std::vector<std::int64_t> saccades;  // frames where the generator injected a jump
  std::vector<GazePoint> target;       // rendered target center per raw frame

  bool operator==(const ClipRecord&) const = default;
};

namespace detail {

struct Blob {
  double x, y, vx = 0, vy = 0;
  double amplitude;
  double color[3];
};

// Smooth bounded random walk: damped velocity with random kicks, capped
// speed, reflection off a margin.
inline void advance(Blob& b, Rng& rng, const SynthParams& p, double margin) {
  b.vx = 0.9 * b.vx + p.acceleration * rng.normal();
  b.vy = 0.9 * b.vy + p.acceleration * rng.normal();
  const double speed = std::hypot(b.vx, b.vy);
  if (speed > p.max_speed) {
    b.vx *= p.max_speed / speed;
    b.vy *= p.max_speed / speed;
  }
  b.x += b.vx;
  b.y += b.vy;
  const double hi_x = static_cast<double>(p.width - 1) - margin, hi_y = static_cast<double>(p.height - 1) - margin;
  if (b.x < margin) b.x = 2 * margin - b.x, b.vx = -b.vx;
  if (b.x > hi_x) b.x = 2 * hi_x - b.x, b.vx = -b.vx;
  if (b.y < margin) b.y = 2 * margin - b.y, b.vy = -b.vy;
  if (b.y > hi_y) b.y = 2 * hi_y - b.y, b.vy = -b.vy;
}

inline std::string clip_id(std::int64_t index) {
  std::string digits = std::to_string(index);
  return "clip" + std::string(digits.size() < 4 ? 4 - digits.size() : 0, '0') + digits;
}

}  // namespace detail

/// Clip `index` of the dataset described by `p`; independent of every other
/// clip (its random stream is derived from (seed, index)).
inline ClipRecord synthesize_clip(const SynthParams& p, std::int64_t index) {
  p.validate();
  Rng rng(mix_seed(p.seed, static_cast<std::uint64_t>(index)));
  ClipRecord rec;
  rec.id = detail::clip_id(index);
  rec.split = index < p.train_clips ? Split::train : Split::test;
  rec.shape = {p.channels, p.frames, p.height, p.width};
  const double margin = std::max(4.0, p.blob_sigma);
  const double span_x = static_cast<double>(p.width - 1) - 2 * margin;
  const double span_y = static_cast<double>(p.height - 1) - 2 * margin;

  // tracking gaps first, so jumps can be placed only between tracked frames
  std::vector<bool> tracked(static_cast<std::size_t>(p.frames), true);
  for (std::int64_t f = 0; f < p.frames; ++f) {
    if (rng.bernoulli(p.gap_rate)) {
      const std::int64_t len = 1 + rng.index(p.max_gap);
      for (std::int64_t g = f; g < std::min(p.frames, f + len); ++g) tracked[static_cast<std::size_t>(g)] = false;
      f += len;
    }
  }

  detail::Blob target{margin + span_x * rng.uniform(), margin + span_y * rng.uniform(), 0, 0, 0.9, {1, 1, 1}};
  std::vector<detail::Blob> distractors;
  for (std::int64_t d = 0; d < p.distractors; ++d) {
    detail::Blob b{margin + span_x * rng.uniform(), margin + span_y * rng.uniform(), 0, 0, rng.uniform(0.3, 0.5), {}};
    for (auto& c : b.color) c = rng.uniform(0.4, 1.0);
    distractors.push_back(b);
  }
  double base[3];
  double tilt[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.05, 0.2);
    tilt[c] = rng.uniform(-0.05, 0.05);
  }

  const std::int64_t hw = p.height * p.width;
  rec.video.assign(static_cast<std::size_t>(p.channels * p.frames * hw), 0.0f);
  std::vector<double> frame(static_cast<std::size_t>(3 * hw));
  for (std::int64_t f = 0; f < p.frames; ++f) {
    if (f > 0) {
      const bool may_jump = tracked[static_cast<std::size_t>(f)] && tracked[static_cast<std::size_t>(f - 1)];
      bool jumped = false;
      if (may_jump && p.saccade_jump > 0 && rng.bernoulli(p.saccade_rate)) {
        for (int attempt = 0; attempt < 16 && !jumped; ++attempt) {
          const double angle = 2 * std::numbers::pi * rng.uniform();
          const double nx = target.x + p.saccade_jump * std::cos(angle);
          const double ny = target.y + p.saccade_jump * std::sin(angle);
          if (nx >= margin && nx <= margin + span_x && ny >= margin && ny <= margin + span_y) {
            target.x = nx, target.y = ny, target.vx = 0, target.vy = 0;
            jumped = true;
          }
        }
      }
      if (jumped) {
        rec.saccades.push_back(f);
      } else {
        detail::advance(target, rng, p, margin);
      }
      for (auto& d : distractors) detail::advance(d, rng, p, margin);
    }
    rec.target.push_back({true, target.x, target.y});
    GazePoint gaze{tracked[static_cast<std::size_t>(f)], 0.0, 0.0};
    // the jitter draw happens for every frame so gaps do not shift the stream
    const double jx = std::clamp(p.jitter * rng.normal(), -3 * p.jitter, 3 * p.jitter);
    const double jy = std::clamp(p.jitter * rng.normal(), -3 * p.jitter, 3 * p.jitter);
    if (gaze.tracked) {
      gaze.x = std::clamp(target.x + jx, 0.0, static_cast<double>(p.width - 1));
      gaze.y = std::clamp(target.y + jy, 0.0, static_cast<double>(p.height - 1));
    }
    rec.track.push_back(gaze);

    for (std::int64_t y = 0; y < p.height; ++y) {
      for (std::int64_t x = 0; x < p.width; ++x) {
        const double ramp = (static_cast<double>(x + y) / static_cast<double>(p.width + p.height)) - 0.5;
        for (int c = 0; c < 3; ++c) frame[static_cast<std::size_t>(c * hw + y * p.width + x)] = base[c] + tilt[c] * ramp;
      }
    }
    auto splat = [&](const detail::Blob& b) {
      const double reach = 4 * p.blob_sigma;
      const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(b.y - reach)));
      const auto y1 = std::min<std::int64_t>(p.height - 1, static_cast<std::int64_t>(std::ceil(b.y + reach)));
      const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(b.x - reach)));
      const auto x1 = std::min<std::int64_t>(p.width - 1, static_cast<std::int64_t>(std::ceil(b.x + reach)));
      for (std::int64_t y = y0; y <= y1; ++y) {
        for (std::int64_t x = x0; x <= x1; ++x) {
          const double dx = static_cast<double>(x) - b.x, dy = static_cast<double>(y) - b.y;
          const double v = b.amplitude * std::exp(-(dx * dx + dy * dy) / (2 * p.blob_sigma * p.blob_sigma));
          for (int c = 0; c < 3; ++c) frame[static_cast<std::size_t>(c * hw + y * p.width + x)] += v * b.color[c];
        }
      }
    };
    for (const auto& d : distractors) splat(d);
    splat(target);
    for (std::int64_t c = 0; c < p.channels; ++c) {
      float* dst = rec.video.data() + (c * p.frames + f) * hw;
      const double* src = frame.data() + (c % 3) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        const double v = src[i] + (p.noise > 0 ? p.noise * rng.normal() : 0.0);
        dst[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Container

struct ClipEntry {
  std::string id;
  Split split = Split::train;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  std::uint64_t checksum = 0;
  std::vector<GazePoint> track;
  std::vector<std::int64_t> saccades;
};

namespace detail {

inline nlohmann::json track_json(const std::vector<GazePoint>& track) {
  auto out = nlohmann::json::array();
  for (const auto& g : track) out.push_back(nlohmann::json::array({g.tracked ? 1 : 0, g.x, g.y}));
  return out;
}

inline std::vector<GazePoint> parse_track(const nlohmann::json& j) {
  std::vector<GazePoint> track;
  for (const auto& e : j) {
    if (!e.is_array() || e.size() != 3) fail(ErrorKind::dataset, "gaze track entries must be [tracked, x, y]");
    track.push_back({e[0].get<int>() != 0, e[1].get<double>(), e[2].get<double>()});
  }
  return track;
}

inline void write_bytes(std::ofstream& out, const void* data, std::size_t size, const std::filesystem::path& path) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
}

}  // namespace detail

/// Streams clips into `dir` one at a time; `next(i)` produces clip i.
template <class Next>
void write_dataset(const std::filesystem::path& dir, std::int64_t count, const nlohmann::json& generator, Next&& next) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
  const auto bin_path = dir / "data.bin";
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) fail(ErrorKind::io, "cannot open " + bin_path.string());
  nlohmann::json clips = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (std::int64_t i = 0; i < count; ++i) {
    const ClipRecord rec = next(i);
    if (rec.shape.size() != 4 || numel(rec.shape) != static_cast<std::int64_t>(rec.video.size()) ||
        static_cast<std::int64_t>(rec.track.size()) != rec.shape[1]) {
      fail(ErrorKind::dataset, "clip " + rec.id + " does not match its declared shape");
    }
    const std::uint64_t length = rec.video.size() * sizeof(float);
    detail::write_bytes(bin, rec.video.data(), length, bin_path);
    clips.push_back({{"id", rec.id},
                     {"split", split_tag(rec.split)},
                     {"shape", rec.shape},
                     {"dtype", "float32"},
                     {"offset", offset},
                     {"length", length},
                     {"checksum", fnv1a(rec.video.data(), length)},
                     {"track", detail::track_json(rec.track)},
                     {"saccades", rec.saccades}});
    offset += length;
  }
  bin.close();
  if (!bin) fail(ErrorKind::io, "cannot finish " + bin_path.string());
  const nlohmann::json manifest{{"format_version", dataset_format_version},
                                {"data_file", "data.bin"},
                                {"data_bytes", offset},
                                {"generator", generator},
                                {"clips", clips}};
  const auto manifest_path = dir / "manifest.json";
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open " + manifest_path.string());
  out << manifest.dump(1) << '\n';
  if (!out) fail(ErrorKind::io, "cannot write " + manifest_path.string());
}

inline void write_dataset(const std::filesystem::path& dir, const std::vector<ClipRecord>& clips,
                          const nlohmann::json& generator = nlohmann::json::object()) {
  write_dataset(dir, static_cast<std::int64_t>(clips.size()), generator,
                [&](std::int64_t i) -> const ClipRecord& { return clips[static_cast<std::size_t>(i)]; });
}

inline void generate_dataset(const std::filesystem::path& dir, const SynthParams& p) {
  p.validate();
  write_dataset(dir, p.clip_count(), nlohmann::json(p), [&](std::int64_t i) { return synthesize_clip(p, i); });
}

/// Read access to a dataset directory. Opening validates the manifest, the
/// file size and every clip checksum; clip frames are then read on demand.
class Dataset {
 public:
  explicit Dataset(const std::filesystem::path& dir) : dir_(dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) fail(ErrorKind::dataset, "no manifest at " + manifest_path.string());
    nlohmann::json m;
    try {
      m = nlohmann::json::parse(in);
      const auto version = m.at("format_version").get<std::int64_t>();
      if (version != dataset_format_version) {
        fail(ErrorKind::version, "dataset format version " + std::to_string(version) + " (this build reads " +
                                     std::to_string(dataset_format_version) + ")");
      }
      data_file_ = dir / m.at("data_file").get<std::string>();
      generator_ = m.value("generator", nlohmann::json::object());
      for (const auto& c : m.at("clips")) {
        ClipEntry e;
        e.id = c.at("id").get<std::string>();
        e.split = parse_split(c.at("split").get<std::string>());
        e.shape = c.at("shape").get<Shape>();
        if (c.at("dtype").get<std::string>() != "float32") fail(ErrorKind::dataset, e.id + ": dtype must be float32");
        e.offset = c.at("offset").get<std::uint64_t>();
        e.length = c.at("length").get<std::uint64_t>();
        e.checksum = c.at("checksum").get<std::uint64_t>();
        e.track = detail::parse_track(c.at("track"));
        e.saccades = c.value("saccades", std::vector<std::int64_t>{});
        if (e.shape.size() != 4 || numel(e.shape) < 1 ||
            e.length != static_cast<std::uint64_t>(numel(e.shape)) * sizeof(float)) {
          fail(ErrorKind::dataset, e.id + ": byte length does not match shape " + to_string(e.shape));
        }
        if (static_cast<std::int64_t>(e.track.size()) != e.shape[1]) {
          fail(ErrorKind::dataset, e.id + ": gaze track length differs from the frame count");
        }
        entries_.push_back(std::move(e));
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::dataset, "malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    validate_layout();
    verify_checksums();
  }

  const std::vector<ClipEntry>& entries() const { return entries_; }
  const nlohmann::json& generator() const { return generator_; }
  const std::filesystem::path& dir() const { return dir_; }

  std::vector<std::size_t> split(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].split == s) out.push_back(i);
    }
    return out;
  }

  std::size_t find(const std::string& id) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].id == id) return i;
    }
    fail(ErrorKind::dataset, "no clip named '" + id + "'");
  }

  /// Whole clip, C x T x H x W.
  std::vector<float> read_clip(std::size_t i) const {
    const auto& e = entries_.at(i);
    std::vector<float> out(static_cast<std::size_t>(numel(e.shape)));
    read_at(e.offset, out.data(), e.length);
    return out;
  }

  /// Selected raw frames, C x frames.size() x H x W.
  std::vector<float> read_frames(std::size_t i, std::span<const std::int64_t> frames) const {
    const auto& e = entries_.at(i);
    const std::int64_t c = e.shape[0], t = e.shape[1], hw = e.shape[2] * e.shape[3];
    std::vector<float> out(static_cast<std::size_t>(c * static_cast<std::int64_t>(frames.size()) * hw));
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::size_t k = 0; k < frames.size(); ++k) {
        if (frames[k] < 0 || frames[k] >= t) fail(ErrorKind::usage, e.id + ": frame index out of range");
        const std::uint64_t src = e.offset + static_cast<std::uint64_t>((ch * t + frames[k]) * hw) * sizeof(float);
        read_at(src, out.data() + (ch * static_cast<std::int64_t>(frames.size()) + static_cast<std::int64_t>(k)) * hw,
                static_cast<std::uint64_t>(hw) * sizeof(float));
      }
    }
    return out;
  }

  ClipRecord load(std::size_t i) const {
    const auto& e = entries_.at(i);
    return {e.id, e.split, e.shape, read_clip(i), e.track, e.saccades, {}};
  }

 private:
  void validate_layout() {
    std::error_code ec;
    const auto size = std::filesystem::file_size(data_file_, ec);
    if (ec) fail(ErrorKind::dataset, "cannot stat " + data_file_.string() + ": " + ec.message());
    std::vector<const ClipEntry*> order;
    for (const auto& e : entries_) order.push_back(&e);
    std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->offset < b->offset; });
    for (std::size_t k = 0; k < order.size(); ++k) {
      const auto* e = order[k];
      if (k + 1 < order.size() && e->offset + e->length > order[k + 1]->offset) {
        fail(ErrorKind::dataset, "clips " + e->id + " and " + order[k + 1]->id + " overlap in " + data_file_.string());
      }
      if (e->offset + e->length > size) {
        fail(ErrorKind::truncated, data_file_.string() + " holds " + std::to_string(size) + " bytes but clip " +
                                       e->id + " ends at byte " + std::to_string(e->offset + e->length));
      }
    }
    file_.open(data_file_, std::ios::binary);
    if (!file_) fail(ErrorKind::dataset, "cannot open " + data_file_.string());
  }

  void verify_checksums() const {
    std::vector<char> buffer;
    for (const auto& e : entries_) {
      buffer.resize(static_cast<std::size_t>(e.length));
      read_at(e.offset, buffer.data(), e.length);
      if (fnv1a(buffer.data(), buffer.size()) != e.checksum) {
        fail(ErrorKind::checksum, "clip " + e.id + " in " + data_file_.string() + " fails its checksum");
      }
    }
  }

  void read_at(std::uint64_t offset, void* dst, std::uint64_t length) const {
    file_.clear();
    file_.seekg(static_cast<std::streamoff>(offset));
    file_.read(static_cast<char*>(dst), static_cast<std::streamsize>(length));
    if (!file_) fail(ErrorKind::truncated, "short read from " + data_file_.string());
  }

  std::filesystem::path dir_;
  std::filesystem::path data_file_;
  nlohmann::json generator_;
  std::vector<ClipEntry> entries_;
  mutable std::ifstream file_;
};

// ---------------------------------------------------------------------------
// Sampler

/// Raw frame indices start + {0, 8, ..., 56}.
inline std::vector<std::int64_t> sample_indices(std::int64_t start) {
  std::vector<std::int64_t> idx;
  for (std::int64_t k = 0; k < clip_samples; ++k) idx.push_back(start + k * sample_interval);
  return idx;
}

/// Window start: uniform over every admissible start when `rng` is given
/// (training), else the centered start.
inline std::int64_t sample_start(std::int64_t raw_frames, Rng* rng) {
  if (raw_frames < sample_window) {
    fail(ErrorKind::dataset, "clip has " + std::to_string(raw_frames) + " frames, the sampler needs " +
                                 std::to_string(sample_window));
  }
  const std::int64_t starts = raw_frames - sample_window + 1;
  return rng ? rng->index(starts) : (starts - 1) / 2;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentParams {
  double flip_probability = 0.5;
  double scale = 0.125;  // zoom drawn from [1 - scale, 1 + scale]
  double shift = 0.125;  // crop center offset, fraction of the crop side
};

/// Source frame -> crop coordinates. A source point (x, y) is first mirrored
/// (x -> W - 1 - x) when `flip`, then mapped to
///   u = (x - cx) * zoom + (out_w - 1) / 2,  v = (y - cy) * zoom + (out_h - 1) / 2.
struct CropTransform {
  std::int64_t src_h = 0, src_w = 0, out_h = 0, out_w = 0;
  bool flip = false;
  double zoom = 1.0;
  double cx = 0.0, cy = 0.0;

  GazePoint apply(GazePoint g) const {
    if (!g.tracked) return g;
    const double x = flip ? static_cast<double>(src_w - 1) - g.x : g.x;
    GazePoint out{true, (x - cx) * zoom + static_cast<double>(out_w - 1) / 2,
                  (g.y - cy) * zoom + static_cast<double>(out_h - 1) / 2};
    // leaving the crop makes the frame untracked (uniform label)
    if (!inside_grid(out_h, out_w, out.x, out.y)) out = {false, 0.0, 0.0};
    return out;
  }

  static CropTransform center(std::int64_t src_h, std::int64_t src_w, std::int64_t out_h, std::int64_t out_w) {
    return {src_h, src_w, out_h, out_w, false, 1.0, static_cast<double>(src_w - 1) / 2,
            static_cast<double>(src_h - 1) / 2};
  }

  static CropTransform random(std::int64_t src_h, std::int64_t src_w, std::int64_t out_h, std::int64_t out_w,
                              const AugmentParams& p, Rng& rng) {
    auto t = center(src_h, src_w, out_h, out_w);
    t.flip = rng.bernoulli(p.flip_probability);
    t.zoom = rng.uniform(1 - p.scale, 1 + p.scale);
    t.cx += rng.uniform(-p.shift, p.shift) * static_cast<double>(out_w);
    t.cy += rng.uniform(-p.shift, p.shift) * static_cast<double>(out_h);
    return t;
  }
};

/// Bilinear resampling of every [H x W] plane of `frames` (planes stacked,
/// row-major) through `t`. Source samples outside the frame read as 0, so
/// outputs stay within the input range.
inline std::vector<float> apply_crop(std::span<const float> frames, std::int64_t planes, const CropTransform& t) {
  const std::int64_t in_hw = t.src_h * t.src_w, out_hw = t.out_h * t.out_w;
  if (static_cast<std::int64_t>(frames.size()) != planes * in_hw) fail(ErrorKind::shape, "apply_crop: size mismatch");
  struct Tap {
    std::int64_t index[4];
    float weight[4];
  };
  std::vector<Tap> taps(static_cast<std::size_t>(out_hw));
  for (std::int64_t v = 0; v < t.out_h; ++v) {
    for (std::int64_t u = 0; u < t.out_w; ++u) {
      double x = (static_cast<double>(u) - static_cast<double>(t.out_w - 1) / 2) / t.zoom + t.cx;
      const double y = (static_cast<double>(v) - static_cast<double>(t.out_h - 1) / 2) / t.zoom + t.cy;
      if (t.flip) x = static_cast<double>(t.src_w - 1) - x;
      const double x0 = std::floor(x), y0 = std::floor(y);
      const double fx = x - x0, fy = y - y0;
      Tap& tap = taps[static_cast<std::size_t>(v * t.out_w + u)];
      const double w[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      for (int k = 0; k < 4; ++k) {
        const auto xi = static_cast<std::int64_t>(x0) + (k & 1), yi = static_cast<std::int64_t>(y0) + (k >> 1);
        const bool in = xi >= 0 && xi < t.src_w && yi >= 0 && yi < t.src_h;
        tap.index[k] = in ? yi * t.src_w + xi : 0;
        tap.weight[k] = in ? static_cast<float>(w[k]) : 0.0f;
      }
    }
  }
  std::vector<float> out(static_cast<std::size_t>(planes * out_hw));
  for (std::int64_t p = 0; p < planes; ++p) {
    const float* src = frames.data() + p * in_hw;
    float* dst = out.data() + p * out_hw;
    for (std::int64_t i = 0; i < out_hw; ++i) {
      const Tap& tap = taps[static_cast<std::size_t>(i)];
      float acc = 0;
      for (int k = 0; k < 4; ++k) acc += tap.weight[k] * src[tap.index[k]];
      dst[i] = std::clamp(acc, 0.0f, 1.0f);
    }
  }
  return out;
}

/// Mirror every [H x W] plane left-right.
inline std::vector<float> flip_horizontal(std::span<const float> frames, std::int64_t w) {
  std::vector<float> out(frames.size());
  const auto rows = static_cast<std::int64_t>(frames.size()) / w;
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t x = 0; x < w; ++x) out[static_cast<std::size_t>(r * w + x)] = frames[static_cast<std::size_t>(r * w + w - 1 - x)];
  }
  return out;
}

inline GazePoint flip_gaze(GazePoint g, std::int64_t w) {
  if (g.tracked) g.x = static_cast<double>(w - 1) - g.x;
  return g;
}

// ---------------------------------------------------------------------------
// Training / evaluation examples

/// Model input plus per-frame gaze, all in crop pixel coordinates.
struct Example {
  Shape shape;                 // {C, 8, crop_h, crop_w}
  std::vector<float> clip;
  std::vector<GazePoint> gaze;  // per sampled frame
  std::vector<GazeKind> kinds;  // fixation filter on the raw track, re-indexed
  std::int64_t start = 0;
  CropTransform transform;
};

/// Samples a window and crops it. Training (rng != nullptr): random start and
/// random flip / zoom / shift; evaluation: centered start and center crop.
inline Example make_example(const Dataset& data, std::size_t clip, std::int64_t crop_h, std::int64_t crop_w,
                            double saccade_threshold, Rng* rng, const AugmentParams& augment = {}) {
  const auto& e = data.entries().at(clip);
  Example ex;
  ex.start = sample_start(e.shape[1], rng);
  const auto idx = sample_indices(ex.start);
  const auto raw = data.read_frames(clip, idx);
  ex.transform = rng ? CropTransform::random(e.shape[2], e.shape[3], crop_h, crop_w, augment, *rng)
                     : CropTransform::center(e.shape[2], e.shape[3], crop_h, crop_w);
  ex.clip = apply_crop(raw, e.shape[0] * clip_samples, ex.transform);
  ex.shape = {e.shape[0], clip_samples, crop_h, crop_w};
  const auto kinds = fixation_filter(e.track, saccade_threshold);
  for (const auto f : idx) {
    const GazePoint g = ex.transform.apply(e.track[static_cast<std::size_t>(f)]);
    ex.gaze.push_back(g);
    ex.kinds.push_back(g.tracked ? kinds[static_cast<std::size_t>(f)] : GazeKind::untracked);
  }
  return ex;
}

/// Per-frame target distributions on the output grid, [frames x out_h x out_w]:
/// Gaussian at the gaze (pixel / stride) when tracked, uniform otherwise. A
/// gaze on the last pixels of the crop maps past the last cell center and is
/// clamped onto the grid border.
inline std::vector<double> make_labels(const std::vector<GazePoint>& gaze, std::int64_t out_h, std::int64_t out_w,
                                       double stride_h, double stride_w, const LabelGeometry& geometry) {
  std::vector<double> out;
  out.reserve(gaze.size() * static_cast<std::size_t>(out_h * out_w));
  for (const auto& g : gaze) {
    const double gx = std::clamp(g.x / stride_w, -0.5, static_cast<double>(out_w) - 0.5);
    const double gy = std::clamp(g.y / stride_h, -0.5, static_cast<double>(out_h) - 0.5);
    const auto frame = g.tracked ? gaussian_label(out_h, out_w, gx, gy, geometry.radius, geometry.sigma)
                                 : uniform_label(out_h, out_w);
    out.insert(out.end(), frame.begin(), frame.end());
  }
  return out;
}

}  // namespace glc
