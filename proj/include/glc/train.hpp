#pragma once

// Training loop, test-split evaluation and the variant ablation runner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "glc/checkpoint.hpp"
#include "glc/data.hpp"
#include "glc/network.hpp"
#include "glc/objective.hpp"
#include "glc/optim.hpp"
#include "glc/run_config.hpp"

namespace glc {

/// Fixed-format number for CSV logs ("%.9g").
inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// The model must consume what the dataset and sampler produce.
inline void check_compatible(const Dataset& data, const ModelConfig& cfg) {
  if (cfg.frames != clip_samples) {
    fail(ErrorKind::config, "model frames must be " + std::to_string(clip_samples) + " (the sampled window), got " +
                                std::to_string(cfg.frames));
  }
  for (const auto& e : data.entries()) {
    if (e.shape[0] != cfg.channels) {
      fail(ErrorKind::config, "clip " + e.id + " has " + std::to_string(e.shape[0]) + " channels, model expects " +
                                  std::to_string(cfg.channels));
    }
  }
}

inline Tensor<float> example_tensor(const Example& ex) { return Tensor<float>(ex.shape, ex.clip); }

inline Tensor<float> label_tensor(const Example& ex, const ModelConfig& cfg, const LabelGeometry& geometry) {
  const Grid out = cfg.output_grid();
  const auto labels = make_labels(ex.gaze, out.h, out.w, static_cast<double>(cfg.patch_stride.h),
                                  static_cast<double>(cfg.patch_stride.w), geometry);
  return Tensor<float>(Shape{out.t, out.h, out.w}, std::vector<float>(labels.begin(), labels.end()));
}

/// Per-frame heatmaps [frames x out_h x out_w] for one evaluation example.
using Predictor = std::function<std::vector<float>(const Example&)>;

/// Scores the test split (or its first `max_clips` clips): centered window,
/// center crop, fixation frames only, gaze disk of `geometry.radius` cells.
inline EvalReport evaluate(const Dataset& data, const ModelConfig& cfg, const LabelGeometry& geometry,
                           std::int64_t max_clips, const Predictor& predict) {
  auto clips = data.split(Split::test);
  if (max_clips > 0 && static_cast<std::int64_t>(clips.size()) > max_clips) clips.resize(static_cast<std::size_t>(max_clips));
  const Grid out = cfg.output_grid();
  const auto cells = static_cast<std::size_t>(out.h * out.w);
  PrfAccumulator acc;
  for (const auto c : clips) {
    const auto ex = make_example(data, c, cfg.height, cfg.width, geometry.saccade_threshold, nullptr);
    const auto heat = predict(ex);
    if (heat.size() != ex.gaze.size() * cells) fail(ErrorKind::shape, "predictor returned a wrong-sized heatmap");
    for (std::size_t f = 0; f < ex.gaze.size(); ++f) {
      if (ex.kinds[f] != GazeKind::fixation) continue;
      acc.add(std::span<const float>(heat).subspan(f * cells, cells), out.h, out.w,
              ex.gaze[f].x / static_cast<double>(cfg.patch_stride.w),
              ex.gaze[f].y / static_cast<double>(cfg.patch_stride.h), geometry.radius);
    }
  }
  return acc.report();
}

inline Predictor model_predictor(const GazeModel<float>& model) {
  return [&model](const Example& ex) {
    NoGradGuard no_grad;
    const auto heat = model.forward(example_tensor(ex));
    return std::vector<float>(heat.data().begin(), heat.data().end());
  };
}

struct TrainResult {
  EvalReport initial;  // before the first update
  EvalReport final;
  std::int64_t params = 0;
};

/// Trains `cfg` from scratch and writes {out}/log.csv plus checkpoints to
/// `checkpoint_dir` every `checkpoint_every` steps and after the last step.
inline TrainResult train_model(const Dataset& data, const RunConfig& rc, const ModelConfig& cfg,
                               const std::filesystem::path& out, const std::filesystem::path& checkpoint_dir,
                               std::ostream* progress = nullptr) {
  check_compatible(data, cfg);
  const auto train = data.split(Split::train);
  if (train.empty() && rc.steps > 0) fail(ErrorKind::dataset, "the dataset has no training clips");
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) fail(ErrorKind::io, "cannot create " + out.string() + ": " + ec.message());
  const auto log_path = out / "log.csv";
  std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
  if (!log) fail(ErrorKind::io, "cannot open " + log_path.string());
  log << "step,train_loss,eval_f1\n";

  const auto geometry = LabelGeometry::for_crop(cfg.width);
  GazeModel<float> model(cfg, rc.seed);
  AdamW<float> opt(model.params(), {.lr = rc.lr, .weight_decay = rc.weight_decay});
  auto eval = [&] { return evaluate(data, cfg, geometry, rc.eval_clips, model_predictor(model)); };

  TrainResult result;
  result.params = model.params().count();
  result.initial = result.final = eval();
  log << "0,," << format_number(result.initial.f1) << '\n';

  // epoch-shuffled order; the sampler and augmentation draw from the same stream
  Rng rng(mix_seed(rc.seed, fnv1a("train")));
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  auto next_clip = [&] {
    if (cursor == order.size()) {
      order = train;
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(static_cast<std::int64_t>(i))]);
      cursor = 0;
    }
    return order[cursor++];
  };

  for (std::int64_t step = 1; step <= rc.steps; ++step) {
    model.params().zero_grad();
    double loss_sum = 0;
    for (std::int64_t b = 0; b < rc.batch; ++b) {
      const auto ex = make_example(data, next_clip(), cfg.height, cfg.width, geometry.saccade_threshold, &rng, rc.augment);
      const auto loss = kl_div(model.forward(example_tensor(ex)), label_tensor(ex, cfg, geometry));
      const double value = loss.item();
      if (!std::isfinite(value)) fail(ErrorKind::numeric, "non-finite training loss at step " + std::to_string(step));
      loss_sum += value;
      backward(scale(loss, 1.0f / static_cast<float>(rc.batch)));
    }
    opt.step(cosine_lr(step - 1, rc.steps, rc.lr, rc.warmup));
    const double mean_loss = loss_sum / static_cast<double>(rc.batch);
    log << step << ',' << format_number(mean_loss) << ',';
    const bool last = step == rc.steps;
    if (last || (rc.eval_every > 0 && step % rc.eval_every == 0)) {
      result.final = eval();
      log << format_number(result.final.f1);
    }
    log << '\n';
    if (last || (rc.checkpoint_every > 0 && step % rc.checkpoint_every == 0)) {
      save_checkpoint(checkpoint_dir, cfg, model.params());
    }
    if (progress && (step % 50 == 0 || last)) {
      *progress << cfg.variant() << " step " << step << "/" << rc.steps << " loss " << format_number(mean_loss) << std::endl;
    }
  }
  if (rc.steps == 0) save_checkpoint(checkpoint_dir, cfg, model.params());
  log.close();
  if (!log) fail(ErrorKind::io, "cannot write " + log_path.string());
  return result;
}

struct AblationRow {
  std::string variant;
  TrainResult result;
};

/// The +SA counterpart of a +GLC tag and vice versa (empty when neither).
inline std::string fusion_counterpart(const std::string& tag) {
  auto swap_suffix = [&](const std::string& from, const std::string& to) -> std::string {
    return tag.ends_with(from) ? tag.substr(0, tag.size() - from.size()) + to : std::string();
  };
  if (auto s = swap_suffix("+glc", "+sa"); !s.empty()) return s;
  return swap_suffix("+sa", "+glc");
}

/// Fails (check error) when a requested +SA / +GLC pair differs in parameter count.
inline void check_parity(const std::vector<std::string>& variants, const ModelConfig& base, std::uint64_t seed) {
  std::map<std::string, std::int64_t> counts;
  for (const auto& v : variants) {
    ModelConfig cfg = base;
    cfg.apply_variant(v);
    counts[v] = GazeModel<float>(cfg, seed).params().count();
  }
  for (const auto& [v, n] : counts) {
    const auto other = fusion_counterpart(v);
    if (!other.empty() && counts.contains(other) && counts.at(other) != n) {
      fail(ErrorKind::check, "parameter parity violated: " + v + " has " + std::to_string(n) + ", " + other + " has " +
                                 std::to_string(counts.at(other)));
    }
  }
}

/// Trains every requested variant with the same seed and budget; writes
/// {output}/{variant}/log.csv, {output}/{variant}/checkpoint and
/// {output}/ablation.csv (rows in request order).
inline std::vector<AblationRow> run_ablation(const Dataset& data, const RunConfig& rc, std::ostream* progress = nullptr) {
  check_parity(rc.variants, rc.model, rc.seed);
  std::vector<AblationRow> rows;
  for (const auto& v : rc.variants) {
    ModelConfig cfg = rc.model;
    cfg.apply_variant(v);
    const auto dir = rc.output / v;
    rows.push_back({v, train_model(data, rc, cfg, dir, dir / "checkpoint", progress)});
  }
  const auto path = rc.output / "ablation.csv";
  std::ofstream csv(path, std::ios::binary | std::ios::trunc);
  if (!csv) fail(ErrorKind::io, "cannot open " + path.string());
  csv << "variant,f1,recall,precision,params,step0_f1\n";
  for (const auto& r : rows) {
    csv << r.variant << ',' << format_number(r.result.final.f1) << ',' << format_number(r.result.final.recall) << ','
        << format_number(r.result.final.precision) << ',' << r.result.params << ','
        << format_number(r.result.initial.f1) << '\n';
  }
  csv.close();
  if (!csv) fail(ErrorKind::io, "cannot write " + path.string());
  return rows;
}

}  // namespace glc
