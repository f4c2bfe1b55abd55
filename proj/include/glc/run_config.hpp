#pragma once

// Run configuration shared by every CLI command. A config file is a JSON
// object {"overrides": {key: value, ...}} with flat keys; `--set key=value`
// and the dedicated flags are applied on top, in that order.
//
// Keys: run fields by name (dataset, output, checkpoint, seed, threads, steps,
// batch, lr, weight_decay, warmup, eval_every, checkpoint_every, variant,
// variants, clip, eval_clips), `augment.*`, `synth.*`, `gradcheck.*`, and any
// ModelConfig field by its JSON name (`preset` included).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "glc/config.hpp"
#include "glc/data.hpp"
#include "glc/error.hpp"
#include "glc/gradcheck_suite.hpp"
#include "glc/objective.hpp"

namespace glc {

struct RunConfig {
  ModelConfig model = ModelConfig::desk();
  std::filesystem::path dataset = "data";
  std::filesystem::path output = "out";
  std::filesystem::path checkpoint;  // empty: {output}/checkpoint
  std::uint64_t seed = 0;
  int threads = 1;
  std::int64_t steps = 2000;
  std::int64_t batch = 4;
  double lr = 1e-4;
  double weight_decay = 0.05;
  double warmup = 0.05;              // fraction of steps
  std::int64_t eval_every = 0;       // 0: evaluate at step 0 and at the end only
  std::int64_t checkpoint_every = 500;
  std::vector<std::string> variants{"mvit", "mvit+d+sa", "mvit+d+glc"};
  std::string clip;                  // infer / export-maps; empty: first test clip
  std::int64_t eval_clips = 0;       // 0: the whole test split
  AugmentParams augment;
  SynthParams synth;
  GradCheckSuiteOptions gradcheck;

  std::filesystem::path checkpoint_dir() const { return checkpoint.empty() ? output / "checkpoint" : checkpoint; }
  LabelGeometry geometry() const { return LabelGeometry::for_crop(model.width); }
};

namespace detail {

template <class F>
void get_field(const std::string& key, const nlohmann::json& value, F& field) {
  try {
    value.get_to(field);
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::config, "config key '" + key + "': unexpected value " + value.dump());
  }
}

inline std::filesystem::path get_path(const std::string& key, const nlohmann::json& value) {
  std::string s;
  get_field(key, value, s);
  return s;
}

inline bool set_augment(AugmentParams& a, const std::string& name, const std::string& key, const nlohmann::json& v) {
  if (name == "flip_probability") get_field(key, v, a.flip_probability);
  else if (name == "scale") get_field(key, v, a.scale);
  else if (name == "shift") get_field(key, v, a.shift);
  else return false;
  return true;
}

inline void set_model(ModelConfig& m, const std::string& key, const nlohmann::json& value) {
  nlohmann::json j = m;
  if (!j.contains(key)) fail(ErrorKind::config, "unknown config key '" + key + "'");
  j[key] = value;
  try {
    m = j.get<ModelConfig>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::config, "config key '" + key + "': unexpected value " + value.dump());
  }
}

}  // namespace detail

/// Applies one flat key. `preset` replaces the whole model config and
/// `variant` rewrites its strategy/fusion switches, so callers apply `preset`
/// first and `variant` last (see resolve_run_config).
inline void apply_setting(RunConfig& rc, const std::string& key, const nlohmann::json& value) {
  using detail::get_field;
  if (key == "dataset") rc.dataset = detail::get_path(key, value);
  else if (key == "output") rc.output = detail::get_path(key, value);
  else if (key == "checkpoint") rc.checkpoint = detail::get_path(key, value);
  else if (key == "seed") get_field(key, value, rc.seed);
  else if (key == "threads") get_field(key, value, rc.threads);
  else if (key == "steps") get_field(key, value, rc.steps);
  else if (key == "batch") get_field(key, value, rc.batch);
  else if (key == "lr") get_field(key, value, rc.lr);
  else if (key == "weight_decay") get_field(key, value, rc.weight_decay);
  else if (key == "warmup") get_field(key, value, rc.warmup);
  else if (key == "eval_every") get_field(key, value, rc.eval_every);
  else if (key == "checkpoint_every") get_field(key, value, rc.checkpoint_every);
  else if (key == "clip") get_field(key, value, rc.clip);
  else if (key == "eval_clips") get_field(key, value, rc.eval_clips);
  else if (key == "variants") {
    // a list, or one comma-separated string
    if (value.is_string()) {
      rc.variants.clear();
      const auto s = value.get<std::string>();
      std::size_t begin = 0;
      while (begin <= s.size()) {
        const auto end = std::min(s.find(',', begin), s.size());
        rc.variants.push_back(s.substr(begin, end - begin));
        begin = end + 1;
      }
    } else {
      get_field(key, value, rc.variants);
    }
    for (const auto& v : rc.variants) {
      ModelConfig probe;
      probe.apply_variant(v);
    }
  } else if (key == "preset") {
    std::string name;
    get_field(key, value, name);
    rc.model = ModelConfig::from_preset(name);
  } else if (key == "variant") {
    std::string tag;
    get_field(key, value, tag);
    rc.model.apply_variant(tag);
  } else if (key.starts_with("augment.")) {
    if (!detail::set_augment(rc.augment, key.substr(8), key, value)) fail(ErrorKind::config, "unknown config key '" + key + "'");
  } else if (key.starts_with("synth.")) {
    nlohmann::json j = rc.synth;
    const auto name = key.substr(6);
    if (!j.contains(name)) fail(ErrorKind::config, "unknown config key '" + key + "'");
    j[name] = value;
    try {
      rc.synth = j.get<SynthParams>();
    } catch (const nlohmann::json::exception&) {
      fail(ErrorKind::config, "config key '" + key + "': unexpected value " + value.dump());
    }
  } else if (key == "gradcheck.inject_fault") get_field(key, value, rc.gradcheck.inject_fault);
  else if (key == "gradcheck.network_probes") get_field(key, value, rc.gradcheck.network_probes);
  else if (key == "gradcheck.step") get_field(key, value, rc.gradcheck.check.step);
  else if (key == "gradcheck.tolerance") get_field(key, value, rc.gradcheck.check.tolerance);
  else if (key == "gradcheck.seed") get_field(key, value, rc.gradcheck.check.seed);
  else detail::set_model(rc.model, key, value);
}

/// `--set` values are JSON when they parse as JSON, plain strings otherwise.
inline nlohmann::json parse_set_value(const std::string& text) {
  auto j = nlohmann::json::parse(text, nullptr, false);
  return j.is_discarded() ? nlohmann::json(text) : j;
}

inline std::vector<std::pair<std::string, nlohmann::json>> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::config, "cannot read config " + path.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) fail(ErrorKind::config, "config " + path.string() + " is not a JSON object");
  std::vector<std::pair<std::string, nlohmann::json>> out;
  for (const auto& [key, value] : j.items()) {
    if (key != "overrides") fail(ErrorKind::config, "config " + path.string() + ": unknown top-level key '" + key + "'");
    if (!value.is_object()) fail(ErrorKind::config, "config " + path.string() + ": 'overrides' must be an object");
    for (const auto& [k, v] : value.items()) {
      if (v.is_object()) fail(ErrorKind::config, "config key '" + k + "': overrides are flat");
      out.emplace_back(k, v);
    }
  }
  return out;
}

/// Settings in precedence order (later wins), applied with `preset` first and
/// `variant` last so that both compose with field overrides.
inline RunConfig resolve_run_config(const std::vector<std::pair<std::string, nlohmann::json>>& settings) {
  RunConfig rc;
  std::optional<nlohmann::json> preset, variant;
  for (const auto& [k, v] : settings) {
    if (k == "preset") preset = v;
    if (k == "variant") variant = v;
  }
  if (preset) apply_setting(rc, "preset", *preset);
  for (const auto& [k, v] : settings) {
    if (k != "preset" && k != "variant") apply_setting(rc, k, v);
  }
  if (variant) apply_setting(rc, "variant", *variant);
  rc.model.validate();
  rc.synth.validate();
  if (rc.steps < 0) fail(ErrorKind::config, "steps must be >= 0");
  if (rc.batch < 1) fail(ErrorKind::config, "batch must be >= 1");
  if (!(rc.lr > 0)) fail(ErrorKind::config, "lr must be positive");
  if (rc.weight_decay < 0) fail(ErrorKind::config, "weight_decay must be >= 0");
  if (rc.warmup < 0 || rc.warmup > 1) fail(ErrorKind::config, "warmup must be a fraction of the steps");
  if (rc.eval_every < 0 || rc.checkpoint_every < 0 || rc.eval_clips < 0) {
    fail(ErrorKind::config, "eval_every, checkpoint_every and eval_clips must be >= 0");
  }
  if (rc.threads < 1) fail(ErrorKind::config, "threads must be >= 1");
  if (rc.variants.empty()) fail(ErrorKind::config, "variants must not be empty");
  if (rc.augment.flip_probability < 0 || rc.augment.flip_probability > 1 || rc.augment.scale < 0 ||
      rc.augment.scale >= 1 || rc.augment.shift < 0) {
    fail(ErrorKind::config, "augment parameters out of range");
  }
  return rc;
}

}  // namespace glc
