#pragma once

// Checkpoint directory: `weights.bin` holds every parameter as little-endian
// float32 in declaration order; `weights.json` lists {name, shape, offset,
// length} per parameter plus the model config and a format version.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glc/config.hpp"
#include "glc/error.hpp"
#include "glc/network.hpp"
#include "glc/params.hpp"

namespace glc {

inline constexpr std::int64_t checkpoint_format_version = 1;

template <class T>
void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& cfg, const ParamStore<T>& params) {
  static_assert(std::endian::native == std::endian::little);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
  const auto bin_path = dir / "weights.bin";
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) fail(ErrorKind::io, "cannot open " + bin_path.string());
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  std::vector<float> buffer;
  for (const auto& e : params.entries()) {
    const auto values = e.tensor.data();
    buffer.assign(values.begin(), values.end());
    const std::uint64_t length = buffer.size() * sizeof(float);
    bin.write(reinterpret_cast<const char*>(buffer.data()), static_cast<std::streamsize>(length));
    entries.push_back({{"name", e.name}, {"shape", e.tensor.shape()}, {"offset", offset}, {"length", length}});
    offset += length;
  }
  bin.close();
  if (!bin) fail(ErrorKind::io, "cannot write " + bin_path.string());
  const nlohmann::json meta{{"format_version", checkpoint_format_version}, {"config", cfg}, {"params", entries}};
  const auto json_path = dir / "weights.json";
  std::ofstream out(json_path, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open " + json_path.string());
  out << meta.dump(1) << '\n';
  if (!out) fail(ErrorKind::io, "cannot write " + json_path.string());
}

/// Names the first architectural difference between a checkpoint's config
/// and the requested one: the first differing stage of the shape ledger, or
/// else the first differing config field. Empty when they agree.
inline std::string config_mismatch(const ModelConfig& saved, const ModelConfig& wanted) {
  const auto a = infer_shapes(saved);
  const auto b = infer_shapes(wanted);
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
    if (!(a[i] == b[i])) {
      return "stage '" + b[i].name + "': checkpoint has " + a[i].name + " " + a[i].size() + ", config expects " +
             b[i].size();
    }
  }
  if (a.size() != b.size()) return "stage count: checkpoint has " + std::to_string(a.size()) + ", config expects " +
                                    std::to_string(b.size());
  const nlohmann::json ja = saved, jb = wanted;
  for (const auto& [key, value] : jb.items()) {
    if (key == "preset") continue;
    if (!ja.contains(key) || ja.at(key) != value) {
      return "field '" + key + "': checkpoint has " + (ja.contains(key) ? ja.at(key).dump() : "nothing") +
             ", config expects " + value.dump();
    }
  }
  return {};
}

/// Reads a checkpoint's stored model config.
inline ModelConfig checkpoint_config(const std::filesystem::path& dir) {
  const auto json_path = dir / "weights.json";
  std::ifstream in(json_path);
  if (!in) fail(ErrorKind::io, "no checkpoint at " + dir.string());
  try {
    const auto meta = nlohmann::json::parse(in);
    const auto version = meta.at("format_version").get<std::int64_t>();
    if (version != checkpoint_format_version) {
      fail(ErrorKind::version, "checkpoint format version " + std::to_string(version));
    }
    return meta.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, "malformed " + json_path.string() + ": " + e.what());
  }
}

/// Loads values into `params`, which must have been built from `cfg`.
/// Architecture mismatches are config errors naming the first differing stage.
template <class T>
void load_checkpoint(const std::filesystem::path& dir, const ModelConfig& cfg, ParamStore<T>& params) {
  const ModelConfig saved = checkpoint_config(dir);
  if (const auto diff = config_mismatch(saved, cfg); !diff.empty()) {
    fail(ErrorKind::config, "checkpoint " + dir.string() + " does not match the config at " + diff);
  }
  const auto meta = nlohmann::json::parse(std::ifstream(dir / "weights.json"));
  const auto& listed = meta.at("params");
  auto& entries = params.entries();
  if (listed.size() != entries.size()) {
    fail(ErrorKind::config, "checkpoint lists " + std::to_string(listed.size()) + " parameters, model has " +
                                std::to_string(entries.size()));
  }
  const auto bin_path = dir / "weights.bin";
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) fail(ErrorKind::io, "cannot open " + bin_path.string());
  std::vector<float> buffer;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    auto& e = entries[k];
    const auto name = listed[k].at("name").get<std::string>();
    const auto shape = listed[k].at("shape").get<Shape>();
    if (name != e.name || shape != e.tensor.shape()) {
      fail(ErrorKind::config, "checkpoint parameter " + std::to_string(k) + " is " + name + " " + to_string(shape) +
                                  ", model expects " + e.name + " " + to_string(e.tensor.shape()));
    }
    const auto offset = listed[k].at("offset").get<std::uint64_t>();
    const auto length = listed[k].at("length").get<std::uint64_t>();
    if (length != static_cast<std::uint64_t>(e.tensor.numel()) * sizeof(float)) {
      fail(ErrorKind::io, "checkpoint parameter " + name + " has a bad byte length");
    }
    buffer.resize(static_cast<std::size_t>(e.tensor.numel()));
    bin.seekg(static_cast<std::streamoff>(offset));
    bin.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(length));
    if (!bin) fail(ErrorKind::io, "checkpoint " + bin_path.string() + " is truncated at " + name);
    auto values = e.tensor.mutable_data();
    for (std::size_t i = 0; i < buffer.size(); ++i) values[i] = static_cast<T>(buffer[i]);
  }
}

}  // namespace glc
