#pragma once

#include <array>
#include <cstdint>
#include <regex>
#include <string>

#include <nlohmann/json.hpp>

#include "glc/error.hpp"
#include "glc/ops.hpp"

namespace glc {

/// How the single global token is produced.
///   none            learned input-independent token (plain backbone baseline)
///   pool_input      (a) max pool over the clip, then a linear channel lift
///   pool_tokens     (b) max pool over the local token grid
///   conv_input      (c) embedding-style conv on the clip, then the (d) stack
///   conv_tokens     (d) three strided convs on the local token grid + linear
enum class GlobalStrategy { none, pool_input, pool_tokens, conv_input, conv_tokens };

/// What sits between the encoder and the decoder.
///   duplicate       encoder output concatenated with itself (no extra layer)
///   self_attention  one regular self-attention layer, output concatenated
///   glc             global-local correlation layer, output concatenated
enum class Fusion { duplicate, self_attention, glc };

enum class HeadMode { gaze, class_token, class_pool };

inline std::string strategy_tag(GlobalStrategy s) {
  switch (s) {
    case GlobalStrategy::none: return "none";
    case GlobalStrategy::pool_input: return "a";
    case GlobalStrategy::pool_tokens: return "b";
    case GlobalStrategy::conv_input: return "c";
    case GlobalStrategy::conv_tokens: return "d";
  }
  return "?";
}

inline GlobalStrategy parse_strategy(const std::string& tag) {
  if (tag == "none") return GlobalStrategy::none;
  if (tag == "a") return GlobalStrategy::pool_input;
  if (tag == "b") return GlobalStrategy::pool_tokens;
  if (tag == "c") return GlobalStrategy::conv_input;
  if (tag == "d") return GlobalStrategy::conv_tokens;
  fail(ErrorKind::config, "unknown global embedding strategy '" + tag + "' (expected none|a|b|c|d)");
}

inline std::string fusion_tag(Fusion f) {
  switch (f) {
    case Fusion::duplicate: return "duplicate";
    case Fusion::self_attention: return "sa";
    case Fusion::glc: return "glc";
  }
  return "?";
}

inline Fusion parse_fusion(const std::string& tag) {
  if (tag == "duplicate") return Fusion::duplicate;
  if (tag == "sa") return Fusion::self_attention;
  if (tag == "glc") return Fusion::glc;
  fail(ErrorKind::config, "unknown fusion '" + tag + "' (expected duplicate|sa|glc)");
}

inline std::string head_tag(HeadMode h) {
  switch (h) {
    case HeadMode::gaze: return "gaze";
    case HeadMode::class_token: return "class-token";
    case HeadMode::class_pool: return "class-pool";
  }
  return "?";
}

inline HeadMode parse_head(const std::string& tag) {
  if (tag == "gaze") return HeadMode::gaze;
  if (tag == "class-token") return HeadMode::class_token;
  if (tag == "class-pool") return HeadMode::class_pool;
  fail(ErrorKind::config, "unknown head mode '" + tag + "' (expected gaze|class-token|class-pool)");
}

/// Full architectural record.
struct ModelConfig {
  std::string preset = "desk";
  std::int64_t channels = 3;
  std::int64_t frames = 8;
  std::int64_t height = 64;
  std::int64_t width = 64;
  Extent3 patch_stride{2, 4, 4};
  Extent3 patch_kernel{3, 7, 7};
  Extent3 patch_padding{1, 3, 3};
  std::int64_t dim = 32;
  std::array<std::int64_t, 4> depths{1, 1, 2, 1};
  std::array<std::int64_t, 4> widths{64, 128, 128, 128};  // encoder block output widths
  Extent3 q_stride{1, 2, 2};                               // first layer of blocks 2..4
  std::int64_t kv_pool_target = 4;                         // adaptive K/V pooling: H' / target
  std::int64_t head_dim = 16;
  std::int64_t mlp_ratio = 4;
  std::int64_t decoder_mlp_ratio = 2;
  double lambda = 1e8;
  double tau = 2.0;
  GlobalStrategy strategy = GlobalStrategy::conv_tokens;
  Fusion fusion = Fusion::glc;
  HeadMode head = HeadMode::gaze;
  std::int64_t classes = 0;

  static ModelConfig paper() {
    ModelConfig c;
    c.preset = "paper";
    c.height = c.width = 256;
    c.dim = 96;
    c.depths = {1, 2, 11, 2};
    c.widths = {192, 384, 768, 768};
    c.kv_pool_target = 8;
    c.head_dim = 96;
    return c;
  }

  static ModelConfig desk() { return ModelConfig{}; }

  /// Smallest configuration that still exercises every stage; for gradient checks.
  static ModelConfig tiny() {
    ModelConfig c;
    c.preset = "tiny";
    c.frames = 8;
    c.height = c.width = 32;
    c.dim = 8;
    c.depths = {1, 1, 1, 1};
    c.widths = {8, 16, 16, 16};
    c.kv_pool_target = 2;
    c.head_dim = 4;
    return c;
  }

  static ModelConfig from_preset(const std::string& name) {
    if (name == "paper") return paper();
    if (name == "desk") return desk();
    if (name == "tiny") return tiny();
    fail(ErrorKind::config, "unknown preset '" + name + "' (expected paper|desk|tiny)");
  }

  Grid token_grid() const { return {frames / patch_stride.t, height / patch_stride.h, width / patch_stride.w}; }
  Grid output_grid() const { return {frames, height / patch_stride.h, width / patch_stride.w}; }

  /// Ablation tag: "mvit", "mvit+d", "mvit+d+glc", ...
  std::string variant() const {
    std::string tag = "mvit";
    if (strategy != GlobalStrategy::none) tag += "+" + strategy_tag(strategy);
    if (fusion != Fusion::duplicate) tag += "+" + fusion_tag(fusion);
    return tag;
  }

  void apply_variant(const std::string& tag) {
    static const std::regex pattern(R"(mvit(\+([abcd]))?(\+(sa|glc))?)");
    std::smatch m;
    if (!std::regex_match(tag, m, pattern)) {
      fail(ErrorKind::config, "unknown variant '" + tag + "' (expected mvit[+a|b|c|d][+sa|glc])");
    }
    strategy = m[2].matched ? parse_strategy(m[2].str()) : GlobalStrategy::none;
    fusion = m[4].matched ? parse_fusion(m[4].str()) : Fusion::duplicate;
  }

  void validate() const {
    auto positive = [](std::int64_t v, const char* what) {
      if (v < 1) fail(ErrorKind::config, std::string(what) + " must be positive");
    };
    positive(channels, "channels");
    positive(frames, "frames");
    positive(height, "height");
    positive(width, "width");
    positive(dim, "dim");
    positive(head_dim, "head_dim");
    positive(mlp_ratio, "mlp_ratio");
    positive(decoder_mlp_ratio, "decoder_mlp_ratio");
    positive(kv_pool_target, "kv_pool_target");
    for (const auto s : {patch_stride.t, patch_stride.h, patch_stride.w, q_stride.t, q_stride.h, q_stride.w}) {
      positive(s, "strides");
    }
    if (frames % patch_stride.t || height % patch_stride.h || width % patch_stride.w) {
      fail(ErrorKind::config, "clip " + std::to_string(frames) + "x" + std::to_string(height) + "x" +
                                  std::to_string(width) + " is not divisible by patch stride " +
                                  to_string(patch_stride));
    }
    for (std::size_t b = 0; b < 4; ++b) {
      positive(depths[b], "block depth");
      positive(widths[b], "block width");
    }
    if (!(tau > 0)) fail(ErrorKind::config, "tau must be positive");
    if (!(lambda > 0)) fail(ErrorKind::config, "lambda must be positive");
    if (head != HeadMode::gaze && classes < 1) fail(ErrorKind::config, "classification head needs classes >= 1");
  }
};

inline void to_json(nlohmann::json& j, const Extent3& e) { j = nlohmann::json::array({e.t, e.h, e.w}); }

inline void from_json(const nlohmann::json& j, Extent3& e) {
  if (!j.is_array() || j.size() != 3) fail(ErrorKind::config, "expected a 3-element extent");
  e = {j[0].get<std::int64_t>(), j[1].get<std::int64_t>(), j[2].get<std::int64_t>()};
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"preset", c.preset},
                     {"channels", c.channels},
                     {"frames", c.frames},
                     {"height", c.height},
                     {"width", c.width},
                     {"patch_stride", c.patch_stride},
                     {"patch_kernel", c.patch_kernel},
                     {"patch_padding", c.patch_padding},
                     {"dim", c.dim},
                     {"depths", c.depths},
                     {"widths", c.widths},
                     {"q_stride", c.q_stride},
                     {"kv_pool_target", c.kv_pool_target},
                     {"head_dim", c.head_dim},
                     {"mlp_ratio", c.mlp_ratio},
                     {"decoder_mlp_ratio", c.decoder_mlp_ratio},
                     {"lambda", c.lambda},
                     {"tau", c.tau},
                     {"strategy", strategy_tag(c.strategy)},
                     {"fusion", fusion_tag(c.fusion)},
                     {"head", head_tag(c.head)},
                     {"classes", c.classes}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  try {
    c = ModelConfig::from_preset(j.value("preset", std::string("desk")));
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("channels", c.channels);
    get("frames", c.frames);
    get("height", c.height);
    get("width", c.width);
    get("patch_stride", c.patch_stride);
    get("patch_kernel", c.patch_kernel);
    get("patch_padding", c.patch_padding);
    get("dim", c.dim);
    get("depths", c.depths);
    get("widths", c.widths);
    get("q_stride", c.q_stride);
    get("kv_pool_target", c.kv_pool_target);
    get("head_dim", c.head_dim);
    get("mlp_ratio", c.mlp_ratio);
    get("decoder_mlp_ratio", c.decoder_mlp_ratio);
    get("lambda", c.lambda);
    get("tau", c.tau);
    if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
    if (j.contains("fusion")) c.fusion = parse_fusion(j.at("fusion").get<std::string>());
    if (j.contains("head")) c.head = parse_head(j.at("head").get<std::string>());
    get("classes", c.classes);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("model config: ") + e.what());
  }
}

}  // namespace glc
