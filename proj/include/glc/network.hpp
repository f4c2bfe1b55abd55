#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "glc/attention.hpp"
#include "glc/config.hpp"
#include "glc/embedding.hpp"
#include "glc/ops.hpp"
#include "glc/params.hpp"

namespace glc {

// ---------------------------------------------------------------------------
// Shape ledger

struct StageShape {
  enum class Layout { volume, vector, tokens, map };

  std::string name;
  Layout layout = Layout::tokens;
  std::int64_t channels = 0;
  Grid grid;
  std::int64_t prefix = 0;
  std::int64_t linear_in = 0;  // flatten width feeding a linear layer, when the stage has one

  /// Output size in the architecture-table notation, e.g. "96x(1+4x64x64)".
  std::string size() const {
    const auto g = std::to_string(grid.t) + "x" + std::to_string(grid.h) + "x" + std::to_string(grid.w);
    switch (layout) {
      case Layout::volume: return std::to_string(channels) + "x" + g;
      case Layout::vector: return std::to_string(channels) + "x1";
      case Layout::tokens: return std::to_string(channels) + "x(" + std::to_string(prefix) + "+" + g + ")";
      case Layout::map: return g;
    }
    return "?";
  }

  friend bool operator==(const StageShape&, const StageShape&) = default;
};

using StageShapes = std::vector<StageShape>;

/// One transformer layer of the encoder or decoder, fully resolved.
struct LayerPlan {
  std::string name;
  std::int64_t block = 0;  // 0-based
  BlockConfig config;
  Grid grid_in;
  Grid grid_out;
};

namespace detail {

inline Extent3 adaptive_kv_stride(Grid grid, std::int64_t target) {
  return {1, std::max<std::int64_t>(1, grid.h / target), std::max<std::int64_t>(1, grid.w / target)};
}

inline std::int64_t block_input_width(const ModelConfig& cfg, std::size_t block) {
  return block == 0 ? cfg.dim : cfg.widths[block - 1];
}

}  // namespace detail

inline std::vector<LayerPlan> encoder_plan(const ModelConfig& cfg) {
  std::vector<LayerPlan> plan;
  Grid grid = cfg.token_grid();
  std::int64_t dim = cfg.dim;
  for (std::size_t b = 0; b < 4; ++b) {
    for (std::int64_t l = 0; l < cfg.depths[b]; ++l) {
      LayerPlan layer;
      layer.name = "encoder.block" + std::to_string(b + 1) + ".layer" + std::to_string(l);
      layer.block = static_cast<std::int64_t>(b);
      auto& a = layer.config.attention;
      a.dim = dim;
      a.head_dim = cfg.head_dim;
      a.kv_stride = detail::adaptive_kv_stride(grid, cfg.kv_pool_target);
      layer.grid_in = grid;
      if (b > 0 && l == 0 && !cfg.q_stride.unit()) {
        a.query = QueryResample::pool;
        a.q_stride = cfg.q_stride;
        grid = pooled_grid(grid, cfg.q_stride, "encoder block" + std::to_string(b + 1));
      }
      // kv pooling must also divide the input grid
      pooled_grid(layer.grid_in, a.kv_stride, layer.name + " key/value pooling");
      layer.grid_out = grid;
      layer.config.dim_out = (l == cfg.depths[b] - 1) ? cfg.widths[b] : dim;
      layer.config.mlp_hidden = cfg.mlp_ratio * dim;
      validate(a);
      dim = layer.config.dim_out;
      plan.push_back(layer);
    }
  }
  return plan;
}

/// Token grid at the output of each encoder block.
inline std::vector<Grid> encoder_block_grids(const ModelConfig& cfg) {
  std::vector<Grid> grids(4);
  for (const auto& layer : encoder_plan(cfg)) grids[layer.block] = layer.grid_out;
  return grids;
}

/// The fusion layer (GLC or regular self-attention) at the encoder output width.
inline BlockConfig fusion_block_config(const ModelConfig& cfg) {
  BlockConfig b;
  b.attention.dim = cfg.widths[3];
  b.attention.head_dim = cfg.head_dim;
  b.attention.suppress = cfg.fusion == Fusion::glc;
  b.attention.lambda = cfg.lambda;
  b.dim_out = cfg.widths[3];
  b.mlp_hidden = cfg.mlp_ratio * cfg.widths[3];
  validate(b.attention);
  return b;
}

/// Decoder: four single-layer blocks mirroring the encoder. Block k upsamples
/// queries to the input grid of encoder block 4-k (the last block restores the
/// clip's temporal length) and narrows to that block's input width.
inline std::vector<LayerPlan> decoder_plan(const ModelConfig& cfg) {
  std::vector<Grid> enc_in(4);
  for (const auto& layer : encoder_plan(cfg)) {
    if (layer.name.ends_with(".layer0")) enc_in[layer.block] = layer.grid_in;
  }
  std::vector<LayerPlan> plan;
  Grid grid = encoder_block_grids(cfg)[3];
  std::int64_t dim = 2 * cfg.widths[3];
  for (std::size_t k = 0; k < 4; ++k) {
    LayerPlan layer;
    layer.name = "decoder.block" + std::to_string(k + 1);
    layer.block = static_cast<std::int64_t>(k);
    const Grid target = k < 3 ? enc_in[3 - k] : cfg.output_grid();
    auto& a = layer.config.attention;
    a.dim = dim;
    a.head_dim = cfg.head_dim;
    a.query = QueryResample::upsample;
    a.q_target = target;
    a.kv_stride = detail::adaptive_kv_stride(grid, cfg.kv_pool_target);
    pooled_grid(grid, a.kv_stride, layer.name + " key/value pooling");
    layer.grid_in = grid;
    layer.grid_out = target;
    layer.config.dim_out = detail::block_input_width(cfg, 3 - k);
    layer.config.mlp_hidden = cfg.decoder_mlp_ratio * dim;
    validate(a);
    plan.push_back(layer);
    grid = target;
    dim = layer.config.dim_out;
  }
  return plan;
}

/// Skip source for decoder block k: encoder block 3-k output, or the
/// tokenized embedding (index -1) for the last block.
inline std::int64_t decoder_skip_source(std::size_t k) { return 2 - static_cast<std::int64_t>(k); }

inline std::string fusion_stage_name(Fusion f) {
  switch (f) {
    case Fusion::glc: return "global-local correlation";
    case Fusion::self_attention: return "self-attention";
    case Fusion::duplicate: return "duplication";
  }
  return "?";
}

/// Symbolic stage-by-stage shapes, no allocation. Throws a config error naming
/// the first transition that cannot be realized.
inline StageShapes infer_shapes(const ModelConfig& cfg) {
  cfg.validate();
  using L = StageShape::Layout;
  StageShapes stages;
  const Grid tokens = cfg.token_grid();
  const std::int64_t prefix = cfg.head == HeadMode::class_token ? 2 : 1;
  stages.push_back({"local token embedding", L::volume, cfg.dim, tokens, 0, 0});
  std::int64_t global_in = 0;
  if (cfg.strategy == GlobalStrategy::pool_input) global_in = cfg.channels;
  if (cfg.strategy == GlobalStrategy::conv_input || cfg.strategy == GlobalStrategy::conv_tokens) {
    global_in = global_stack_flatten(cfg.dim, tokens);
  }
  stages.push_back({"global token embedding", L::vector, cfg.dim, {}, 0, global_in});
  stages.push_back({"tokenization", L::tokens, cfg.dim, tokens, prefix, 0});

  const auto enc = encoder_plan(cfg);
  for (std::size_t b = 0; b < 4; ++b) {
    const LayerPlan* last = nullptr;
    for (const auto& layer : enc) {
      if (layer.block == static_cast<std::int64_t>(b)) last = &layer;
    }
    stages.push_back({"encoder block" + std::to_string(b + 1), L::tokens, last->config.dim_out, last->grid_out,
                      prefix, 0});
  }
  const Grid top = enc.back().grid_out;
  fusion_block_config(cfg);
  stages.push_back({fusion_stage_name(cfg.fusion), L::tokens, 2 * cfg.widths[3], top, prefix, 0});

  if (cfg.head != HeadMode::gaze) {
    stages.push_back({"classifier", L::vector, cfg.classes, {}, 0, 2 * cfg.widths[3]});
    return stages;
  }
  for (const auto& layer : decoder_plan(cfg)) {
    stages.push_back({layer.name.substr(std::string("decoder.").size()).insert(0, "decoder "), L::tokens,
                      layer.config.dim_out, layer.grid_out, prefix, 0});
  }
  stages.push_back({"head", L::map, 1, cfg.output_grid(), 0, 0});
  return stages;
}

// ---------------------------------------------------------------------------
// Model

template <class T>
class GazeModel {
 public:
  struct Encoded {
    TokenEmbedding<T>::Output embedding;
    std::vector<TokenField<T>> blocks;  // output of each encoder block
  };

  GazeModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), store_(seed) {
    cfg.validate();
    embed_ = TokenEmbedding<T>(store_, cfg);
    for (const auto& layer : encoder_plan(cfg)) {
      encoder_.emplace_back(store_, layer.name, layer.config);
      encoder_block_.push_back(layer.block);
    }
    if (cfg.fusion != Fusion::duplicate) fusion_ = TransformerBlock<T>(store_, "fusion", fusion_block_config(cfg));
    if (cfg.head == HeadMode::gaze) {
      for (const auto& layer : decoder_plan(cfg)) {
        decoder_.emplace_back(store_, layer.name, layer.config);
        const auto source = decoder_skip_source(decoder_.size() - 1);
        const std::int64_t skip_width = source < 0 ? cfg.dim : cfg.widths[source];
        skips_.emplace_back(store_, layer.name + ".skip", skip_width, layer.config.dim_out);
      }
      head_w_ = store_.add("head.weight", {1, cfg.dim, 1, 1, 1}, Init::truncated_normal);
      head_b_ = store_.add("head.bias", {1}, Init::zeros);
    } else {
      classifier_ = Linear<T>(store_, "classifier", 2 * cfg.widths[3], cfg.classes);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const TokenEmbedding<T>& embedding() const { return embed_; }

  Encoded encode(const Tensor<T>& clip, StageShapes* trace = nullptr) const {
    using L = StageShape::Layout;
    Encoded out{embed_(clip), {}};
    if (trace) {
      const auto& v = out.embedding.local_volume;
      trace->push_back({"local token embedding", L::volume, v.dim(0), {v.dim(1), v.dim(2), v.dim(3)}, 0, 0});
      trace->push_back({"global token embedding", L::vector, out.embedding.global.dim(1), {}, 0, global_linear_in()});
      record(trace, "tokenization", out.embedding.tokens);
    }
    TokenField<T> x = out.embedding.tokens;
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
      x = encoder_[i](x);
      const bool last_in_block = i + 1 == encoder_.size() || encoder_block_[i + 1] != encoder_block_[i];
      if (last_in_block) {
        out.blocks.push_back(x);
        if (trace) record(trace, "encoder block" + std::to_string(encoder_block_[i] + 1), x);
      }
    }
    return out;
  }

  /// [X_sa | X_fusion] along channels; X_sa twice when there is no fusion layer.
  TokenField<T> fuse(const TokenField<T>& top, StageShapes* trace = nullptr) const {
    const Tensor<T> second = fusion_ ? (*fusion_)(top).x : top.x;
    TokenField<T> fused{concat<T>({top.x, second}, 1), top.grid, top.prefix};
    if (trace) record(trace, fusion_stage_name(cfg_.fusion), fused);
    return fused;
  }

  TokenField<T> decode(const TokenField<T>& fused, const Encoded& enc, StageShapes* trace = nullptr) const {
    if (decoder_.empty()) fail(ErrorKind::config, "model was built without a decoder");
    TokenField<T> x = fused;
    for (std::size_t k = 0; k < decoder_.size(); ++k) {
      x = decoder_[k](x);
      const auto source = decoder_skip_source(k);
      const TokenField<T>& skip = source < 0 ? enc.embedding.tokens : enc.blocks.at(source);
      if (skip.prefix != x.prefix) fail(ErrorKind::shape, "skip connection prefix mismatch");
      TokenField<T> projected{skips_[k](skip.x), skip.grid, skip.prefix};
      if (!(projected.grid == x.grid)) {
        projected = {token_resize(projected.x, projected.prefix, projected.grid, x.grid), x.grid, projected.prefix};
      }
      x = {add(x.x, projected.x), x.grid, x.prefix};
      if (trace) record(trace, "decoder block" + std::to_string(k + 1), x);
    }
    return x;
  }

  /// Local tokens -> 1x1x1 conv -> per-frame temperature softmax, [T x H' x W'].
  /// A 1x1x1 conv with one output channel is a per-token dot product, so it
  /// runs as a linear map on the token rows.
  Tensor<T> gaze_head(const TokenField<T>& x, StageShapes* trace = nullptr) const {
    const Tensor<T> logits = linear(local_rows(x), reshape(head_w_, Shape{x.width(), 1}), head_b_);
    const Grid g = x.grid;
    const Tensor<T> frames = reshape(logits, Shape{g.t, g.h * g.w});
    const Tensor<T> probs = softmax(frames, 1, static_cast<T>(cfg_.tau));
    if (trace) trace->push_back({"head", StageShape::Layout::map, 1, g, 0, 0});
    return reshape(probs, Shape{g.t, g.h, g.w});
  }

  /// Gaze heatmap [T x H' x W'], each frame a probability distribution.
  Tensor<T> forward(const Tensor<T>& clip, StageShapes* trace = nullptr) const {
    if (cfg_.head != HeadMode::gaze) fail(ErrorKind::config, "forward() needs the gaze head");
    const Encoded enc = encode(clip, trace);
    return gaze_head(decode(fuse(enc.blocks.back(), trace), enc, trace), trace);
  }

  /// Class logits [classes] from the class token or the mean of all tokens.
  Tensor<T> classify(const Tensor<T>& clip) const {
    if (cfg_.head == HeadMode::gaze) fail(ErrorKind::config, "classify() needs a classification head");
    return classify_tokens(fuse(encode(clip).blocks.back()));
  }

  Tensor<T> classify_tokens(const TokenField<T>& fused) const {
    Tensor<T> feature;
    if (cfg_.head == HeadMode::class_token) {
      if (fused.prefix < 2) fail(ErrorKind::config, "class-token head without an inserted class token");
      feature = slice(fused.x, 0, 1, 2);
    } else {
      feature = reshape(mean(fused.x, 0), Shape{1, fused.width()});
    }
    return reshape(classifier_(feature), Shape{cfg_.classes});
  }

  /// Per-head global-to-local affinity maps at the fusion input, [heads][T' * H' * W'].
  std::vector<std::vector<double>> glc_head_maps(const Tensor<T>& clip) const {
    if (cfg_.fusion != Fusion::glc) fail(ErrorKind::config, "head maps need the global-local correlation layer");
    NoGradGuard no_grad;
    return fusion_->global_affinity(encode(clip).blocks.back());
  }

  Grid glc_grid() const { return encoder_block_grids(cfg_)[3]; }
  std::int64_t fusion_heads() const { return fusion_block_config(cfg_).attention.heads(); }

 private:
  static void record(StageShapes* trace, const std::string& name, const TokenField<T>& f) {
    trace->push_back({name, StageShape::Layout::tokens, f.width(), f.grid, f.prefix, 0});
  }

  std::int64_t global_linear_in() const {
    if (cfg_.strategy == GlobalStrategy::pool_input) return cfg_.channels;
    return embed_.stack_flatten();
  }

  ModelConfig cfg_;
  ParamStore<T> store_;
  TokenEmbedding<T> embed_;
  std::vector<TransformerBlock<T>> encoder_;
  std::vector<std::int64_t> encoder_block_;
  std::optional<TransformerBlock<T>> fusion_;
  std::vector<TransformerBlock<T>> decoder_;
  std::vector<Linear<T>> skips_;
  Tensor<T> head_w_, head_b_;
  Linear<T> classifier_;
};

}  // namespace glc
