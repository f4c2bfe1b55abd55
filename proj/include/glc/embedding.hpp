#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "glc/attention.hpp"
#include "glc/config.hpp"
#include "glc/ops.hpp"
#include "glc/params.hpp"

namespace glc {

/// Flatten width of the (d) conv stack for a token grid of width `dim`:
/// three stride-(1,2,2) 3x3x3 convs with padding 1.
inline std::int64_t global_stack_flatten(std::int64_t dim, Grid grid) {
  for (int i = 0; i < 3; ++i) {
    grid = {conv_out_extent(grid.t, 3, 1, 1), conv_out_extent(grid.h, 3, 2, 1), conv_out_extent(grid.w, 3, 2, 1)};
  }
  return dim * grid.volume();
}

/// Clip -> (N local tokens + one global token), optionally followed by a class token.
template <class T>
class TokenEmbedding {
 public:
  struct Output {
    TokenField<T> tokens;
    Tensor<T> local_volume;  // [D x T' x H' x W'] conv output before flattening
    Tensor<T> global;        // [1 x D]
  };

  TokenEmbedding() = default;

  TokenEmbedding(ParamStore<T>& store, const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    grid_ = cfg.token_grid();
    const auto d = cfg.dim;
    const Shape patch_kernel{d, cfg.channels, cfg.patch_kernel.t, cfg.patch_kernel.h, cfg.patch_kernel.w};
    local_w_ = store.add("embed.local.weight", patch_kernel, Init::truncated_normal);
    local_b_ = store.add("embed.local.bias", {d}, Init::zeros);
    pos_ = store.add("embed.pos", {grid_.volume(), d}, Init::truncated_normal);
    switch (cfg.strategy) {
      case GlobalStrategy::none: token_ = store.add("embed.global.token", {1, d}, Init::truncated_normal); break;
      case GlobalStrategy::pool_input: lift_ = Linear<T>(store, "embed.global.lift", cfg.channels, d); break;
      case GlobalStrategy::pool_tokens: break;
      case GlobalStrategy::conv_input:
        input_w_ = store.add("embed.global.input.weight", patch_kernel, Init::truncated_normal);
        input_b_ = store.add("embed.global.input.bias", {d}, Init::zeros);
        add_stack(store, d);
        break;
      case GlobalStrategy::conv_tokens: add_stack(store, d); break;
    }
    if (cfg.head == HeadMode::class_token) cls_ = store.add("embed.cls_token", {1, d}, Init::truncated_normal);
  }

  Grid grid() const { return grid_; }

  /// Patch conv: [C x T x H x W] -> [D x T' x H' x W'].
  Tensor<T> embed_local(const Tensor<T>& clip) const {
    check_clip(clip);
    return conv3d(clip, local_w_, local_b_, cfg_.patch_stride, cfg_.patch_padding);
  }

  /// Flattened local rows [N x D] plus the positional table.
  Tensor<T> local_tokens(const Tensor<T>& volume, bool with_position = true) const {
    const Tensor<T> rows = volume_to_rows(volume);
    if (!with_position) return rows;
    std::vector<std::int64_t> index(static_cast<std::size_t>(grid_.volume()));
    std::iota(index.begin(), index.end(), 0);
    return add(rows, embedding_lookup(pos_, index));
  }

  /// One [1 x D] global token.
  Tensor<T> embed_global(const Tensor<T>& clip, const Tensor<T>& local_volume) const {
    switch (cfg_.strategy) {
      case GlobalStrategy::none: return token_;
      case GlobalStrategy::pool_input: {
        const Tensor<T> pooled = max_pool3d(clip, extent_of(clip), Extent3{1, 1, 1});
        return lift_(reshape(pooled, Shape{1, cfg_.channels}));
      }
      case GlobalStrategy::pool_tokens: {
        const Tensor<T> pooled = max_pool3d(local_volume, extent_of(local_volume), Extent3{1, 1, 1});
        return reshape(pooled, Shape{1, cfg_.dim});
      }
      case GlobalStrategy::conv_input:
        return run_stack(conv3d(clip, input_w_, input_b_, cfg_.patch_stride, cfg_.patch_padding));
      case GlobalStrategy::conv_tokens: return run_stack(local_volume);
    }
    fail(ErrorKind::config, "unknown global embedding strategy");
  }

  /// Rows: global token, optional class token, then the locals.
  TokenField<T> tokenize(const Tensor<T>& locals, const Tensor<T>& global) const {
    if (global.shape() != Shape{1, locals.dim(1)}) {
      fail(ErrorKind::shape, "tokenize: global token " + to_string(global.shape()) + " vs local width " +
                                 std::to_string(locals.dim(1)));
    }
    if (locals.dim(0) != grid_.volume()) fail(ErrorKind::shape, "tokenize: local token count does not match grid");
    if (cls_.defined()) return {concat<T>({global, cls_, locals}, 0), grid_, 2};
    return {concat<T>({global, locals}, 0), grid_, 1};
  }

  Output operator()(const Tensor<T>& clip) const {
    const Tensor<T> volume = embed_local(clip);
    const Tensor<T> global = embed_global(clip, volume);
    return {tokenize(local_tokens(volume), global), volume, global};
  }

  std::int64_t stack_flatten() const { return stack_linear_.weight.defined() ? stack_linear_.in_features() : 0; }

 private:
  static Extent3 extent_of(const Tensor<T>& v) { return {v.dim(1), v.dim(2), v.dim(3)}; }

  void check_clip(const Tensor<T>& clip) const {
    const Shape expect{cfg_.channels, cfg_.frames, cfg_.height, cfg_.width};
    if (clip.shape() != expect) {
      fail(ErrorKind::config, "clip " + to_string(clip.shape()) + " does not match configured " + to_string(expect));
    }
  }

  void add_stack(ParamStore<T>& store, std::int64_t d) {
    for (int i = 0; i < 3; ++i) {
      const std::string name = "embed.global.conv" + std::to_string(i + 1);
      stack_w_.push_back(store.add(name + ".weight", {d, d, 3, 3, 3}, Init::truncated_normal));
      stack_b_.push_back(store.add(name + ".bias", {d}, Init::zeros));
    }
    stack_linear_ = Linear<T>(store, "embed.global.linear", global_stack_flatten(d, grid_), d);
  }

  Tensor<T> run_stack(Tensor<T> x) const {
    for (std::size_t i = 0; i < stack_w_.size(); ++i) {
      x = conv3d(x, stack_w_[i], stack_b_[i], Extent3{1, 2, 2}, Extent3{1, 1, 1});
    }
    return stack_linear_(reshape(x, Shape{1, x.numel()}));
  }

  ModelConfig cfg_;
  Grid grid_;
  Tensor<T> local_w_, local_b_, pos_;
  Tensor<T> token_, cls_;
  Linear<T> lift_;
  Tensor<T> input_w_, input_b_;
  std::vector<Tensor<T>> stack_w_, stack_b_;
  Linear<T> stack_linear_;
};

}  // namespace glc
