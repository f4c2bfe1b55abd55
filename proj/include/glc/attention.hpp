#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "glc/error.hpp"
#include "glc/gemm.hpp"
#include "glc/ops.hpp"
#include "glc/params.hpp"
#include "glc/tensor.hpp"
#include "glc/token_ops.hpp"
#include "glc/vmath.hpp"

namespace glc {

/// Token matrix with its spatio-temporal bookkeeping. The first `prefix` rows
/// are the global token (and, for the class-token head, a class token); they
/// never take part in resampling. The remaining rows are the grid's local
/// tokens in T-major, then H, then W order.
template <class T>
struct TokenField {
  Tensor<T> x;
  Grid grid;
  std::int64_t prefix = 1;

  std::int64_t width() const { return x.dim(1); }
  std::int64_t tokens() const { return x.dim(0); }
  std::int64_t locals() const { return grid.volume(); }
};

/// [N x C] local rows -> [C x T x H x W] volume.
template <class T>
Tensor<T> rows_to_volume(const Tensor<T>& rows, Grid grid) {
  if (rows.rank() != 2 || rows.dim(0) != grid.volume()) {
    fail(ErrorKind::shape, "rows_to_volume: " + to_string(rows.shape()) + " does not cover grid " + to_string(grid));
  }
  return reshape(transpose(rows), Shape{rows.dim(1), grid.t, grid.h, grid.w});
}

/// [C x T x H x W] volume -> [N x C] local rows.
template <class T>
Tensor<T> volume_to_rows(const Tensor<T>& volume) {
  const std::int64_t c = volume.dim(0);
  return transpose(reshape(volume, Shape{c, volume.numel() / c}));
}

template <class T>
Tensor<T> prefix_rows(const TokenField<T>& f) {
  return slice(f.x, 0, 0, f.prefix);
}

template <class T>
Tensor<T> local_rows(const TokenField<T>& f) {
  return slice(f.x, 0, f.prefix, f.tokens());
}

/// Applies `fn` to the local tokens viewed as a volume and re-attaches the
/// prefix rows unchanged.
template <class T, class Fn>
TokenField<T> map_locals(const TokenField<T>& f, Fn&& fn) {
  Tensor<T> volume = fn(rows_to_volume(local_rows(f), f.grid));
  const Grid grid{volume.dim(1), volume.dim(2), volume.dim(3)};
  return {concat<T>({prefix_rows(f), volume_to_rows(volume)}, 0), grid, f.prefix};
}

/// Additive logit suppression for global-local correlation, in rule form:
/// s_ij = 0 when i == j or j is the global column, lambda otherwise
/// (0-based indices, global token at index 0).
struct SuppressionMask {
  std::int64_t locals = 0;
  double lambda = 1e8;

  std::int64_t size() const { return locals + 1; }
  double at(std::int64_t i, std::int64_t j) const { return (i == j || j == 0) ? 0.0 : lambda; }

  template <class T>
  Tensor<T> dense() const {
    const auto n = size();
    std::vector<T> values(static_cast<std::size_t>(n * n));
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < n; ++j) values[i * n + j] = static_cast<T>(at(i, j));
    }
    return Tensor<T>(Shape{n, n}, std::move(values));
  }
};

inline SuppressionMask build_suppression(std::int64_t locals, double lambda = 1e8) {
  if (locals < 0) fail(ErrorKind::config, "suppression mask needs a non-negative local token count");
  if (!(lambda > 0)) fail(ErrorKind::config, "suppression lambda must be positive");
  return {locals, lambda};
}

namespace detail {

template <class T>
void copy_head(const T* src, std::int64_t rows, std::int64_t width, std::int64_t col0, std::int64_t cols, T* dst) {
  for (std::int64_t r = 0; r < rows; ++r) std::copy_n(src + r * width + col0, cols, dst + r * cols);
}

template <class T>
void add_head(const T* src, std::int64_t rows, std::int64_t width, std::int64_t col0, std::int64_t cols, T* dst) {
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) dst[r * width + col0 + c] += src[r * cols + c];
  }
}

/// Row-softmax weights of (q k^T - S) / sqrt(head_dim) for one head, written to `probs`.
template <class T>
void attention_probs(const T* qh, const T* kh, std::int64_t nq, std::int64_t nk, std::int64_t head_dim,
                     const SuppressionMask* mask, T* probs) {
  kernel::gemm(false, true, nq, nk, head_dim, qh, kh, probs, false);
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(head_dim));
  for (std::int64_t i = 0; i < nq; ++i) {
    T* row = probs + i * nk;
    if (mask) {
      const T lambda = static_cast<T>(mask->lambda);
      for (std::int64_t j = 1; j < nk; ++j) row[j] -= j == i ? T(0) : lambda;
    }
    for (std::int64_t j = 0; j < nk; ++j) row[j] *= inv_scale;
    const T total = vm::exp_shifted(row, nk, vm::max(row, nk), T(1));
    const T inv_total = T(1) / total;
    for (std::int64_t j = 0; j < nk; ++j) row[j] *= inv_total;
  }
}

}  // namespace detail

/// Multi-head scaled dot-product attention over dense logits,
/// softmax((Q K^T - S) / sqrt(head_dim)) V per head, heads concatenated along
/// channels. q is [nq x D], k and v are [nk x D]. With a mask, nq == nk.
template <class T>
Tensor<T> multihead_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::int64_t heads,
                              const SuppressionMask* mask = nullptr) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.shape() != v.shape()) {
    fail(ErrorKind::shape, "attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " +
                               to_string(v.shape()));
  }
  const std::int64_t nq = q.dim(0), nk = k.dim(0), width = q.dim(1);
  if (heads < 1 || width % heads != 0) {
    fail(ErrorKind::config, "attention: width " + std::to_string(width) + " not divisible into " +
                                std::to_string(heads) + " heads");
  }
  if (mask && (mask->size() != nq || nq != nk)) {
    fail(ErrorKind::shape, "attention: suppression mask of size " + std::to_string(mask->size()) + " for " +
                               std::to_string(nq) + "x" + std::to_string(nk) + " logits");
  }
  const std::int64_t hd = width / heads;
  std::vector<T> probs(static_cast<std::size_t>(heads * nq * nk));
  std::vector<T> out(static_cast<std::size_t>(nq * width));
  std::vector<T> qh(nq * hd), kh(nk * hd), vh(nk * hd), oh(nq * hd);
  for (std::int64_t h = 0; h < heads; ++h) {
    detail::copy_head(q.data().data(), nq, width, h * hd, hd, qh.data());
    detail::copy_head(k.data().data(), nk, width, h * hd, hd, kh.data());
    detail::copy_head(v.data().data(), nk, width, h * hd, hd, vh.data());
    T* p = probs.data() + h * nq * nk;
    detail::attention_probs(qh.data(), kh.data(), nq, nk, hd, mask, p);
    kernel::gemm(false, false, nq, hd, nk, p, vh.data(), oh.data(), false);
    for (std::int64_t r = 0; r < nq; ++r) std::copy_n(oh.data() + r * hd, hd, out.data() + r * width + h * hd);
  }
  return detail::make_result<T>(
      Shape{nq, width}, std::move(out), mask ? "glc_attention" : "attention", {&q, &k, &v},
      [q, k, v, heads, hd, nq, nk, width, probs = std::move(probs)](Node<T>& self) {
        T* gq = detail::grad_of(q);
        T* gk = detail::grad_of(k);
        T* gv = detail::grad_of(v);
        const T inv_scale = T(1) / std::sqrt(static_cast<T>(hd));
        std::vector<T> qh(nq * hd), kh(nk * hd), vh(nk * hd), goh(nq * hd);
        std::vector<T> dp(nq * nk), tmp_q(nq * hd), tmp_k(nk * hd);
        for (std::int64_t h = 0; h < heads; ++h) {
          const T* p = probs.data() + h * nq * nk;
          detail::copy_head(self.grad.data(), nq, width, h * hd, hd, goh.data());
          detail::copy_head(v.data().data(), nk, width, h * hd, hd, vh.data());
          if (gv) {
            kernel::gemm(true, false, nk, hd, nq, p, goh.data(), tmp_k.data(), false);
            detail::add_head(tmp_k.data(), nk, width, h * hd, hd, gv);
          }
          if (!gq && !gk) continue;
          kernel::gemm(false, true, nq, nk, hd, goh.data(), vh.data(), dp.data(), false);
          for (std::int64_t i = 0; i < nq; ++i) {
            const T* prow = p + i * nk;
            T* drow = dp.data() + i * nk;
            T dot = 0;
            for (std::int64_t j = 0; j < nk; ++j) dot += prow[j] * drow[j];
            for (std::int64_t j = 0; j < nk; ++j) drow[j] = prow[j] * (drow[j] - dot) * inv_scale;
          }
          if (gq) {
            detail::copy_head(k.data().data(), nk, width, h * hd, hd, kh.data());
            kernel::gemm(false, false, nq, hd, nk, dp.data(), kh.data(), tmp_q.data(), false);
            detail::add_head(tmp_q.data(), nq, width, h * hd, hd, gq);
          }
          if (gk) {
            detail::copy_head(q.data().data(), nq, width, h * hd, hd, qh.data());
            kernel::gemm(true, false, nk, hd, nq, dp.data(), qh.data(), tmp_k.data(), false);
            detail::add_head(tmp_k.data(), nk, width, h * hd, hd, gk);
          }
        }
      });
}

/// Attention weights per head ([heads][nq * nk]), no graph.
template <class T>
std::vector<std::vector<T>> attention_weights(const Tensor<T>& q, const Tensor<T>& k, std::int64_t heads,
                                              const SuppressionMask* mask = nullptr) {
  const std::int64_t nq = q.dim(0), nk = k.dim(0), width = q.dim(1), hd = width / heads;
  std::vector<std::vector<T>> weights(static_cast<std::size_t>(heads));
  std::vector<T> qh(nq * hd), kh(nk * hd);
  for (std::int64_t h = 0; h < heads; ++h) {
    detail::copy_head(q.data().data(), nq, width, h * hd, hd, qh.data());
    detail::copy_head(k.data().data(), nk, width, h * hd, hd, kh.data());
    weights[h].resize(static_cast<std::size_t>(nq * nk));
    detail::attention_probs(qh.data(), kh.data(), nq, nk, hd, mask, weights[h].data());
  }
  return weights;
}

/// Single-head global-local correlation: softmax((Q K^T - S) / sqrt(D)) V.
template <class T>
Tensor<T> glc(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const SuppressionMask& mask) {
  return multihead_attention(q, k, v, 1, &mask);
}

// ---------------------------------------------------------------------------

enum class QueryResample { keep, pool, upsample };

struct AttentionConfig {
  std::int64_t dim = 0;
  std::int64_t head_dim = 0;
  QueryResample query = QueryResample::keep;
  Extent3 q_stride;       // used by pool
  Grid q_target;          // used by upsample
  Extent3 kv_stride;      // unit stride disables K/V pooling
  bool suppress = false;  // global-local correlation mask
  double lambda = 1e8;

  std::int64_t heads() const { return dim / head_dim; }
};

inline void validate(const AttentionConfig& cfg) {
  if (cfg.head_dim < 1 || cfg.dim % cfg.head_dim != 0) {
    fail(ErrorKind::config, "attention width " + std::to_string(cfg.dim) + " is not a multiple of head_dim " +
                                std::to_string(cfg.head_dim));
  }
  for (const auto s : {cfg.q_stride.t, cfg.q_stride.h, cfg.q_stride.w, cfg.kv_stride.t, cfg.kv_stride.h,
                       cfg.kv_stride.w}) {
    if (s < 1) fail(ErrorKind::config, "attention strides must be >= 1");
  }
  if (cfg.suppress && (cfg.query != QueryResample::keep || !cfg.kv_stride.unit())) {
    fail(ErrorKind::config, "global-local correlation needs square logits: no query or key/value resampling");
  }
}

inline Grid pooled_grid(Grid grid, Extent3 stride, const std::string& where) {
  if (grid.t % stride.t || grid.h % stride.h || grid.w % stride.w) {
    fail(ErrorKind::config, where + ": grid " + to_string(grid) + " is not divisible by stride " + to_string(stride));
  }
  return {grid.t / stride.t, grid.h / stride.h, grid.w / stride.w};
}

/// Multi-head attention with optional strided depthwise pooling of the local
/// Q/K/V tokens (or trilinear upsampling of Q). Prefix rows bypass resampling.
template <class T>
class PooledAttention {
 public:
  PooledAttention() = default;
  PooledAttention(ParamStore<T>& store, const std::string& name, AttentionConfig cfg) : cfg_(cfg) {
    validate(cfg_);
    qkv_ = Linear<T>(store, name + ".qkv", cfg.dim, 3 * cfg.dim);
    const Shape pool_shape{cfg.dim, 1, 3, 3, 3};
    if (cfg.query == QueryResample::pool && !cfg.q_stride.unit()) {
      pool_q_ = store.add(name + ".pool_q.weight", pool_shape, Init::ones);
    }
    if (!cfg.kv_stride.unit()) {
      pool_k_ = store.add(name + ".pool_k.weight", pool_shape, Init::ones);
      pool_v_ = store.add(name + ".pool_v.weight", pool_shape, Init::ones);
    }
    // pooling kernels start as box filters
    for (auto* kernel : {&pool_q_, &pool_k_, &pool_v_}) {
      if (!kernel->defined()) continue;
      for (auto& w : kernel->mutable_data()) w = T(1) / T(27);
    }
    proj_ = Linear<T>(store, name + ".proj", cfg.dim, cfg.dim);
  }

  const AttentionConfig& config() const { return cfg_; }

  /// Q, K, V token fields after projection and resampling.
  struct Projected {
    TokenField<T> q, k, v;
  };

  Projected project(const TokenField<T>& x) const {
    const Tensor<T> qkv = qkv_(x.x);
    const std::int64_t d = cfg_.dim;
    TokenField<T> q{slice(qkv, 1, 0, d), x.grid, x.prefix};
    TokenField<T> k{slice(qkv, 1, d, 2 * d), x.grid, x.prefix};
    TokenField<T> v{slice(qkv, 1, 2 * d, 3 * d), x.grid, x.prefix};
    const Extent3 pad{1, 1, 1};
    if (pool_q_.defined()) {
      q = {token_depthwise_conv(q.x, q.prefix, q.grid, pool_q_, cfg_.q_stride, pad),
           pooled_grid(x.grid, cfg_.q_stride, "query pooling"), q.prefix};
    } else if (cfg_.query == QueryResample::upsample) {
      q = {token_resize(q.x, q.prefix, q.grid, cfg_.q_target), cfg_.q_target, q.prefix};
    }
    if (pool_k_.defined()) {
      const Grid kv_grid = pooled_grid(x.grid, cfg_.kv_stride, "key/value pooling");
      k = {token_depthwise_conv(k.x, k.prefix, k.grid, pool_k_, cfg_.kv_stride, pad), kv_grid, k.prefix};
      v = {token_depthwise_conv(v.x, v.prefix, v.grid, pool_v_, cfg_.kv_stride, pad), kv_grid, v.prefix};
    }
    return {q, k, v};
  }

  TokenField<T> operator()(const TokenField<T>& x) const {
    const auto p = project(x);
    std::optional<SuppressionMask> mask;
    if (cfg_.suppress) mask = build_suppression(p.q.tokens() - 1, cfg_.lambda);
    const Tensor<T> attended = multihead_attention(p.q.x, p.k.x, p.v.x, cfg_.heads(), mask ? &*mask : nullptr);
    return {proj_(attended), p.q.grid, x.prefix};
  }

 private:
  AttentionConfig cfg_;
  Linear<T> qkv_;
  Tensor<T> pool_q_, pool_k_, pool_v_;
  Linear<T> proj_;
};

struct BlockConfig {
  AttentionConfig attention;
  std::int64_t dim_out = 0;
  std::int64_t mlp_hidden = 0;
};

/// Pre-norm transformer layer: x + attn(LN(x)) with the residual resampled to
/// the query grid (max pooling or trilinear), then an MLP whose output width
/// may differ from the input, in which case the residual is projected.
template <class T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParamStore<T>& store, const std::string& name, BlockConfig cfg) : cfg_(cfg) {
    const auto d = cfg.attention.dim;
    norm1_ = LayerNorm<T>(store, name + ".norm1", d);
    attn_ = PooledAttention<T>(store, name + ".attn", cfg.attention);
    norm2_ = LayerNorm<T>(store, name + ".norm2", d);
    fc1_ = Linear<T>(store, name + ".mlp.fc1", d, cfg.mlp_hidden);
    fc2_ = Linear<T>(store, name + ".mlp.fc2", cfg.mlp_hidden, cfg.dim_out);
    if (cfg.dim_out != d) res_proj_ = Linear<T>(store, name + ".res_proj", d, cfg.dim_out);
  }

  const BlockConfig& config() const { return cfg_; }
  const PooledAttention<T>& attention() const { return attn_; }
  const LayerNorm<T>& norm1() const { return norm1_; }

  TokenField<T> operator()(const TokenField<T>& in) const {
    if (in.width() != cfg_.attention.dim) {
      fail(ErrorKind::shape, "block expects width " + std::to_string(cfg_.attention.dim) + ", got " +
                                 std::to_string(in.width()));
    }
    const TokenField<T> attended = attn_({norm1_(in.x), in.grid, in.prefix});
    TokenField<T> skip = in;
    const auto& a = cfg_.attention;
    if (a.query == QueryResample::pool && !a.q_stride.unit()) {
      skip = {token_max_pool(in.x, in.prefix, in.grid, a.q_stride), attended.grid, in.prefix};
    } else if (a.query == QueryResample::upsample) {
      skip = {token_resize(in.x, in.prefix, in.grid, a.q_target), a.q_target, in.prefix};
    }
    const Tensor<T> x1 = add(skip.x, attended.x);
    const Tensor<T> normed = norm2_(x1);
    const Tensor<T> hidden = fc2_(gelu(fc1_(normed)));
    const Tensor<T> base = res_proj_.weight.defined() ? res_proj_(normed) : x1;
    return {add(base, hidden), attended.grid, in.prefix};
  }

  /// Per head, the global token's softmax-normalized affinity q_1 . k_i /
  /// sqrt(head_dim) over the local tokens i, in grid order.
  std::vector<std::vector<double>> global_affinity(const TokenField<T>& in) const {
    NoGradGuard no_grad;
    const auto p = attn_.project({norm1_(in.x), in.grid, in.prefix});
    const std::int64_t heads = cfg_.attention.heads();
    const std::int64_t hd = cfg_.attention.head_dim;
    const std::int64_t width = cfg_.attention.dim;
    const std::int64_t first = p.k.prefix;
    const std::int64_t n = p.k.tokens() - first;
    const auto qv = p.q.x.data();
    const auto kv = p.k.x.data();
    std::vector<std::vector<double>> maps(static_cast<std::size_t>(heads), std::vector<double>(n));
    for (std::int64_t h = 0; h < heads; ++h) {
      auto& m = maps[h];
      double peak = -INFINITY;
      for (std::int64_t i = 0; i < n; ++i) {
        double dot = 0;
        for (std::int64_t c = 0; c < hd; ++c) {
          dot += static_cast<double>(qv[h * hd + c]) * static_cast<double>(kv[(first + i) * width + h * hd + c]);
        }
        m[i] = dot / std::sqrt(static_cast<double>(hd));
        peak = std::max(peak, m[i]);
      }
      double total = 0;
      for (auto& w : m) total += (w = std::exp(w - peak));
      for (auto& w : m) w /= total;
    }
    return maps;
  }

 private:
  BlockConfig cfg_;
  LayerNorm<T> norm1_;
  PooledAttention<T> attn_;
  LayerNorm<T> norm2_;
  Linear<T> fc1_, fc2_, res_proj_;
};

}  // namespace glc
