#pragma once

// The float64 finite-difference suite behind the `gradcheck` command: every
// differentiable primitive, the attention blocks (pooled, global-local
// correlation, query upsampling), the token embedding strategies and a tiny
// end-to-end network.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "glc/attention.hpp"
#include "glc/embedding.hpp"
#include "glc/grad_check.hpp"
#include "glc/network.hpp"
#include "glc/ops.hpp"
#include "glc/rng.hpp"
#include "glc/token_ops.hpp"

namespace glc {

struct GradCheckSuiteOptions {
  GradCheckOptions check = {.step = 1e-5, .tolerance = 1e-4, .max_probes_per_input = 0, .seed = 7, .floor = 1e-3};
  /// Probes per parameter tensor for the network-level checks.
  std::int64_t network_probes = 16;
  /// Name of a check whose output gets a deliberately wrong backward rule
  /// (harness sanity); empty for the stock suite.
  std::string inject_fault;
};

namespace detail {

/// Identity forward whose backward scales the gradient: a broken rule.
inline Tensor<double> faulty_identity(const Tensor<double>& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result<double>(x.shape(), std::move(out), "faulty_identity", {&x}, [x](Node<double>& self) {
    double* gx = grad_of(x);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += 1.5 * self.grad[i];
  });
}

inline Tensor<double> random_input(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v), true);
}

struct SuiteEntry {
  std::string name;
  std::function<GradCheckReport(const std::string&, const GradCheckOptions&, bool fault)> run;
};

inline GradCheckReport run_fn(const std::string& name, const GradCheckOptions& o, bool fault, TensorFn f,
                              std::vector<Tensor<double>> inputs) {
  if (fault) f = [f](const std::vector<Tensor<double>>& in) { return faulty_identity(f(in)); };
  return grad_check(name, f, std::move(inputs), o);
}

/// Checks every parameter of `store` (sampled) plus `extra` inputs.
inline GradCheckReport run_params(const std::string& name, const GradCheckOptions& o, bool fault,
                                  ParamStore<double>& store, std::vector<Tensor<double>> extra,
                                  std::function<Tensor<double>(const std::vector<Tensor<double>>&)> f) {
  std::vector<Tensor<double>> inputs = std::move(extra);
  for (auto& e : store.entries()) inputs.push_back(e.tensor);
  return run_fn(name, o, fault, std::move(f), std::move(inputs));
}

// Random weights with a spread large enough that every path matters.
inline void randomize(ParamStore<double>& store, Rng& rng, double spread = 0.5) {
  for (auto& e : store.entries()) {
    for (auto& v : e.tensor.mutable_data()) v = rng.uniform(-spread, spread);
  }
}

}  // namespace detail

/// All checks, in report order.
inline std::vector<detail::SuiteEntry> gradcheck_entries(const GradCheckSuiteOptions& suite) {
  using detail::random_input;
  using detail::run_fn;
  using In = std::vector<Tensor<double>>;
  using O = GradCheckOptions;
  std::vector<detail::SuiteEntry> out;
  auto prim = [&](std::string name, std::function<std::pair<TensorFn, In>(Rng&)> make) {
    out.push_back({name, [make](const std::string& n, const O& o, bool fault) {
                     Rng rng(mix_seed(o.seed, fnv1a(n)));
                     auto [f, in] = make(rng);
                     return run_fn(n, o, fault, f, in);
                   }});
  };
  prim("add", [](Rng& r) { return std::pair{TensorFn([](const In& x) { return add(x[0], x[1]); }), In{random_input({3, 4}, r), random_input({3, 4}, r)}}; });
  prim("sub", [](Rng& r) { return std::pair{TensorFn([](const In& x) { return sub(x[0], x[1]); }), In{random_input({3, 4}, r), random_input({3, 4}, r)}}; });
  prim("mul", [](Rng& r) { return std::pair{TensorFn([](const In& x) { return mul(x[0], x[1]); }), In{random_input({3, 4}, r), random_input({3, 4}, r)}}; });
  prim("scale", [](Rng& r) { return std::pair{TensorFn([](const In& x) { return scale(x[0], 1.7); }), In{random_input({5}, r)}}; });
  prim("gelu", [](Rng& r) { return std::pair{TensorFn([](const In& x) { return gelu(x[0]); }), In{random_input({4, 5}, r, -3, 3)}}; });
  prim("sum", [](Rng& r) { return std::pair{TensorFn([](const In& x) { return sum(x[0]); }), In{random_input({3, 4}, r)}}; });
  prim("mean", [](Rng& r) { return std::pair{TensorFn([](const In& x) { return mean(x[0], 1); }), In{random_input({3, 4, 2}, r)}}; });
  prim("matmul", [](Rng& r) { return std::pair{TensorFn([](const In& x) { return matmul(x[0], x[1]); }), In{random_input({3, 5}, r), random_input({5, 4}, r)}}; });
  prim("linear", [](Rng& r) {
    return std::pair{TensorFn([](const In& x) { return linear(x[0], x[1], x[2]); }),
                     In{random_input({6, 5}, r), random_input({5, 3}, r), random_input({3}, r)}};
  });
  prim("reshape", [](Rng& r) { return std::pair{TensorFn([](const In& x) { return reshape(x[0], Shape{4, 3}); }), In{random_input({2, 6}, r)}}; });
  prim("permute", [](Rng& r) { return std::pair{TensorFn([](const In& x) { return permute(x[0], {2, 0, 1}); }), In{random_input({2, 3, 4}, r)}}; });
  prim("transpose", [](Rng& r) { return std::pair{TensorFn([](const In& x) { return transpose(x[0]); }), In{random_input({3, 5}, r)}}; });
  prim("slice", [](Rng& r) { return std::pair{TensorFn([](const In& x) { return slice(x[0], 1, 1, 4); }), In{random_input({3, 5}, r)}}; });
  prim("concat", [](Rng& r) {
    return std::pair{TensorFn([](const In& x) { return concat<double>({x[0], x[1]}, 1); }),
                     In{random_input({3, 2}, r), random_input({3, 4}, r)}};
  });
  prim("embedding_lookup", [](Rng& r) {
    return std::pair{TensorFn([](const In& x) { return embedding_lookup(x[0], {2, 0, 2, 1}); }), In{random_input({3, 4}, r)}};
  });
  prim("softmax", [](Rng& r) { return std::pair{TensorFn([](const In& x) { return softmax(x[0], 1, 2.0); }), In{random_input({3, 8}, r, -2, 2)}}; });
  prim("layernorm", [](Rng& r) {
    return std::pair{TensorFn([](const In& x) { return layernorm(x[0], x[1], x[2]); }),
                     In{random_input({4, 6}, r), random_input({6}, r, 0.5, 1.5), random_input({6}, r)}};
  });
  prim("conv3d", [](Rng& r) {
    return std::pair{TensorFn([](const In& x) { return conv3d(x[0], x[1], x[2], {1, 2, 2}, {1, 1, 1}); }),
                     In{random_input({2, 3, 5, 5}, r), random_input({3, 2, 3, 3, 3}, r), random_input({3}, r)}};
  });
  prim("conv3d_depthwise", [](Rng& r) {
    return std::pair{TensorFn([](const In& x) { return conv3d(x[0], x[1], Tensor<double>{}, {1, 2, 2}, {1, 1, 1}, 3); }),
                     In{random_input({3, 2, 5, 4}, r), random_input({3, 1, 3, 3, 3}, r)}};
  });
  prim("max_pool3d", [](Rng& r) {
    return std::pair{TensorFn([](const In& x) { return max_pool3d(x[0], {1, 2, 2}, {1, 2, 2}); }), In{random_input({2, 2, 4, 4}, r)}};
  });
  prim("trilinear_resize", [](Rng& r) {
    return std::pair{TensorFn([](const In& x) { return trilinear_resize(x[0], {4, 5, 3}); }), In{random_input({2, 2, 3, 4}, r)}};
  });
  prim("token_depthwise_conv", [](Rng& r) {
    return std::pair{TensorFn([](const In& x) { return token_depthwise_conv(x[0], 1, {2, 4, 4}, x[1], {1, 2, 2}, {1, 1, 1}); }),
                     In{random_input({1 + 32, 3}, r), random_input({3, 1, 3, 3, 3}, r)}};
  });
  prim("token_max_pool", [](Rng& r) {
    return std::pair{TensorFn([](const In& x) { return token_max_pool(x[0], 1, {2, 4, 4}, {1, 2, 2}); }), In{random_input({1 + 32, 3}, r)}};
  });
  prim("token_resize", [](Rng& r) {
    return std::pair{TensorFn([](const In& x) { return token_resize(x[0], 1, {1, 2, 3}, {2, 4, 5}); }), In{random_input({1 + 6, 3}, r)}};
  });
  prim("kl_div", [](Rng& r) {
    std::vector<double> label(12);
    for (auto& v : label) v = r.uniform(0.0, 1.0);
    for (int f = 0; f < 2; ++f) {
      double s = 0;
      for (int i = 0; i < 6; ++i) s += label[f * 6 + i];
      for (int i = 0; i < 6; ++i) label[f * 6 + i] /= s;
    }
    const Tensor<double> target({2, 6}, label);
    return std::pair{TensorFn([target](const In& x) { return kl_div(softmax(x[0], 1, 2.0), target); }), In{random_input({2, 6}, r)}};
  });
  prim("cross_entropy", [](Rng& r) { return std::pair{TensorFn([](const In& x) { return cross_entropy(x[0], 2); }), In{random_input({5}, r, -2, 2)}}; });
  prim("multihead_attention", [](Rng& r) {
    return std::pair{TensorFn([](const In& x) { return multihead_attention(x[0], x[1], x[2], 2); }),
                     In{random_input({3, 8}, r), random_input({5, 8}, r), random_input({5, 8}, r)}};
  });
  prim("glc", [](Rng& r) {
    const auto mask = build_suppression(4);
    return std::pair{TensorFn([mask](const In& x) { return glc(x[0], x[1], x[2], mask); }),
                     In{random_input({5, 8}, r), random_input({5, 8}, r), random_input({5, 8}, r)}};
  });

  auto block = [&](std::string name, BlockConfig cfg, Grid grid) {
    out.push_back({name, [cfg, grid](const std::string& n, const O& o, bool fault) {
                     Rng rng(mix_seed(o.seed, fnv1a(n)));
                     ParamStore<double> store(o.seed);
                     TransformerBlock<double> b(store, n, cfg);
                     detail::randomize(store, rng);
                     const auto x = random_input({1 + grid.volume(), cfg.attention.dim}, rng);
                     return detail::run_params(n, o, fault, store, {x}, [b, grid](const In& in) {
                       return b(TokenField<double>{in[0], grid, 1}).x;
                     });
                   }});
  };
  {
    BlockConfig pooled{{8, 4, QueryResample::pool, {1, 2, 2}, {}, {1, 2, 2}, false, 1e8}, 12, 16};
    block("pooled_attention_block", pooled, {2, 4, 4});
    BlockConfig correlation{{8, 4, QueryResample::keep, {1, 1, 1}, {}, {1, 1, 1}, true, 1e8}, 8, 16};
    block("glc_block", correlation, {1, 2, 2});
    BlockConfig upsample{{8, 4, QueryResample::upsample, {1, 1, 1}, {2, 4, 4}, {1, 1, 1}, false, 1e8}, 4, 16};
    block("decoder_block", upsample, {1, 2, 2});
  }

  auto tiny = ModelConfig::tiny();
  for (const auto strategy : {GlobalStrategy::none, GlobalStrategy::pool_input, GlobalStrategy::pool_tokens,
                              GlobalStrategy::conv_input, GlobalStrategy::conv_tokens}) {
    auto cfg = tiny;
    cfg.strategy = strategy;
    const std::string name = "token_embedding_" + strategy_tag(strategy);
    const auto probes = suite.network_probes;
    out.push_back({name, [cfg, probes](const std::string& n, O o, bool fault) {
                     Rng rng(mix_seed(o.seed, fnv1a(n)));
                     ParamStore<double> store(o.seed);
                     TokenEmbedding<double> embed(store, cfg);
                     detail::randomize(store, rng);
                     const auto clip = random_input({cfg.channels, cfg.frames, cfg.height, cfg.width}, rng, 0, 1);
                     o.max_probes_per_input = probes;
                     return detail::run_params(n, o, fault, store, {clip}, [embed](const In& in) { return embed(in[0]).tokens.x; });
                   }});
  }

  for (const auto fusion : {Fusion::glc, Fusion::self_attention}) {
    auto cfg = tiny;
    cfg.fusion = fusion;
    const std::string name = "tiny_network_" + fusion_tag(fusion);
    const auto probes = suite.network_probes;
    out.push_back({name, [cfg, probes](const std::string& n, O o, bool fault) {
                     Rng rng(mix_seed(o.seed, fnv1a(n)));
                     GazeModel<double> model(cfg, o.seed);
                     detail::randomize(model.params(), rng, 0.3);
                     const auto clip = random_input({cfg.channels, cfg.frames, cfg.height, cfg.width}, rng, 0, 1);
                     o.max_probes_per_input = probes;
                     // through the loss, as in training
                     std::vector<double> label(static_cast<std::size_t>(cfg.frames * (cfg.height / 4) * (cfg.width / 4)));
                     for (auto& v : label) v = rng.uniform(0.0, 1.0);
                     const auto hw = static_cast<std::size_t>((cfg.height / 4) * (cfg.width / 4));
                     for (std::size_t f = 0; f < label.size() / hw; ++f) {
                       double s = 0;
                       for (std::size_t i = 0; i < hw; ++i) s += label[f * hw + i];
                       for (std::size_t i = 0; i < hw; ++i) label[f * hw + i] /= s;
                     }
                     const Tensor<double> target({cfg.frames, cfg.height / 4, cfg.width / 4}, label);
                     return detail::run_params(n, o, fault, model.params(), {clip}, [&model, target](const In& in) {
                       return kl_div(model.forward(in[0]), target);
                     });
                   }});
  }
  return out;
}

/// Runs every check; `inject_fault` (if set) must name one of them.
inline std::vector<GradCheckReport> run_gradcheck_suite(const GradCheckSuiteOptions& suite) {
  const auto entries = gradcheck_entries(suite);
  if (!suite.inject_fault.empty()) {
    bool known = false;
    for (const auto& e : entries) known = known || e.name == suite.inject_fault;
    if (!known) fail(ErrorKind::config, "inject_fault names no check: " + suite.inject_fault);
  }
  std::vector<GradCheckReport> reports;
  for (const auto& e : entries) reports.push_back(e.run(e.name, suite.check, e.name == suite.inject_fault));
  return reports;
}

}  // namespace glc
