// Pooled self-attention and global-local correlation against dense
// references that materialize every logit.

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "glc/attention.hpp"
#include "glc/grad_check.hpp"
#include "glc/params.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace {

using glc::Shape;
using glc::Tensor;
using glc::TokenField;
using testing_util::max_abs_diff;
using testing_util::random_tensor;
using testing_util::values;
using testing_util::Matrix;
using testing_util::to_matrix;
using testing_util::flatten;
using testing_util::dense_mha;

// ---------------------------------------------------------------------------
// suppression mask

TEST(Suppression, ThreeByThreeExample) {
  const double l = 1e8;
  const auto s = values(glc::build_suppression(2, l).dense<double>());
  EXPECT_EQ(s, (std::vector<double>{0, l, l, 0, 0, l, 0, l, 0}));
}

TEST(Suppression, FirstColumnAndDiagonalAreZero) {
  for (std::int64_t n : {0, 1, 5, 17}) {
    const auto m = glc::build_suppression(n, 3.0);
    for (std::int64_t i = 0; i < m.size(); ++i) {
      EXPECT_EQ(m.at(i, 0), 0.0);
      EXPECT_EQ(m.at(i, i), 0.0);
      for (std::int64_t j = 1; j < m.size(); ++j)
        if (j != i) EXPECT_EQ(m.at(i, j), 3.0);
    }
  }
}

TEST(Suppression, RejectsBadArguments) {
  EXPECT_THROW(glc::build_suppression(-1), glc::Error);
  EXPECT_THROW(glc::build_suppression(3, 0.0), glc::Error);
}

// ---------------------------------------------------------------------------
// glc

TEST(Glc, EqualLogitsAverageTwoValues) {
  const auto v = random_tensor({5, 4}, 3);
  const auto out = to_matrix(glc::glc(Tensor<double>::zeros({5, 4}), Tensor<double>::zeros({5, 4}), v, glc::build_suppression(4)));
  const auto vm = to_matrix(v);
  for (int c = 0; c < 4; ++c) EXPECT_NEAR(out[0][c], vm[0][c], 1e-15);
  for (int i = 1; i < 5; ++i)
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(out[i][c], (vm[0][c] + vm[i][c]) / 2, 1e-15);
}

TEST(Glc, SmallExampleMatchesDenseOracle) {
  const auto q = random_tensor({4, 2}, 10), k = random_tensor({4, 2}, 11), v = random_tensor({4, 2}, 12);
  const auto got = values(glc::glc(q, k, v, glc::build_suppression(3)));
  EXPECT_LT(max_abs_diff(got, flatten(dense_mha(to_matrix(q), to_matrix(k), to_matrix(v), 1, true))), 1e-12);
}

TEST(Glc, RandomInstancesMatchOracleAndClosedForm) {
  glc::Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const std::int64_t n = rng.index(17), d = 1 + rng.index(8);
    const auto q = random_tensor({n + 1, d}, 3 * trial, false, -3, 3);
    const auto k = random_tensor({n + 1, d}, 3 * trial + 1, false, -3, 3);
    const auto v = random_tensor({n + 1, d}, 3 * trial + 2, false, -3, 3);
    const auto got = to_matrix(glc::glc(q, k, v, glc::build_suppression(n)));
    const auto qm = to_matrix(q), km = to_matrix(k), vm = to_matrix(v);
    EXPECT_LT(max_abs_diff(flatten(got), flatten(dense_mha(qm, km, vm, 1, true))), 1e-12) << "trial " << trial;
    EXPECT_LT(max_abs_diff(flatten(got), flatten(testing_util::glc_closed_form(qm, km, vm))), 1e-10) << "trial " << trial;
  }
}

TEST(Glc, MaskLeakageIsBelowBound) {
  glc::Rng rng(5);
  for (const std::int64_t d : {1, 2, 8, 64, 256, 1024}) {
    const std::int64_t n = 1 + rng.index(12);
    const auto q = random_tensor({n + 1, d}, 100 + d, false, -4, 4), k = random_tensor({n + 1, d}, 200 + d, false, -4, 4);
    std::vector<double> probs(static_cast<std::size_t>((n + 1) * (n + 1)));
    const auto mask = glc::build_suppression(n, 1e8);
    glc::detail::attention_probs(q.data().data(), k.data().data(), n + 1, n + 1, d, &mask, probs.data());
    for (std::int64_t i = 0; i <= n; ++i) {
      double leak = 0;
      for (std::int64_t j = 0; j <= n; ++j)
        if (j != 0 && j != i) leak += probs[i * (n + 1) + j];
      EXPECT_LT(leak, 1e-30) << "d " << d << " row " << i;
    }
  }
}

TEST(Glc, GradientsPassFiniteDifferences) {
  for (int seed = 0; seed < 20; ++seed) {
    const auto mask = glc::build_suppression(4);
    const auto r = glc::grad_check(
        "glc", [mask](const std::vector<Tensor<double>>& x) { return glc::glc(x[0], x[1], x[2], mask); },
        {random_tensor({5, 8}, seed), random_tensor({5, 8}, seed + 50), random_tensor({5, 8}, seed + 90)});
    EXPECT_TRUE(r.passed) << r.summary();
  }
}

// ---------------------------------------------------------------------------
// multi-head attention and the pooled block

TEST(Attention, MultiHeadMatchesDenseOracle) {
  for (int seed = 0; seed < 20; ++seed) {
    const auto q = random_tensor({6, 12}, seed), k = random_tensor({9, 12}, seed + 1), v = random_tensor({9, 12}, seed + 2);
    const auto got = values(glc::multihead_attention(q, k, v, 3));
    EXPECT_LT(max_abs_diff(got, flatten(dense_mha(to_matrix(q), to_matrix(k), to_matrix(v), 3, false))), 1e-12);
  }
}

TEST(Attention, SingleTokenReturnsItsValue) {
  const auto v = random_tensor({1, 4}, 2);
  EXPECT_LT(max_abs_diff(values(glc::multihead_attention(random_tensor({1, 4}, 1), random_tensor({1, 4}, 3), v, 2)), values(v)),
            1e-15);
}

// Sets a PooledAttention's projections and compares against hand-built Q, K, V.
template <class T>
void check_unpooled_block(double tol) {
  glc::ParamStore<T> store(9);
  glc::AttentionConfig cfg{.dim = 16, .head_dim = 16, .kv_stride = {1, 1, 1}};
  cfg.q_stride = {1, 1, 1};
  glc::PooledAttention<T> attn(store, "a", cfg);
  glc::Rng rng(4);
  for (auto& e : store.entries())
    for (auto& w : e.tensor.mutable_data()) w = static_cast<T>(rng.uniform(-0.5, 0.5));
  const glc::Grid grid{2, 2, 2};
  const auto xd = random_tensor({9, 16}, 8, false);
  const Tensor<T> x(xd.shape(), std::vector<T>(xd.data().begin(), xd.data().end()));
  const auto out = attn(TokenField<T>{x, grid, 1});

  auto param = [&](const std::string& name) {
    const auto* e = store.find(name);
    return std::vector<double>(e->tensor.data().begin(), e->tensor.data().end());
  };
  const auto wqkv = param("a.qkv.weight"), bqkv = param("a.qkv.bias"), wp = param("a.proj.weight"), bp = param("a.proj.bias");
  const auto xm = to_matrix(Tensor<double>(x.shape(), std::vector<double>(x.data().begin(), x.data().end())));
  Matrix q(9, std::vector<double>(16)), k = q, v = q;
  for (int i = 0; i < 9; ++i)
    for (int c = 0; c < 48; ++c) {
      double acc = bqkv[c];
      for (int r = 0; r < 16; ++r) acc += xm[i][r] * wqkv[r * 48 + c];
      (c < 16 ? q : c < 32 ? k : v)[i][c % 16] = acc;
    }
  const auto att = dense_mha(q, k, v, 1, false);
  std::vector<double> want;
  for (int i = 0; i < 9; ++i)
    for (int c = 0; c < 16; ++c) {
      double acc = bp[c];
      for (int r = 0; r < 16; ++r) acc += att[i][r] * wp[r * 16 + c];
      want.push_back(acc);
    }
  EXPECT_LT(max_abs_diff(values(out.x), want), tol);
}

TEST(Attention, UnpooledBlockMatchesDenseReference) {
  check_unpooled_block<double>(1e-12);
  check_unpooled_block<float>(1e-6);
}

TEST(Attention, QueryPoolingHalvesTheGrid) {
  glc::ParamStore<double> store(1);
  glc::BlockConfig cfg{{.dim = 8, .head_dim = 4, .query = glc::QueryResample::pool, .q_stride = {1, 2, 2}, .kv_stride = {1, 4, 4}},
                       16, 32};
  glc::TransformerBlock<double> block(store, "b", cfg);
  const auto out = block(TokenField<double>{random_tensor({1 + 4 * 16 * 16, 8}, 1, false), {4, 16, 16}, 1});
  EXPECT_EQ(out.grid, (glc::Grid{4, 8, 8}));
  EXPECT_EQ(out.x.shape(), (Shape{1 + 4 * 8 * 8, 16}));
}

TEST(Attention, PermutingLocalsPermutesOutputs) {
  glc::ParamStore<double> store(3);
  glc::BlockConfig cfg{{.dim = 8, .head_dim = 4, .kv_stride = {1, 1, 1}}, 8, 16};
  cfg.attention.q_stride = {1, 1, 1};
  glc::TransformerBlock<double> block(store, "b", cfg);
  const auto x = random_tensor({7, 8}, 5, false);
  std::vector<std::int64_t> perm{0, 4, 2, 6, 1, 5, 3};
  const auto px = glc::embedding_lookup(x, perm);
  const auto y = values(block({x, {1, 2, 3}, 1}).x);
  const auto py = values(block({px, {1, 2, 3}, 1}).x);
  for (int i = 0; i < 7; ++i)
    for (int c = 0; c < 8; ++c) EXPECT_NEAR(py[i * 8 + c], y[perm[i] * 8 + c], 1e-12);
}

TEST(Attention, GlobalRowBypassesPooling) {
  glc::ParamStore<double> store(3);
  glc::BlockConfig cfg{{.dim = 8, .head_dim = 4, .query = glc::QueryResample::pool, .q_stride = {1, 2, 2}, .kv_stride = {1, 2, 2}},
                       8, 16};
  glc::TransformerBlock<double> block(store, "b", cfg);
  const auto x = random_tensor({1 + 16, 8}, 5, false);
  const auto out = block({x, {1, 4, 4}, 1});
  EXPECT_EQ(out.prefix, 1);
  EXPECT_EQ(out.x.dim(0), 1 + 4);
}

TEST(Attention, BadHeadDimIsConfigError) {
  glc::ParamStore<double> store(1);
  try {
    glc::PooledAttention<double> attn(store, "a", glc::AttentionConfig{.dim = 10, .head_dim = 4});
    FAIL();
  } catch (const glc::Error& e) {
    EXPECT_EQ(e.kind(), glc::ErrorKind::config);
  }
}

// ---------------------------------------------------------------------------
// fusion layer

glc::BlockConfig fusion_config(bool suppress) {
  glc::BlockConfig cfg{{.dim = 16, .head_dim = 4, .kv_stride = {1, 1, 1}, .suppress = suppress}, 16, 64};
  cfg.attention.q_stride = {1, 1, 1};
  return cfg;
}

TEST(Fusion, GlcAndSelfAttentionHaveEqualParameterCounts) {
  glc::ParamStore<float> a(1), b(1);
  glc::TransformerBlock<float>(a, "f", fusion_config(true));
  glc::TransformerBlock<float>(b, "f", fusion_config(false));
  EXPECT_EQ(a.count(), b.count());
  ASSERT_EQ(a.entries().size(), b.entries().size());
  for (std::size_t i = 0; i < a.entries().size(); ++i) EXPECT_EQ(a.entries()[i].tensor.shape(), b.entries()[i].tensor.shape());
}

TEST(Fusion, GlcBlockGradCheck) {
  glc::ParamStore<double> store(2);
  glc::TransformerBlock<double> block(store, "f", fusion_config(true));
  glc::Rng rng(6);
  for (auto& e : store.entries())
    for (auto& w : e.tensor.mutable_data()) w = rng.uniform(-0.5, 0.5);
  std::vector<Tensor<double>> inputs{random_tensor({17, 16}, 3)};
  for (auto& e : store.entries()) inputs.push_back(e.tensor);
  const auto r = glc::grad_check(
      "glc_block", [&](const std::vector<Tensor<double>>& in) { return block({in[0], {1, 4, 4}, 1}).x; }, inputs);
  EXPECT_TRUE(r.passed) << r.summary();
}

TEST(Fusion, HeadMapsAreDistributions) {
  glc::ParamStore<double> store(2);
  glc::TransformerBlock<double> block(store, "f", fusion_config(true));
  const auto maps = block.global_affinity({random_tensor({1 + 18, 16}, 7, false), {2, 3, 3}, 1});
  ASSERT_EQ(maps.size(), 4u);
  for (const auto& m : maps) {
    ASSERT_EQ(m.size(), 18u);
    EXPECT_NEAR(std::accumulate(m.begin(), m.end(), 0.0), 1.0, 1e-6);
    for (const auto v : m) EXPECT_GE(v, 0.0);
  }
}

TEST(Fusion, IdenticalKeysGiveUniformMaps) {
  glc::ParamStore<double> store(2);
  glc::TransformerBlock<double> block(store, "f", fusion_config(true));
  // identical local rows project to identical keys
  auto x = random_tensor({1 + 8, 16}, 7, false);
  auto data = x.mutable_data();
  for (int i = 2; i < 9; ++i)
    for (int c = 0; c < 16; ++c) data[i * 16 + c] = data[16 + c];
  for (const auto& m : block.global_affinity({x, {2, 2, 2}, 1}))
    for (const auto v : m) EXPECT_NEAR(v, 1.0 / 8, 1e-12);
}

}  // namespace
