// Labels, losses, the fixation filter and the precision/recall/F1 metric.

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "glc/objective.hpp"
#include "glc/ops.hpp"
#include "test_util.hpp"

namespace {

using glc::Shape;
using glc::Tensor;

double total(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

// ---------------------------------------------------------------------------
// Gaussian labels

TEST(Label, CenterToOffsetRatio) {
  const auto l = glc::gaussian_label(64, 64, 30.0, 20.0, std::int64_t{19}, 3.0);
  const double center = l[20 * 64 + 30];
  EXPECT_NEAR(center / l[20 * 64 + 33], std::exp(0.5), 1e-12);
  EXPECT_NEAR(center / l[23 * 64 + 30], std::exp(0.5), 1e-12);
  EXPECT_NEAR(center / l[20 * 64 + 27], 1.6487212707, 1e-9);
}

TEST(Label, ArgmaxIsTheGazeCell) {
  glc::Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto x = rng.index(64), y = rng.index(48);
    const auto l = glc::gaussian_label(48, 64, static_cast<double>(x), static_cast<double>(y), std::int64_t{19}, 3.0);
    EXPECT_EQ(std::max_element(l.begin(), l.end()) - l.begin(), y * 64 + x);
  }
}

TEST(Label, SumsToOneIncludingBorders) {
  glc::Rng rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    const double x = rng.uniform(-0.5, 63.5), y = rng.uniform(-0.5, 63.5);
    EXPECT_NEAR(total(glc::gaussian_label(64, 64, x, y, std::int64_t{19}, 3.0)), 1.0, 1e-9);
  }
  for (const auto& [x, y] : {std::pair{0.0, 0.0}, {63.0, 63.0}, {-0.5, 31.0}, {63.5, -0.5}}) {
    EXPECT_NEAR(total(glc::gaussian_label(64, 64, x, y, std::int64_t{19}, 3.0)), 1.0, 1e-9);
  }
}

TEST(Label, WindowTruncatesAtTheKernelRadius) {
  const auto l = glc::gaussian_label(64, 64, 32.0, 32.0, std::int64_t{19}, 3.0);
  EXPECT_GT(l[32 * 64 + 41], 0.0);
  EXPECT_EQ(l[32 * 64 + 42], 0.0);
  EXPECT_GT(l[41 * 64 + 41], 0.0);
}

TEST(Label, RejectsGazeOutsideTheGrid) {
  EXPECT_THROW(glc::gaussian_label(16, 16, 16.0, 3.0, std::int64_t{19}, 3.0), glc::Error);
  EXPECT_THROW(glc::gaussian_label(16, 16, 3.0, -0.6, std::int64_t{19}, 3.0), glc::Error);
  EXPECT_THROW(glc::gaussian_label(16, 16, NAN, 3.0, std::int64_t{19}, 3.0), glc::Error);
  EXPECT_THROW(glc::gaussian_label(16, 16, 3.0, 3.0, std::int64_t{18}, 3.0), glc::Error);
}

TEST(Label, UniformLabel) {
  const auto u = glc::uniform_label(4, 8);
  for (const auto v : u) EXPECT_EQ(v, 1.0 / 32);
  EXPECT_NEAR(total(u), 1.0, 1e-15);
}

TEST(Label, GeometryScalesWithCrop) {
  const auto g = glc::LabelGeometry::for_crop(256);
  EXPECT_EQ(g.radius, 9.0);
  EXPECT_EQ(g.sigma, 3.0);
  EXPECT_EQ(g.saccade_threshold, 40.0);
  const auto d = glc::LabelGeometry::for_crop(64);
  EXPECT_EQ(d.radius, 2.25);
  EXPECT_EQ(d.saccade_threshold, 10.0);
}

// ---------------------------------------------------------------------------
// losses

TEST(Loss, KlOfIdenticalDistributionsIsZero) {
  glc::Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto l = glc::gaussian_label(16, 16, rng.uniform(0, 15), rng.uniform(0, 15), 4.0, 1.5);
    const Tensor<double> t({1, 16, 16}, l);
    EXPECT_LT(std::abs(glc::kl_div(t, t).item()), 1e-9);
  }
}

TEST(Loss, KlTwoCellExample) {
  const Tensor<double> pred({1, 2}, {0.7311, 0.2689}), label({1, 2}, {0.5, 0.5});
  const double want = 0.5 * std::log(0.5 / 0.7311) + 0.5 * std::log(0.5 / 0.2689);
  EXPECT_NEAR(glc::kl_div(pred, label).item(), want, 1e-15);
  EXPECT_NEAR(want, 0.1201, 1e-4);
}

TEST(Loss, KlIsNonNegative) {
  glc::Rng rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::int64_t n = 1 + rng.index(64);
    std::vector<double> p(n), l(n);
    for (auto& v : p) v = rng.uniform(1e-6, 1.0);
    for (auto& v : l) v = rng.bernoulli(0.2) ? 0.0 : rng.uniform(0.0, 1.0);
    l[rng.index(n)] = 1.0;
    const double sp = total(p), sl = total(l);
    for (auto& v : p) v /= sp;
    for (auto& v : l) v /= sl;
    EXPECT_GE(glc::kl_div(Tensor<double>({1, n}, p), Tensor<double>({1, n}, l)).item(), 0.0) << "trial " << trial;
  }
}

TEST(Loss, KlAveragesOverFrames) {
  const Tensor<double> pred({2, 2}, {0.7311, 0.2689, 0.5, 0.5}), label({2, 2}, {0.5, 0.5, 0.5, 0.5});
  const double first = 0.5 * std::log(0.5 / 0.7311) + 0.5 * std::log(0.5 / 0.2689);
  EXPECT_NEAR(glc::kl_div(pred, label).item(), first / 2, 1e-15);
}

TEST(Loss, KlShapeMismatch) {
  EXPECT_THROW(glc::kl_div(Tensor<double>::zeros({1, 3}), Tensor<double>::zeros({1, 2})), glc::Error);
}

TEST(Loss, CrossEntropyValues) {
  for (const std::int64_t k : {1, 2, 7}) {
    EXPECT_NEAR(glc::cross_entropy(Tensor<double>::full({k}, 0.4), 0).item(), std::log(static_cast<double>(k)), 1e-15);
  }
  EXPECT_NEAR(glc::cross_entropy(Tensor<double>({2}, {2.0, 0.0}), 0).item(), std::log1p(std::exp(-2.0)), 1e-15);
  EXPECT_NEAR(glc::cross_entropy(Tensor<double>({2}, {1.0, 0.0}), 0).item(), 0.3133, 1e-4);
  glc::Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> z(5);
    for (auto& v : z) v = rng.uniform(-30, 30);
    EXPECT_GE(glc::cross_entropy(Tensor<double>({5}, z), rng.index(5)).item(), 0.0);
  }
  EXPECT_THROW(glc::cross_entropy(Tensor<double>({2}, {1.0, 0.0}), 2), glc::Error);
}

// ---------------------------------------------------------------------------
// fixation filter

TEST(Fixation, Examples) {
  const std::vector<glc::GazePoint> track{{true, 100, 100}, {true, 100, 100}, {true, 140, 130},
                                          {true, 140, 170}, {false, 0, 0},    {true, 0, 0}};
  const auto kinds = glc::fixation_filter(track, 40.0);
  using K = glc::GazeKind;
  EXPECT_EQ(kinds, (std::vector<K>{K::fixation, K::fixation, K::saccade, K::fixation, K::untracked, K::fixation}));
}

// ---------------------------------------------------------------------------
// metric

std::vector<double> indicator(std::int64_t h, std::int64_t w, double x, double y, double r) {
  std::vector<double> out(static_cast<std::size_t>(h * w));
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j) out[i * w + j] = (i - y) * (i - y) + (j - x) * (j - x) <= r * r ? 1.0 : 0.0;
  return out;
}

TEST(Metric, DigitalDiskHas253Cells) {
  const auto disk = glc::gaze_disk(64, 64, 32, 32, 9.0);
  EXPECT_EQ(std::count(disk.begin(), disk.end(), 1), 253);
}

TEST(Metric, OracleHeatmapScoresOne) {
  glc::PrfAccumulator acc;
  acc.add<double>(indicator(64, 64, 20, 40, 9), 64, 64, 20, 40, 9);
  acc.add<double>(indicator(64, 64, 50, 10, 9), 64, 64, 50, 10, 9);
  const auto r = acc.report();
  EXPECT_EQ(r.f1, 1.0);
  EXPECT_EQ(r.precision, 1.0);
  EXPECT_EQ(r.recall, 1.0);
  EXPECT_EQ(r.frames, 2);
}

TEST(Metric, ShiftedDiskMatchesPixelCount) {
  // find the horizontal shift whose overlap is closest to half the disk
  const auto gt = indicator(64, 64, 32, 32, 9);
  int best_shift = 0;
  double best_overlap = 0;
  for (int s = 0; s <= 18; ++s) {
    const auto moved = indicator(64, 64, 32 + s, 32, 9);
    double overlap = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) overlap += gt[i] * moved[i];
    if (std::abs(overlap - 126.5) < std::abs(best_overlap - 126.5)) best_overlap = overlap, best_shift = s;
  }
  glc::PrfAccumulator acc;
  acc.add<double>(indicator(64, 64, 32 + best_shift, 32, 9), 64, 64, 32, 32, 9);
  const auto r = acc.report();
  EXPECT_NEAR(r.precision, best_overlap / 253, 1e-15);
  EXPECT_NEAR(r.recall, best_overlap / 253, 1e-15);
  EXPECT_NEAR(r.f1, best_overlap / 253, 1e-15);
  EXPECT_NEAR(r.f1, 0.5, 0.03);
}

TEST(Metric, UniformPredictionBaseline) {
  glc::PrfAccumulator acc;
  const std::vector<double> uniform(64 * 64, 1.0 / 4096);
  acc.add<double>(uniform, 64, 64, 32, 32, 9);
  const double p = 253.0 / 4096;
  EXPECT_NEAR(acc.report().f1, 2 * p / (1 + p), 1e-15);
  EXPECT_NEAR(glc::uniform_prediction_f1(253, 4096), 2 * p / (1 + p), 1e-15);
}

TEST(Metric, EmptyPredictionScoresZero) {
  glc::PrfAccumulator acc({0.5});
  acc.add<double>(std::vector<double>(256, 0.0), 16, 16, 8, 8, 3);
  const auto r = acc.report();
  EXPECT_EQ(r.precision, 0.0);
  EXPECT_EQ(r.recall, 0.0);
  EXPECT_EQ(r.f1, 0.0);
}

TEST(Metric, NoFramesReportsZero) {
  const auto r = glc::PrfAccumulator().report();
  EXPECT_EQ(r.frames, 0);
  EXPECT_EQ(r.f1, 0.0);
}

TEST(Metric, ThresholdsAreRelativeToThePeak) {
  // two-level map: the disk at 1.0, everything else at 0.3 of the peak
  auto heat = indicator(32, 32, 10, 10, 3);
  for (auto& v : heat) v = v > 0 ? 2.0 : 0.6;
  glc::PrfAccumulator acc({0.25, 0.5});
  acc.add<double>(heat, 32, 32, 10, 10, 3);
  const double p_all = 29.0 / 1024;
  EXPECT_NEAR(acc.at(0).f1, 2 * p_all / (1 + p_all), 1e-15);
  EXPECT_EQ(acc.at(1).f1, 1.0);
  EXPECT_EQ(acc.report().threshold, 0.5);
}

TEST(Metric, ReportRoundTripsThroughJson) {
  glc::EvalReport r{0.5, 0.25, 0.75, 0.125, 17};
  const auto back = nlohmann::json(r).get<glc::EvalReport>();
  EXPECT_EQ(back.f1, r.f1);
  EXPECT_EQ(back.recall, r.recall);
  EXPECT_EQ(back.precision, r.precision);
  EXPECT_EQ(back.threshold, r.threshold);
  EXPECT_EQ(back.frames, r.frames);
}

}  // namespace
