// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "viny/errors.hpp"
#include "viny/objectives.hpp"

namespace viny {
namespace {

using testing::random_image;
using testing::random_trimap;

TEST(SampleMask, HalfOfSixtyFour) {
  std::mt19937_64 rng(1);
  const auto m = sample_mask(rng, 64, 0.5);
  EXPECT_EQ(m.size(), 64);
  EXPECT_EQ(m.count(), 32);
}

TEST(SampleMask, ZeroRatioMasksNothing) {
  std::mt19937_64 rng(2);
  EXPECT_EQ(sample_mask(rng, 64, 0.0).count(), 0);
}

TEST(SampleMask, CardinalitySweep) {
  std::mt19937_64 rng(3);
  for (int n : {1, 2, 7, 16, 64, 100})
    for (double r : {0.0, 0.1, 0.25, 0.33, 0.5, 0.75, 0.9, 1.0})
      EXPECT_EQ(sample_mask(rng, n, r).count(), static_cast<int>(std::lround(r * n)))
          << n << " " << r;
}

TEST(SampleMask, PositionsAreUniform) {
  // 10,000 Bernoulli(0.5) trials per position: a [0.46, 0.54] window is
  // eight standard deviations wide.
  std::mt19937_64 rng(4);
  std::vector<int> hits(64, 0);
  for (int t = 0; t < 10'000; ++t) {
    const auto m = sample_mask(rng, 64, 0.5);
    for (int i = 0; i < 64; ++i)
      hits[i] += m.masked(i);
  }
  for (int i = 0; i < 64; ++i) {
    const double f = hits[i] / 10'000.0;
    EXPECT_GE(f, 0.46) << i;
    EXPECT_LE(f, 0.54) << i;
  }
}

TEST(SampleMask, RejectsInvalidRatio) {
  std::mt19937_64 rng(5);
  EXPECT_THROW(sample_mask(rng, 64, 1.5), std::invalid_argument);
  EXPECT_THROW(sample_mask(rng, 64, -0.1), std::invalid_argument);
}

TEST(MimLoss, PerfectPredictionIsZero) {
  std::mt19937_64 rng(6);
  Matrix<float> t = Matrix<float>::Random(64, 768);
  EXPECT_EQ(mim_loss(t, t, sample_mask(rng, 64, 0.5)), 0.0f);
}

TEST(MimLoss, ConstantOffsetOnOneMaskedPatch) {
  Matrix<double> t = Matrix<double>::Random(64, 768);
  Matrix<double> p = t;
  p.array() += 0.125;
  MaskPattern m{std::vector<std::uint8_t>(64, 0), 1.0 / 64};
  m.mask[17] = 1;
  EXPECT_NEAR(mim_loss(p, t, m), 0.125, 1e-15);
}

TEST(MimLoss, UnmaskedTargetsDoNotMatter) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<float> u(-5.0f, 5.0f);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix<float> p = Matrix<float>::Random(64, 768);
    Matrix<float> t = Matrix<float>::Random(64, 768);
    const auto m = sample_mask(rng, 64, 0.5);
    const float before = mim_loss(p, t, m);
    for (int i = 0; i < 64; ++i)
      if (!m.masked(i))
        for (int j = 0; j < 768; ++j)
          t(i, j) = u(rng);
    EXPECT_EQ(mim_loss(p, t, m), before);
  }
}

TEST(MimLoss, RejectsEmptyMask) {
  Matrix<float> t = Matrix<float>::Zero(4, 3);
  MaskPattern m{std::vector<std::uint8_t>(4, 0), 0.0};
  EXPECT_THROW(mim_loss(t, t, m), ShapeError);
}

TEST(ClassifyLoss, ZeroHeadGivesLogSix) {
  ModelConfig cfg;
  TokenFeatures<double> f{1, 65, Matrix<double>::Random(65, 128)};
  const auto head = ClsHead<double>::zeros(cfg);
  for (int label = 0; label < 6; ++label)
    EXPECT_NEAR(classify_loss(f, 0, head, label), std::log(6.0), 1e-6);
}

TEST(ClassifyLoss, ReadsOnlyTheClassTokenRow) {
  ModelConfig cfg;
  std::mt19937_64 rng(8);
  const auto head = init_cls_head<double>(cfg, rng);
  TokenFeatures<double> f{1, 65, Matrix<double>::Random(65, 128)};
  const double before = classify_loss(f, 0, head, 3);
  f.rows.bottomRows(64).setRandom();
  EXPECT_EQ(classify_loss(f, 0, head, 3), before);
}

TEST(ClassifyLoss, DominantTrueLogitApproachesZero) {
  RowVector<double> logits = RowVector<double>::Zero(6);
  logits[2] = 50.0;
  EXPECT_LT(cross_entropy(logits, 2), 1e-20);
}

TEST(ClassifyLoss, TwoClassClosedForm) {
  RowVector<double> logits(2);
  logits << 1.0, 0.0;
  EXPECT_NEAR(cross_entropy(logits, 0), std::log1p(std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(cross_entropy(logits, 0), 0.3133, 1e-4);
}

TEST(ClassifyLoss, RejectsOutOfRangeLabel) {
  ModelConfig cfg;
  TokenFeatures<float> f{1, 65, Matrix<float>::Zero(65, 128)};
  const auto head = ClsHead<float>::zeros(cfg);
  EXPECT_THROW(classify_loss(f, 0, head, 6), std::out_of_range);
  EXPECT_THROW(classify_loss(f, 0, head, -1), std::out_of_range);
}

TEST(SegmentLogits, ZeroHeadGivesEqualLogits) {
  ModelConfig cfg;
  TokenFeatures<float> f{1, 65, Matrix<float>::Random(65, 128)};
  const auto logits = segment_logits(f, 0, SegHead<float>::zeros(cfg), cfg);
  EXPECT_EQ(logits.values.rows(), 128 * 128);
  EXPECT_EQ(logits.values.cols(), 3);
  EXPECT_TRUE((logits.values.array() == 0.0f).all());
}

TEST(SegmentLogits, AssemblyRoundTrip) {
  ModelConfig cfg;
  SegLogits<float> l{128, 128, Matrix<float>::Random(128 * 128, 3)};
  const auto back = assemble_logits<float>(disassemble_logits(l, cfg), cfg);
  EXPECT_EQ(back.values, l.values);
}

TEST(SegmentLogits, SharesPatchifyElementOrder) {
  ModelConfig cfg;
  std::mt19937_64 rng(9);
  const Image img = random_image(cfg, rng); // three channels stand in for three classes
  const auto logits = assemble_logits<float>(patchify<float>(img, cfg), cfg);
  for (int y = 0; y < 128; y += 7)
    for (int x = 0; x < 128; x += 5)
      for (int c = 0; c < 3; ++c)
        ASSERT_EQ(logits.values(y * 128 + x, c), img.at(c, y, x));
}

TEST(SegmentLogits, OneHotHeadRowsPaintPatchIndices) {
  ModelConfig cfg;
  // Patch row i carries a one-hot feature at coordinate i; head input row i
  // raises class i % 3 on every pixel of the patch.
  TokenFeatures<float> f{1, 65, Matrix<float>::Zero(65, 128)};
  for (int i = 0; i < 64; ++i)
    f.rows(1 + i, i) = 1.0f;
  auto head = SegHead<float>::zeros(cfg);
  for (int i = 0; i < 64; ++i)
    for (int k = 0; k < 256; ++k)
      head.proj.weight(i, (i % 3) * 256 + k) = 1.0f;
  const auto pred = predict_trimap(segment_logits(f, 0, head, cfg));
  for (int y = 0; y < 128; ++y)
    for (int x = 0; x < 128; ++x) {
      const int patch = (y / 16) * 8 + x / 16;
      ASSERT_EQ(pred.at(y, x), patch % 3) << y << "," << x;
    }
}

TEST(SegmentLoss, PeakedLogitsNearZero) {
  std::mt19937_64 rng(10);
  const Trimap truth = random_trimap(128, 128, rng);
  SegLogits<float> l{128, 128, Matrix<float>::Zero(128 * 128, 3)};
  for (int i = 0; i < 128 * 128; ++i)
    l.values(i, truth.labels[i]) = 20.0f;
  EXPECT_LT(segment_loss(l, truth), 1e-3f);
}

TEST(SegmentLoss, UniformLogitsGiveLogThree) {
  std::mt19937_64 rng(11);
  const Trimap truth = random_trimap(16, 16, rng);
  SegLogits<double> l{16, 16, Matrix<double>::Constant(256, 3, 0.7)};
  EXPECT_NEAR(segment_loss(l, truth), std::log(3.0), 1e-6);
}

TEST(SegmentLoss, TwoByTwoMatchesPerPixelComputation) {
  Trimap truth(2, 2);
  truth.labels = {0, 1, 2, 1};
  SegLogits<double> l{2, 2, Matrix<double>(4, 3)};
  l.values << 2.0, 0.5, -1.0,   //
      0.0, 0.0, 3.0,            //
      -2.0, 1.0, 1.5,           //
      0.3, 0.2, 0.1;
  double expected = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double z = std::exp(l.values(i, 0)) + std::exp(l.values(i, 1)) + std::exp(l.values(i, 2));
    expected += -std::log(std::exp(l.values(i, truth.labels[i])) / z);
  }
  expected /= 4.0;
  EXPECT_NEAR(segment_loss(l, truth), expected, 1e-14);
}

TEST(SegmentLoss, RejectsInvalidLabel) {
  Trimap truth(2, 2);
  truth.labels = {0, 1, 3, 1};
  SegLogits<float> l{2, 2, Matrix<float>::Zero(4, 3)};
  EXPECT_THROW(segment_loss(l, truth), std::out_of_range);
}

TEST(PredictTrimap, RecoversPeakedTruth) {
  std::mt19937_64 rng(12);
  const Trimap truth = random_trimap(32, 32, rng);
  SegLogits<float> l{32, 32, Matrix<float>::Random(32 * 32, 3)};
  for (int i = 0; i < 32 * 32; ++i)
    l.values(i, truth.labels[i]) = 10.0f;
  EXPECT_EQ(predict_trimap(l), truth);
}

TEST(PredictTrimap, TiesGoToLowestClass) {
  SegLogits<float> l{4, 4, Matrix<float>::Constant(16, 3, 1.5f)};
  EXPECT_EQ(predict_trimap(l), Trimap(4, 4, kForeground));
  l.values.col(0).setConstant(0.0f);
  EXPECT_EQ(predict_trimap(l), Trimap(4, 4, kBackground));
}

TEST(PredictTrimap, MatchesBruteForceArgmax) {
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<int> small(-2, 2); // small integers force ties
  SegLogits<float> l{16, 16, Matrix<float>(256, 3)};
  for (int i = 0; i < 256; ++i)
    for (int c = 0; c < 3; ++c)
      l.values(i, c) = static_cast<float>(small(rng));
  const auto pred = predict_trimap(l);
  for (int i = 0; i < 256; ++i) {
    int best = 0;
    float best_v = -1e30f;
    for (int c = 0; c < 3; ++c)
      if (l.values(i, c) > best_v) {
        best_v = l.values(i, c);
        best = c;
      }
    ASSERT_EQ(pred.labels[i], best);
  }
}

TEST(CrossEntropy, NonNegativeAndBoundedByUniformCase) {
  std::mt19937_64 rng(14);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    RowVector<double> logits(6);
    for (int c = 0; c < 6; ++c)
      logits[c] = n(rng);
    for (int c = 0; c < 6; ++c)
      EXPECT_GE(cross_entropy(logits, c), 0.0);
  }
  for (int k : {2, 3, 6, 10})
    EXPECT_NEAR(cross_entropy(RowVector<double>(RowVector<double>::Constant(k, -4.0)), 0), std::log(k), 1e-6);
}

} // namespace
} // namespace viny
