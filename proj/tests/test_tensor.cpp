// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mergequant/tensor.hpp"
#include "test_util.hpp"

namespace mq {
namespace {

template <typename A, typename B>
concept Multipliable = requires(const A& a, const B& b) { matmul(a, b); };

TEST(Tensor, ShapeAndPayloadMustAgree) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  const Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rows(), 6u);
  EXPECT_EQ(t.cols(), 4u);
}

TEST(Tensor, MatmulIdentity) {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  const Tensor i = Tensor::from_rows({{1, 0}, {0, 1}});
  EXPECT_EQ(matmul(a, i), a);
}

TEST(Tensor, MatmulDotProduct) {
  const Tensor y = matmul(Tensor::from_rows({{1, 2}}), Tensor::from_rows({{3}, {4}}));
  ASSERT_EQ(y.shape(), (Shape{1, 1}));
  EXPECT_EQ(y[0], 11.0);
}

TEST(Tensor, MatmulRejectsInnerMismatch) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
  EXPECT_THROW(matmul(IntTensor({2, 3}, std::vector<std::int32_t>(6), 4), IntTensor({2, 3}, std::vector<std::int32_t>(6), 4)),
               ShapeError);
}

TEST(Tensor, MixedRealIntegerProductIsNotCallable) {
  static_assert(Multipliable<Tensor, Tensor>);
  static_assert(Multipliable<IntTensor, IntTensor>);
  static_assert(!Multipliable<Tensor, IntTensor>);
  static_assert(!Multipliable<IntTensor, Tensor>);
}

TEST(Tensor, IntegerMatmulEqualsFp64Product) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const IntTensor a = testing::random_ints({8, 8}, 4, rng);
    const IntTensor b = testing::random_ints({8, 8}, 4, rng);
    const IntTensor c = matmul(a, b);
    EXPECT_EQ(c.bits(), 32);
    EXPECT_EQ(c.to_real(), testing::naive_matmul(a.to_real(), b.to_real()));
  }
}

TEST(Tensor, IntegerMatmulDetectsAccumulatorOverflow) {
  const std::int32_t big = (1 << 30);
  const IntTensor a({1, 4}, {big, big, big, big}, 32);
  const IntTensor b({4, 1}, {4, 4, 4, 4}, 32);
  EXPECT_THROW(matmul(a, b), NumericError);
}

TEST(Tensor, IntegerGridIsEnforced) {
  EXPECT_THROW(IntTensor({1, 1}, {8}, 4), NumericError);
  EXPECT_THROW(IntTensor({1, 1}, {-8}, 4), NumericError);
  EXPECT_NO_THROW(IntTensor({1, 1}, {-8}, IntFormat{4, true}));
  EXPECT_NO_THROW(IntTensor({1, 2}, {-7, 7}, 4));
  EXPECT_THROW(IntTensor({1, 1}, {4}, 3), NumericError);
  EXPECT_NO_THROW(IntTensor({1, 1}, {-4}, IntFormat{3, true}));
}

TEST(Tensor, ScalarScalingCommutesWithMatmul) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor a = testing::random_tensor({5, 7}, rng), b = testing::random_tensor({7, 3}, rng);
    const double alpha = std::uniform_real_distribution<double>(-10, 10)(rng);
    EXPECT_LE(testing::rel_err(matmul(scaled(a, alpha), b), scaled(matmul(a, b), alpha)), 1e-12);
  }
}

TEST(Tensor, IntegersRoundTripThroughFp64) {
  std::mt19937_64 rng(3);
  const IntTensor a = testing::random_ints({16, 16}, 32, rng);
  const Tensor r = a.to_real();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(static_cast<std::int32_t>(r[i]), a[i]);
}

TEST(Tensor, FloatTensorAvailable) {
  BasicTensor<float> t({2, 2}, 1.5f);
  EXPECT_EQ(t(1, 1), 1.5f);
}

TEST(Norm, RmsConstantRow) {
  const Tensor y = rmsnorm(Tensor::from_rows({{2, 2, 2, 2}}), NormParams::rms({1, 1, 1, 1}));
  for (double v : y.data()) EXPECT_NEAR(v, 1.0, 1e-6);
}

TEST(Norm, RmsHandComputed) {
  const Tensor y = rmsnorm(Tensor::from_rows({{3, 4}}), NormParams::rms({1, 1}, 1e-12));
  EXPECT_NEAR(y[0], 3.0 / std::sqrt(12.5), 1e-12);
  EXPECT_NEAR(y[1], 4.0 / std::sqrt(12.5), 1e-12);
  EXPECT_NEAR(y[0], 0.8485, 1e-4);
  EXPECT_NEAR(y[1], 1.1314, 1e-4);
  const Tensor y2 = rmsnorm(Tensor::from_rows({{3, 4}}), NormParams::rms({2, 2}, 1e-12));
  EXPECT_DOUBLE_EQ(y2[0], 2 * y[0]);
  EXPECT_DOUBLE_EQ(y2[1], 2 * y[1]);
}

TEST(Norm, RmsOutputHasRmsOfConstantGamma) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor x = testing::random_tensor({3, 32}, rng, 5.0);
    const double g = std::uniform_real_distribution<double>(0.1, 3.0)(rng);
    const Tensor y = rmsnorm(x, NormParams::rms(std::vector<double>(32, g), 1e-12));
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double ss = 0.0;
      for (double v : y.row(r)) ss += v * v;
      EXPECT_NEAR(std::sqrt(ss / 32.0), g, 1e-9);
    }
  }
}

TEST(Norm, RmsRejectsWidthMismatch) {
  EXPECT_THROW(rmsnorm(Tensor({1, 3}), NormParams::rms({1, 1})), ShapeError);
}

TEST(Norm, LayerNormHandComputed) {
  const Tensor y = layernorm(Tensor::from_rows({{1, 3}}), NormParams::layer({1, 1}, {0, 0}, 1e-12));
  EXPECT_NEAR(y[0], -1.0, 1e-9);
  EXPECT_NEAR(y[1], 1.0, 1e-9);
  const Tensor z = layernorm(Tensor::from_rows({{1, 3}}), NormParams::layer({1, 1}, {5, 5}, 1e-12));
  EXPECT_NEAR(z[0], 4.0, 1e-9);
  EXPECT_NEAR(z[1], 6.0, 1e-9);
}

TEST(Norm, LayerNormMatchesTwoPassReference) {
  std::mt19937_64 rng(5);
  const std::size_t n = 24;
  const Tensor x = testing::random_tensor({6, n}, rng, 3.0);
  const auto gamma = testing::random_positive(n, rng);
  std::vector<double> beta(n);
  for (double& b : beta) b = std::normal_distribution<double>(0, 1)(rng);
  const Tensor y = layernorm(x, NormParams::layer(gamma, beta));
  for (std::size_t r = 0; r < x.rows(); ++r) {
    long double mean = 0;
    for (std::size_t k = 0; k < n; ++k) mean += x(r, k);
    mean /= n;
    long double var = 0;
    for (std::size_t k = 0; k < n; ++k) var += (x(r, k) - mean) * (x(r, k) - mean);
    var /= n;
    for (std::size_t k = 0; k < n; ++k) {
      const long double ref = (x(r, k) - mean) / std::sqrt(var + 1e-6L) * gamma[k] + beta[k];
      EXPECT_NEAR(y(r, k), static_cast<double>(ref), 1e-12);
    }
  }
}

TEST(Norm, LayerNormRequiresBeta) {
  NormParams p = NormParams::rms({1, 1});
  p.kind = NormKind::LayerNorm;
  EXPECT_THROW(layernorm(Tensor({1, 2}), p), ConfigError);
  EXPECT_THROW(rmsnorm(Tensor({1, 2}), NormParams::layer({1, 1}, {0, 0})), ConfigError);
}

TEST(Tensor, RoundingIsHalfToEven) {
  EXPECT_EQ(round_half_even(0.5), 0.0);
  EXPECT_EQ(round_half_even(1.5), 2.0);
  EXPECT_EQ(round_half_even(2.5), 2.0);
  EXPECT_EQ(round_half_even(-2.5), -2.0);
  EXPECT_EQ(round_half_even(3.49), 3.0);
}

}  // namespace
}  // namespace mq
