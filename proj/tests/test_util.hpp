// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "mergequant/tensor.hpp"

namespace mq::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> nd(0.0, stddev);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = nd(rng);
  return t;
}

inline std::vector<double> random_positive(std::size_t n, std::mt19937_64& rng, double lo = 0.1, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

inline IntTensor random_ints(Shape shape, int bits, std::mt19937_64& rng) {
  const auto hi = static_cast<std::int32_t>((std::int64_t{1} << (bits - 1)) - 1);
  std::uniform_int_distribution<std::int32_t> u(-hi, hi);
  std::vector<std::int32_t> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return IntTensor(std::move(shape), std::move(v), bits);
}

/// Overwrites `count` random elements with +-magnitude.
inline void inject_outliers(Tensor& x, std::size_t count, double magnitude, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pos(0, x.size() - 1);
  for (std::size_t i = 0; i < count; ++i) x[pos(rng)] = (rng() & 1) ? magnitude : -magnitude;
}

/// ||a - b|| / ||b||, computed independently of the library helper.
inline double rel_err(const Tensor& a, const Tensor& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return den == 0.0 ? std::sqrt(num) : std::sqrt(num / den);
}

/// Textbook triple-loop product.
inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

}  // namespace mq::testing
