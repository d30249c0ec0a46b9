// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>

#include "mergequant/error.hpp"
#include "mergequant/tensor.hpp"

namespace mq {

inline bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

/// In-place orthonormal fast Walsh-Hadamard transform (Sylvester ordering).
inline void fwht_inplace(std::span<double> v) {
  const std::size_t n = v.size();
  if (!is_power_of_two(n)) throw ShapeError("Hadamard dimension must be a power of two, got " + std::to_string(n));
  for (std::size_t h = 1; h < n; h <<= 1)
    for (std::size_t i = 0; i < n; i += h << 1)
      for (std::size_t j = i; j < i + h; ++j) {
        const double a = v[j], b = v[j + h];
        v[j] = a + b;
        v[j + h] = a - b;
      }
  const double norm = 1.0 / std::sqrt(static_cast<double>(n));
  for (double& x : v) x *= norm;
}

enum class RotationSide {
  Right,  ///< x -> x H, rotates the last axis (activations)
  Left,   ///< W -> H^T W, rotates the first axis of a rank-2 weight
};

/// Multiplies by the orthonormal Hadamard matrix H / sqrt(n). H is symmetric,
/// so rotating activations on the right and weights on the left preserves x W.
inline Tensor hadamard_rotate(const Tensor& t, RotationSide side) {
  Tensor out = t;
  if (side == RotationSide::Right) {
    if (!is_power_of_two(t.cols())) throw ShapeError("Hadamard dimension must be a power of two, got " + std::to_string(t.cols()));
    for (std::size_t r = 0; r < out.rows(); ++r) fwht_inplace(out.row(r));
    return out;
  }
  if (t.rank() != 2) throw ShapeError("left Hadamard rotation expects a rank-2 tensor");
  const std::size_t n = t.dim(0), m = t.dim(1);
  if (!is_power_of_two(n)) throw ShapeError("Hadamard dimension must be a power of two, got " + std::to_string(n));
  std::vector<double> col(n);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < n; ++i) col[i] = t(i, j);
    fwht_inplace(col);
    for (std::size_t i = 0; i < n; ++i) out(i, j) = col[i];
  }
  return out;
}

}  // namespace mq
