// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Dense row-major tensors and the numeric primitives the quantization
// pipeline is built on: matmul (real and simulated integer), RMSNorm and
// LayerNorm. Everything here is a pure function over immutable values.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mergequant/error.hpp"

namespace mq {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Round half to even. Relies on the default FE_TONEAREST rounding mode.
inline double round_half_even(double v) noexcept { return std::nearbyint(v); }

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("payload length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
  }

  /// Rank-2 tensor from nested rows; all rows must have equal length.
  static BasicTensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    std::vector<T> flat;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw ShapeError("ragged rows");
      flat.insert(flat.end(), r.begin(), r.end());
    }
    return BasicTensor({rows.size(), cols}, std::move(flat));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t i) const {
    if (i >= shape_.size()) throw ShapeError("dim index out of range");
    return shape_[i];
  }

  /// Length of the last axis.
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
  /// Product of all leading axes (rows of the flattened 2-D view).
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : data_.size() / cols(); }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  std::span<const T> row(std::size_t r) const { return std::span<const T>(data_).subspan(r * cols(), cols()); }
  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  BasicTensor reshaped(Shape shape) const {
    return BasicTensor(std::move(shape), data_);
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  void check_shape() const {
    for (auto d : shape_)
      if (d == 0) throw ShapeError("shape dimensions must be positive: " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<double>;

/// Signed integer grid of a given bit-width. The extended grid adds the
/// most negative code used by zero-point (asymmetric) storage.
struct IntFormat {
  int bits = 4;
  bool extended = false;

  std::int64_t hi() const noexcept { return (std::int64_t{1} << (bits - 1)) - 1; }
  std::int64_t lo() const noexcept { return extended ? -hi() - 1 : -hi(); }

  void validate() const {
    if (bits < 2 || bits > 32) throw ConfigError("integer bit-width must be in [2, 32], got " + std::to_string(bits));
  }
  friend bool operator==(const IntFormat&, const IntFormat&) = default;
};

/// Integer tensor whose payload is checked against its declared grid.
class IntTensor {
 public:
  IntTensor() = default;

  IntTensor(Shape shape, std::vector<std::int32_t> data, IntFormat fmt)
      : values_(std::move(shape), std::move(data)), fmt_(fmt) {
    fmt_.validate();
    for (auto v : values_.data())
      if (v < fmt_.lo() || v > fmt_.hi())
        throw NumericError("integer value " + std::to_string(v) + " outside " + std::to_string(fmt_.bits) +
                           "-bit range");
  }

  IntTensor(Shape shape, std::vector<std::int32_t> data, int bits) : IntTensor(std::move(shape), std::move(data), IntFormat{bits, false}) {}

  const Shape& shape() const noexcept { return values_.shape(); }
  std::size_t rank() const noexcept { return values_.rank(); }
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t rows() const noexcept { return values_.rows(); }
  std::size_t cols() const noexcept { return values_.cols(); }
  std::span<const std::int32_t> data() const noexcept { return values_.data(); }
  std::span<const std::int32_t> row(std::size_t r) const { return values_.row(r); }
  std::int32_t operator()(std::size_t r, std::size_t c) const noexcept { return values_(r, c); }
  std::int32_t operator[](std::size_t i) const noexcept { return values_[i]; }
  const IntFormat& format() const noexcept { return fmt_; }
  int bits() const noexcept { return fmt_.bits; }

  /// Exact widening to fp64 (all magnitudes are below 2^53).
  Tensor to_real() const {
    std::vector<double> out(values_.data().begin(), values_.data().end());
    return Tensor(shape(), std::move(out));
  }

  friend bool operator==(const IntTensor&, const IntTensor&) = default;

 private:
  BasicTensor<std::int32_t> values_;
  IntFormat fmt_{};
};

// ---------------------------------------------------------------------------
// matmul

namespace detail {

inline Shape matmul_shape(const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() != 2)
    throw ShapeError("matmul expects a rank>=2 left operand and rank-2 right operand, got " + shape_str(a) + " x " +
                     shape_str(b));
  if (a.back() != b.front()) throw ShapeError("matmul inner dimensions differ: " + shape_str(a) + " x " + shape_str(b));
  Shape out(a.begin(), a.end() - 1);
  out.push_back(b.back());
  return out;
}

}  // namespace detail

/// Real product. Leading axes of `a` are treated as rows.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor out(detail::matmul_shape(a.shape(), b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out.data()[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = &b.data()[p * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

/// Integer product with a 32-bit accumulator. Every partial sum is checked;
/// overflow means the bit-width or reduction length is too large to simulate.
inline IntTensor matmul(const IntTensor& a, const IntTensor& b) {
  Shape shape = detail::matmul_shape(a.shape(), b.shape());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  constexpr std::int64_t kMax = std::numeric_limits<std::int32_t>::max();
  constexpr std::int64_t kMin = -kMax;
  std::vector<std::int32_t> out(m * n);
  std::vector<std::int64_t> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0);
    for (std::size_t p = 0; p < k; ++p) {
      const std::int64_t av = a[i * k + p];
      if (av == 0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        acc[j] += av * static_cast<std::int64_t>(b[p * n + j]);
        if (acc[j] > kMax || acc[j] < kMin)
          throw NumericError("int32 accumulator overflow in integer matmul (reduction length " + std::to_string(k) +
                             ")");
      }
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<std::int32_t>(acc[j]);
  }
  return IntTensor(std::move(shape), std::move(out), IntFormat{32, false});
}

Tensor matmul(const Tensor&, const IntTensor&) = delete;
Tensor matmul(const IntTensor&, const Tensor&) = delete;

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2");
  Tensor out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline Tensor scaled(const Tensor& a, double alpha) {
  Tensor out = a;
  for (auto& v : out.data()) v *= alpha;
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scaled(b, -1.0)); }

inline double sum_squares(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

inline double frobenius(const Tensor& a) { return std::sqrt(sum_squares(a.data())); }

inline double squared_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("squared_error: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double mse(const Tensor& a, const Tensor& b) { return squared_error(a, b) / static_cast<double>(a.size()); }

/// ||a - ref||_F / ||ref||_F (absolute error when ref is zero).
inline double relative_error(const Tensor& a, const Tensor& ref) {
  const double num = std::sqrt(squared_error(a, ref));
  const double den = frobenius(ref);
  return den == 0.0 ? num : num / den;
}

// ---------------------------------------------------------------------------
// normalization

enum class NormKind { RMSNorm, LayerNorm };

struct NormParams {
  std::vector<double> gamma;
  std::optional<std::vector<double>> beta;
  NormKind kind = NormKind::RMSNorm;
  double epsilon = 1e-6;

  static NormParams rms(std::vector<double> gamma, double eps = 1e-6) {
    return NormParams{std::move(gamma), std::nullopt, NormKind::RMSNorm, eps};
  }
  static NormParams layer(std::vector<double> gamma, std::vector<double> beta, double eps = 1e-6) {
    return NormParams{std::move(gamma), std::move(beta), NormKind::LayerNorm, eps};
  }

  std::size_t dim() const noexcept { return gamma.size(); }

  void validate() const {
    if (gamma.empty()) throw ShapeError("norm gamma is empty");
    if (!(epsilon > 0.0)) throw ConfigError("norm epsilon must be positive");
    if (kind == NormKind::LayerNorm) {
      if (!beta) throw ConfigError("LayerNorm requires beta");
      if (beta->size() != gamma.size()) throw ShapeError("LayerNorm beta length differs from gamma");
    } else if (beta) {
      throw ConfigError("RMSNorm does not take beta");
    }
  }
};

/// Normalizes each row of x without the affine multiplier/adder:
/// x / RMS(x) for RMSNorm, (x - mean) / std for LayerNorm.
inline Tensor normalize_rows(const Tensor& x, NormKind kind, double eps) {
  Tensor out = x;
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = out.row(r);
    double mean = 0.0;
    if (kind == NormKind::LayerNorm) {
      for (double v : row) mean += v;
      mean /= static_cast<double>(n);
    }
    double ss = 0.0;
    for (double v : row) ss += (v - mean) * (v - mean);
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    for (double& v : row) v = (v - mean) * inv;
  }
  return out;
}

inline Tensor rmsnorm(const Tensor& x, const NormParams& p) {
  p.validate();
  if (p.kind != NormKind::RMSNorm) throw ConfigError("rmsnorm called with LayerNorm parameters");
  if (x.cols() != p.dim()) throw ShapeError("rmsnorm: last dim " + std::to_string(x.cols()) + " != gamma length " + std::to_string(p.dim()));
  Tensor out = normalize_rows(x, NormKind::RMSNorm, p.epsilon);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t k = 0; k < row.size(); ++k) row[k] *= p.gamma[k];
  }
  return out;
}

inline Tensor layernorm(const Tensor& x, const NormParams& p) {
  if (p.kind != NormKind::LayerNorm || !p.beta) throw ConfigError("layernorm requires LayerNorm parameters with beta");
  p.validate();
  if (x.cols() != p.dim()) throw ShapeError("layernorm: last dim does not match gamma length");
  Tensor out = normalize_rows(x, NormKind::LayerNorm, p.epsilon);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t k = 0; k < row.size(); ++k) row[k] = row[k] * p.gamma[k] + (*p.beta)[k];
  }
  return out;
}

inline Tensor apply_norm(const Tensor& x, const NormParams& p) {
  return p.kind == NormKind::RMSNorm ? rmsnorm(x, p) : layernorm(x, p);
}

}  // namespace mq
