// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Scale calibration, quantize/dequantize, and simulated integer linear layers.
//
// Symmetric quantization uses the grid [-(2^(b-1)-1), 2^(b-1)-1] with
// s = max|x| / (2^(b-1)-1). Asymmetric (zero-point) storage uses the
// extended grid [-2^(b-1), 2^(b-1)-1] with s = (max - min) / (2^b - 1).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mergequant/error.hpp"
#include "mergequant/hadamard.hpp"
#include "mergequant/tensor.hpp"

namespace mq {

/// Scale assigned to channels that never saw a nonzero value.
inline constexpr double kScaleFloor = 1e-8;

inline std::int64_t qmax(int bits) { return (std::int64_t{1} << (bits - 1)) - 1; }

enum class Granularity { PerTensor, PerToken, PerChannel, PerGroup };
enum class CalibrationMode { Static, Dynamic };

inline const char* to_string(Granularity g) {
  switch (g) {
    case Granularity::PerTensor: return "per_tensor";
    case Granularity::PerToken: return "per_token";
    case Granularity::PerChannel: return "per_channel";
    case Granularity::PerGroup: return "per_group";
  }
  return "?";
}

struct QuantScheme {
  int bits = 4;
  bool symmetric = true;
  Granularity granularity = Granularity::PerChannel;
  std::size_t group_size = 0;  ///< PerGroup only
  CalibrationMode mode = CalibrationMode::Static;

  IntFormat format() const { return IntFormat{bits, !symmetric}; }

  /// `grouped_dim` is the length of the axis groups are carved from, when known.
  void validate(bool for_weights, std::optional<std::size_t> grouped_dim = std::nullopt) const {
    format().validate();
    if (granularity == Granularity::PerGroup) {
      if (!for_weights) throw ConfigError("per-group granularity is only defined for weights");
      if (group_size == 0) throw ConfigError("per-group granularity needs a positive group size");
      if (grouped_dim && *grouped_dim % group_size != 0)
        throw ConfigError("group size " + std::to_string(group_size) + " does not divide " + std::to_string(*grouped_dim));
    }
  }
};

// ---------------------------------------------------------------------------
// calibration

/// Running min/max statistics along one axis (or the whole tensor), plus the
/// optional Hessian diagonal sum_t x_t * x_t over tokens for channel stats.
struct CalibrationStats {
  std::optional<std::size_t> axis;  ///< nullopt: one statistic for the whole tensor
  std::vector<double> max_abs;
  std::vector<double> min;
  std::vector<double> max;
  std::vector<double> hessian_diag;
  std::size_t sample_count = 0;

  std::size_t length() const noexcept { return max_abs.size(); }

  void observe(const Tensor& x, bool with_hessian = false) {
    if (x.empty()) throw DataError("calibration sample is empty");
    std::size_t len = 1, stride = 1, dimlen = 1;
    if (axis) {
      if (*axis >= x.rank())
        throw ShapeError("calibration axis " + std::to_string(*axis) + " out of range for rank " + std::to_string(x.rank()));
      dimlen = len = x.shape()[*axis];
      for (std::size_t d = *axis + 1; d < x.rank(); ++d) stride *= x.shape()[d];
    }
    if (sample_count == 0 && max_abs.empty()) {
      max_abs.assign(len, 0.0);
      min.assign(len, std::numeric_limits<double>::infinity());
      max.assign(len, -std::numeric_limits<double>::infinity());
    } else if (max_abs.size() != len) {
      throw ShapeError("calibration samples disagree on the calibrated axis length (" + std::to_string(max_abs.size()) +
                       " vs " + std::to_string(len) + ")");
    }
    const auto data = x.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const std::size_t k = axis ? (i / stride) % dimlen : 0;
      const double v = data[i];
      if (!std::isfinite(v)) throw NumericError("non-finite value in calibration sample");
      max_abs[k] = std::max(max_abs[k], std::abs(v));
      min[k] = std::min(min[k], v);
      max[k] = std::max(max[k], v);
    }
    if (with_hessian) {
      if (!axis || *axis + 1 != x.rank()) throw ConfigError("Hessian diagonal requires channel (last-axis) calibration");
      if (hessian_diag.empty()) hessian_diag.assign(len, 0.0);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        for (std::size_t k = 0; k < len; ++k) hessian_diag[k] += row[k] * row[k];
      }
    }
    ++sample_count;
  }

  /// Combines shard statistics; equals observing the union of both shards.
  void merge(const CalibrationStats& other) {
    if (other.sample_count == 0) return;
    if (sample_count == 0) {
      *this = other;
      return;
    }
    if (axis != other.axis || max_abs.size() != other.max_abs.size())
      throw ShapeError("cannot merge calibration stats of different axes or lengths");
    for (std::size_t k = 0; k < max_abs.size(); ++k) {
      max_abs[k] = std::max(max_abs[k], other.max_abs[k]);
      min[k] = std::min(min[k], other.min[k]);
      max[k] = std::max(max[k], other.max[k]);
    }
    if (!other.hessian_diag.empty()) {
      if (hessian_diag.empty()) hessian_diag.assign(other.hessian_diag.size(), 0.0);
      for (std::size_t k = 0; k < hessian_diag.size(); ++k) hessian_diag[k] += other.hessian_diag[k];
    }
    sample_count += other.sample_count;
  }
};

/// Axis helpers for the common layouts ([..., tokens, channels]).
inline std::optional<std::size_t> axis_for(Granularity g, std::size_t rank) {
  switch (g) {
    case Granularity::PerTensor: return std::nullopt;
    case Granularity::PerChannel: return rank - 1;
    case Granularity::PerToken:
      if (rank < 2) throw ShapeError("per-token calibration needs rank >= 2");
      return rank - 2;
    case Granularity::PerGroup: break;
  }
  throw ConfigError("per-group granularity is not calibrated on activations");
}

inline CalibrationStats calibrate(std::span<const Tensor> samples, std::optional<std::size_t> axis,
                                  bool with_hessian = false) {
  if (samples.empty()) throw DataError("calibration stream is empty");
  CalibrationStats stats;
  stats.axis = axis;
  for (const auto& s : samples) stats.observe(s, with_hessian);
  return stats;
}

inline CalibrationStats calibrate(std::span<const Tensor> samples, Granularity g, bool with_hessian = false) {
  if (samples.empty()) throw DataError("calibration stream is empty");
  return calibrate(samples, axis_for(g, samples.front().rank()), with_hessian);
}

/// s_k = max_abs_k / (2^(b-1) - 1), floored at kScaleFloor for dead channels.
inline std::vector<double> make_scales(std::span<const double> max_abs, int bits) {
  if (bits < 2) throw ConfigError("bit-width must be at least 2");
  const double q = static_cast<double>(qmax(bits));
  std::vector<double> s(max_abs.size());
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (!std::isfinite(max_abs[k])) throw NumericError("non-finite max-abs statistic");
    s[k] = max_abs[k] > 0.0 ? max_abs[k] / q : kScaleFloor;
  }
  return s;
}

inline std::vector<double> make_scales(const CalibrationStats& stats, int bits) { return make_scales(stats.max_abs, bits); }

struct AffineParams {
  std::vector<double> scales;
  std::vector<std::int32_t> zero_points;
};

/// Min/max affine mapping onto the extended b-bit grid.
inline AffineParams make_affine(std::span<const double> mins, std::span<const double> maxs, int bits) {
  if (mins.size() != maxs.size()) throw ShapeError("min/max length mismatch");
  IntFormat fmt{bits, true};
  fmt.validate();
  const double levels = static_cast<double>((std::int64_t{1} << bits) - 1);
  AffineParams p;
  p.scales.resize(mins.size());
  p.zero_points.resize(mins.size());
  for (std::size_t k = 0; k < mins.size(); ++k) {
    const double lo = std::min(mins[k], 0.0), hi = std::max(maxs[k], 0.0);
    const double s = hi > lo ? (hi - lo) / levels : kScaleFloor;
    const double zp = static_cast<double>(fmt.lo()) - round_half_even(lo / s);
    p.scales[k] = s;
    p.zero_points[k] = static_cast<std::int32_t>(std::clamp(zp, static_cast<double>(fmt.lo()), static_cast<double>(fmt.hi())));
  }
  return p;
}

// ---------------------------------------------------------------------------
// quantize / dequantize

struct QuantizedTensor {
  IntTensor ints;
  std::vector<double> scales;
  Granularity granularity = Granularity::PerTensor;
  std::vector<std::int32_t> zero_points;  ///< empty when symmetric

  std::size_t scale_index(std::size_t flat) const {
    switch (granularity) {
      case Granularity::PerTensor: return 0;
      case Granularity::PerToken: return flat / ints.cols();
      case Granularity::PerChannel: return flat % ints.cols();
      case Granularity::PerGroup: break;
    }
    throw ConfigError("per-group activations are not supported");
  }
};

namespace detail {

inline std::size_t expected_scale_count(Granularity g, const Shape& shape, std::size_t rows, std::size_t cols) {
  (void)shape;
  switch (g) {
    case Granularity::PerTensor: return 1;
    case Granularity::PerToken: return rows;
    case Granularity::PerChannel: return cols;
    case Granularity::PerGroup: break;
  }
  throw ConfigError("per-group granularity is only defined for weights");
}

inline std::int32_t quantize_value(double x, double s, std::int32_t zp, const IntFormat& fmt) {
  const double q = round_half_even(x / s) + zp;
  return static_cast<std::int32_t>(std::clamp(q, static_cast<double>(fmt.lo()), static_cast<double>(fmt.hi())));
}

}  // namespace detail

inline QuantizedTensor quantize(const Tensor& x, std::span<const double> scales, const QuantScheme& scheme,
                                std::span<const std::int32_t> zero_points = {}) {
  scheme.validate(false);
  const std::size_t want = detail::expected_scale_count(scheme.granularity, x.shape(), x.rows(), x.cols());
  if (scales.size() != want)
    throw ShapeError(std::string(to_string(scheme.granularity)) + " quantization expects " + std::to_string(want) +
                     " scales, got " + std::to_string(scales.size()));
  for (double s : scales)
    if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("quantization scales must be positive and finite");
  if (!scheme.symmetric && zero_points.size() != want) throw ShapeError("asymmetric quantization needs one zero-point per scale");
  if (scheme.symmetric && !zero_points.empty()) throw ConfigError("symmetric quantization takes no zero-points");

  QuantizedTensor q;
  q.granularity = scheme.granularity;
  q.scales.assign(scales.begin(), scales.end());
  q.zero_points.assign(zero_points.begin(), zero_points.end());
  const IntFormat fmt = scheme.format();
  std::vector<std::int32_t> ints(x.size());
  const std::size_t cols = x.cols();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t si = scheme.granularity == Granularity::PerTensor ? 0
                           : scheme.granularity == Granularity::PerToken ? i / cols
                                                                         : i % cols;
    ints[i] = detail::quantize_value(x[i], scales[si], q.zero_points.empty() ? 0 : q.zero_points[si], fmt);
  }
  q.ints = IntTensor(x.shape(), std::move(ints), fmt);
  return q;
}

inline Tensor dequantize(const QuantizedTensor& q) {
  Tensor out(q.ints.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t si = q.scale_index(i);
    const std::int32_t zp = q.zero_points.empty() ? 0 : q.zero_points[si];
    out[i] = static_cast<double>(static_cast<std::int64_t>(q.ints[i]) - zp) * q.scales[si];
  }
  return out;
}

/// Per-token dynamic quantization: s_t = ratio * max|x_t| / (2^(b-1)-1).
inline QuantizedTensor quantize_per_token_dynamic(const Tensor& x, int bits, double clip_ratio = 1.0) {
  if (!(clip_ratio > 0.0 && clip_ratio <= 1.0)) throw ConfigError("clip ratio must lie in (0, 1]");
  std::vector<double> maxabs(x.rows(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (double v : x.row(r)) maxabs[r] = std::max(maxabs[r], std::abs(v));
  for (double& m : maxabs) m *= clip_ratio;
  QuantScheme scheme{bits, true, Granularity::PerToken, 0, CalibrationMode::Dynamic};
  return quantize(x, make_scales(maxabs, bits), scheme);
}

// ---------------------------------------------------------------------------
// weights

struct WeightQuantConfig {
  int bits = 4;
  bool symmetric = true;
  std::size_t group_size = 0;  ///< 0: one scale per output channel
};

/// Integer weight (n_in x n_out) with per-output-channel (or per-group)
/// dequantization scales. When produced by dequantization migration,
/// `folded_row_scales` records the per-input-row activation scales that were
/// multiplied into the real weight before rounding.
struct QuantizedLinear {
  IntTensor w_int;
  std::vector<double> w_scales;            ///< groups x n_out, row-major
  std::vector<std::int32_t> zero_points;   ///< same layout; empty when symmetric
  std::size_t group_size = 0;              ///< input rows per group (== n_in when ungrouped)
  std::vector<double> folded_row_scales;   ///< length n_in, or empty
  std::vector<double> bias;                ///< length n_out, or empty

  std::size_t in_features() const noexcept { return w_int.shape().empty() ? 0 : w_int.shape()[0]; }
  std::size_t out_features() const noexcept { return w_int.cols(); }
  std::size_t groups() const noexcept { return group_size ? in_features() / group_size : 0; }

  /// Real weight represented by the integers: (w_int - zp) * scale.
  Tensor dequantized_weight() const {
    const std::size_t n = in_features(), j = out_features();
    Tensor w({n, j});
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t g = k / group_size;
      for (std::size_t c = 0; c < j; ++c) {
        const std::size_t si = g * j + c;
        const std::int64_t zp = zero_points.empty() ? 0 : zero_points[si];
        w(k, c) = static_cast<double>(w_int(k, c) - zp) * w_scales[si];
      }
    }
    return w;
  }
};

/// Round-to-nearest weight quantization along the output dimension
/// (optionally per group of input rows, optionally with zero-points).
inline QuantizedLinear quantize_weights(const Tensor& w, const WeightQuantConfig& cfg) {
  if (w.rank() != 2) throw ShapeError("weights must be rank 2 (n_in x n_out)");
  const std::size_t n = w.dim(0), j = w.dim(1);
  const std::size_t g = cfg.group_size == 0 ? n : cfg.group_size;
  if (n % g != 0) throw ConfigError("group size " + std::to_string(g) + " does not divide input dimension " + std::to_string(n));
  const IntFormat fmt{cfg.bits, !cfg.symmetric};
  fmt.validate();
  const std::size_t groups = n / g;

  QuantizedLinear q;
  q.group_size = g;
  q.w_scales.resize(groups * j);
  if (!cfg.symmetric) q.zero_points.resize(groups * j);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    for (std::size_t c = 0; c < j; ++c) {
      double mx = -std::numeric_limits<double>::infinity(), mn = std::numeric_limits<double>::infinity(), ma = 0.0;
      for (std::size_t k = gi * g; k < (gi + 1) * g; ++k) {
        mx = std::max(mx, w(k, c));
        mn = std::min(mn, w(k, c));
        ma = std::max(ma, std::abs(w(k, c)));
      }
      if (cfg.symmetric) {
        q.w_scales[gi * j + c] = make_scales(std::span<const double>(&ma, 1), cfg.bits)[0];
      } else {
        auto a = make_affine(std::span<const double>(&mn, 1), std::span<const double>(&mx, 1), cfg.bits);
        q.w_scales[gi * j + c] = a.scales[0];
        q.zero_points[gi * j + c] = a.zero_points[0];
      }
    }
  }
  std::vector<std::int32_t> ints(n * j);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t c = 0; c < j; ++c) {
      const std::size_t si = (k / g) * j + c;
      ints[k * j + c] = detail::quantize_value(w(k, c), q.w_scales[si], cfg.symmetric ? 0 : q.zero_points[si], fmt);
    }
  q.w_int = IntTensor({n, j}, std::move(ints), fmt);
  return q;
}

// ---------------------------------------------------------------------------
// integer linear layers

/// Accumulator used by the simulated integer GEMM. Int32 mirrors real INT4/INT8
/// kernels and fails loudly on overflow; Float64 is for wide grids (b > 16)
/// whose products cannot fit any 32-bit accumulator.
enum class Accumulator { Int32, Float64 };

inline Accumulator accumulator_for(int act_bits, int weight_bits) {
  return act_bits <= 16 && weight_bits <= 16 ? Accumulator::Int32 : Accumulator::Float64;
}

namespace detail {

/// acc[i][c] = sum_{k in [k0,k1)} xa[i][k] * wb[k][c], integers offset by zero-points.
inline void integer_block(const QuantizedTensor& x, const QuantizedLinear& w, std::size_t k0, std::size_t k1,
                          std::size_t group, Accumulator mode, std::vector<double>& acc) {
  const std::size_t m = x.ints.rows(), n = x.ints.cols(), j = w.out_features();
  constexpr std::int64_t kMax = std::numeric_limits<std::int32_t>::max();
  std::vector<std::int64_t> iacc(j);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(iacc.begin(), iacc.end(), 0);
    double* out = &acc[i * j];
    std::fill(out, out + j, 0.0);
    for (std::size_t k = k0; k < k1; ++k) {
      std::int64_t xv = x.ints[i * n + k];
      if (!x.zero_points.empty()) xv -= x.zero_points[x.scale_index(i * n + k)];
      if (xv == 0) continue;
      for (std::size_t c = 0; c < j; ++c) {
        std::int64_t wv = w.w_int(k, c);
        if (!w.zero_points.empty()) wv -= w.zero_points[group * j + c];
        if (mode == Accumulator::Int32) {
          iacc[c] += xv * wv;
          if (iacc[c] > kMax || iacc[c] < -kMax)
            throw NumericError("int32 accumulator overflow in quantized linear (reduction length " +
                               std::to_string(k1 - k0) + ")");
        } else {
          out[c] += static_cast<double>(xv) * static_cast<double>(wv);
        }
      }
    }
    if (mode == Accumulator::Int32)
      for (std::size_t c = 0; c < j; ++c) out[c] = static_cast<double>(iacc[c]);
  }
}

}  // namespace detail

/// Simulated integer linear layer: integer GEMM, then one rescale by
/// s_X * s_W per output element. Activation scales must be extractable from
/// the reduction (per-tensor or per-token).
inline Tensor quantized_linear(const QuantizedTensor& x, const QuantizedLinear& w,
                               Accumulator mode = Accumulator::Int32) {
  if (x.granularity != Granularity::PerTensor && x.granularity != Granularity::PerToken)
    throw ConfigError(std::string("quantized_linear needs per-tensor or per-token activation scales, got ") +
                      to_string(x.granularity) + "; per-channel scales cannot leave the reduction");
  if (x.ints.cols() != w.in_features())
    throw ShapeError("quantized_linear: activation width " + std::to_string(x.ints.cols()) + " != weight input dim " +
                     std::to_string(w.in_features()));
  const std::size_t m = x.ints.rows(), j = w.out_features();
  Shape shape(x.ints.shape().begin(), x.ints.shape().end() - 1);
  shape.push_back(j);
  Tensor y(shape);
  std::vector<double> acc(m * j);
  for (std::size_t g = 0; g < w.groups(); ++g) {
    detail::integer_block(x, w, g * w.group_size, (g + 1) * w.group_size, g, mode, acc);
    for (std::size_t i = 0; i < m; ++i) {
      const double sx = x.scales[x.granularity == Granularity::PerTensor ? 0 : i];
      for (std::size_t c = 0; c < j; ++c) y[i * j + c] += acc[i * j + c] * (sx * w.w_scales[g * j + c]);
    }
  }
  if (!w.bias.empty())
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t c = 0; c < j; ++c) y[i * j + c] += w.bias[c];
  return y;
}

/// Literal per-channel reference: Y_ij = s^W_j * sum_k s^X_k X_ik W_kj.
/// Operands are real-valued grids so callers can pass unrounded weights.
inline Tensor per_channel_oracle(const Tensor& x_int, std::span<const double> x_scales, const Tensor& w_int,
                                 std::span<const double> w_scales) {
  if (w_int.rank() != 2 || x_int.cols() != w_int.dim(0)) throw ShapeError("per_channel_oracle: inner dimension mismatch");
  if (x_scales.size() != x_int.cols()) throw ShapeError("per_channel_oracle: need one activation scale per channel");
  if (w_scales.size() != w_int.cols()) throw ShapeError("per_channel_oracle: need one weight scale per output channel");
  const std::size_t m = x_int.rows(), n = x_int.cols(), j = w_int.cols();
  Shape shape(x_int.shape().begin(), x_int.shape().end() - 1);
  shape.push_back(j);
  Tensor y(shape);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t c = 0; c < j; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += x_scales[k] * x_int[i * n + k] * w_int(k, c);
      y[i * j + c] = w_scales[c] * acc;
    }
  return y;
}

inline Tensor per_channel_oracle(const QuantizedTensor& x, const QuantizedLinear& w) {
  if (x.granularity != Granularity::PerChannel) throw ConfigError("per_channel_oracle expects per-channel activation scales");
  if (!x.zero_points.empty() || !w.zero_points.empty()) throw ConfigError("per_channel_oracle is defined for symmetric grids");
  if (w.groups() != 1) throw ConfigError("per_channel_oracle expects per-output-channel weight scales");
  return per_channel_oracle(x.ints.to_real(), x.scales, w.w_int.to_real(), w.w_scales);
}

}  // namespace mq
