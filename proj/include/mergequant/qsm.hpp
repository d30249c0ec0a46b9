// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Quantization step migration.
//
// Quant side: the per-channel activation step s_k is divided into the norm
// multiplier (and adder), so the norm emits integers directly:
//     X~_k = round(normalize(X)_k * gamma_k / s_k)
// DeQuant side: s_k is multiplied into input row k of the next weight, so the
// integer GEMM against (s_k * W_k)^Int needs only the usual per-output-channel
// rescale:
//     Y_ij = s'_j * sum_k X~_ik (s_k W_kj)^Int

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "mergequant/error.hpp"
#include "mergequant/quantizer.hpp"
#include "mergequant/tensor.hpp"

namespace mq {

/// Counts of the elementwise quantization work a forward path performed.
struct StageCounts {
  std::size_t roundings = 0;          ///< activation elements rounded to the grid
  std::size_t quantize_passes = 0;    ///< explicit quantize (x / s) passes
  std::size_t dequantize_passes = 0;  ///< explicit dequantize (q * s) passes over activations
  std::size_t integer_gemms = 0;
};

/// A norm whose multiplier/adder absorbed the activation quantization step.
/// Slots may be a gathered (dimension-reconstructed) view of the channels.
struct FoldedNorm {
  NormParams base;
  std::vector<double> folded_gamma;               ///< per slot: gamma_src / s_src
  std::optional<std::vector<double>> folded_beta; ///< per slot: beta_src / s_src (LayerNorm)
  std::vector<double> scales;                     ///< per slot activation step s_src
  std::vector<std::size_t> gather;                ///< slot -> source channel; empty is identity

  std::size_t slots() const noexcept { return folded_gamma.size(); }
  std::size_t source_channel(std::size_t slot) const noexcept { return gather.empty() ? slot : gather[slot]; }
};

inline FoldedNorm fold_quant_into_norm(const NormParams& p, std::span<const double> scales) {
  p.validate();
  if (scales.size() != p.dim())
    throw ShapeError("fold_quant_into_norm: " + std::to_string(scales.size()) + " scales for a norm of width " +
                     std::to_string(p.dim()));
  FoldedNorm f;
  f.base = p;
  f.scales.assign(scales.begin(), scales.end());
  f.folded_gamma.resize(p.dim());
  for (std::size_t k = 0; k < p.dim(); ++k) {
    if (!(scales[k] > 0.0) || !std::isfinite(scales[k])) throw ConfigError("fold_quant_into_norm: scales must be positive");
    f.folded_gamma[k] = p.gamma[k] / scales[k];
  }
  if (p.kind == NormKind::LayerNorm) {
    std::vector<double> b(p.dim());
    for (std::size_t k = 0; k < p.dim(); ++k) b[k] = (*p.beta)[k] / scales[k];
    f.folded_beta = std::move(b);
  }
  return f;
}

/// Norm forward emitting per-channel integers: one rounding per slot element,
/// no separate quantize pass.
inline QuantizedTensor folded_norm_forward(const Tensor& x, const FoldedNorm& f, int bits, StageCounts* counts = nullptr) {
  if (x.cols() != f.base.dim())
    throw ShapeError("folded_norm_forward: input width " + std::to_string(x.cols()) + " != norm width " +
                     std::to_string(f.base.dim()));
  const IntFormat fmt{bits, false};
  fmt.validate();
  const Tensor xhat = normalize_rows(x, f.base.kind, f.base.epsilon);
  const std::size_t slots = f.slots(), rows = x.rows();
  std::vector<std::int32_t> ints(rows * slots);
  const double lo = static_cast<double>(fmt.lo()), hi = static_cast<double>(fmt.hi());
  for (std::size_t r = 0; r < rows; ++r) {
    auto src = xhat.row(r);
    for (std::size_t i = 0; i < slots; ++i) {
      double v = src[f.source_channel(i)] * f.folded_gamma[i];
      if (f.folded_beta) v += (*f.folded_beta)[i];
      ints[r * slots + i] = static_cast<std::int32_t>(std::clamp(round_half_even(v), lo, hi));
    }
  }
  if (counts) counts->roundings += rows * slots;
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  shape.push_back(slots);
  QuantizedTensor q;
  q.ints = IntTensor(std::move(shape), std::move(ints), fmt);
  q.scales = f.scales;
  q.granularity = Granularity::PerChannel;
  return q;
}

/// W'_kj = s_k * W_kj.
inline Tensor migrate_rows(const Tensor& w, std::span<const double> row_scales) {
  if (w.rank() != 2 || w.dim(0) != row_scales.size())
    throw ShapeError("dequantization migration: " + std::to_string(row_scales.size()) + " row scales for weight " +
                     shape_str(w.shape()));
  Tensor out = w;
  for (std::size_t k = 0; k < w.dim(0); ++k)
    for (double& v : out.row(k)) v *= row_scales[k];
  return out;
}

inline QuantizedLinear fold_dequant_into_weights(const Tensor& w, std::span<const double> scales,
                                                 const WeightQuantConfig& cfg) {
  QuantizedLinear q = quantize_weights(migrate_rows(w, scales), cfg);
  q.folded_row_scales.assign(scales.begin(), scales.end());
  return q;
}

/// Linear layer on folded-norm integers: the activation steps already live in
/// the weight rows, so the external activation scale is 1.
inline Tensor folded_linear(const QuantizedTensor& x, const QuantizedLinear& w, Accumulator mode = Accumulator::Int32,
                            StageCounts* counts = nullptr) {
  QuantizedTensor unit{x.ints, {1.0}, Granularity::PerTensor, {}};
  if (counts) ++counts->integer_gemms;
  return quantized_linear(unit, w, mode);
}

}  // namespace mq
