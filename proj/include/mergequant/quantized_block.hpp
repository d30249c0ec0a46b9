// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// A quantized toy block and its simulated forward/backward passes.
//
// qkv and gate/up inputs use static calibration: per-channel with the step
// folded into the norm (plus dimension reconstruction and clipping), or the
// per-tensor / per-token static baselines. out and down inputs always use
// per-token dynamic quantization with a layer clip ratio, optionally after a
// Hadamard rotation whose inverse is merged into the weight.
//
// Every linear stores its real pre-rounding weight (`base`) so that a
// low-rank adapter can be merged and re-quantized as q(base + A B).

#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mergequant/clip.hpp"
#include "mergequant/dimrec.hpp"
#include "mergequant/error.hpp"
#include "mergequant/hadamard.hpp"
#include "mergequant/mqt.hpp"
#include "mergequant/qsm.hpp"
#include "mergequant/quantizer.hpp"
#include "mergequant/tensor.hpp"
#include "mergequant/toymodel.hpp"

namespace mq {

enum class StaticCalibration { PerChannelFolded, PerTensor, PerToken };

inline const char* to_string(StaticCalibration k) {
  switch (k) {
    case StaticCalibration::PerChannelFolded: return "per_channel_static";
    case StaticCalibration::PerTensor: return "per_tensor_static";
    case StaticCalibration::PerToken: return "per_token_static";
  }
  return "?";
}

inline StaticCalibration static_calibration_from_string(const std::string& s) {
  if (s == "per_channel_static") return StaticCalibration::PerChannelFolded;
  if (s == "per_tensor_static") return StaticCalibration::PerTensor;
  if (s == "per_token_static") return StaticCalibration::PerToken;
  throw ConfigError("unknown static calibration '" + s + "'");
}

/// Low-rank compensation A (n_in x r) * B (r x n_out).
struct LoraPair {
  Tensor a;
  Tensor b;
  std::size_t rank = 0;
  bool empty() const noexcept { return rank == 0; }
};

struct QuantLayer {
  Tensor base;                  ///< real weight before rounding, in this layer's input layout
  QuantizedLinear weight;       ///< q(base + A B)
  std::optional<LoraPair> lora;
};

struct StaticInput {
  StaticCalibration kind = StaticCalibration::PerChannelFolded;
  FoldedNorm folded;            ///< per-channel: reconstructed folded norm
  NormParams norm;              ///< baselines: plain norm
  std::vector<double> scales;   ///< baselines: 1 (per tensor) or tokens (per token)
  ReconstructionPlan plan;
  ClipPlan clip;
};

/// out/down inputs. Per-token dynamic unless a static baseline replaced it.
struct DynamicInput {
  int bits = 4;
  double clip_ratio = 1.0;
  bool hadamard = false;
  ClipPlan clip;
  std::optional<StaticCalibration> static_kind;  ///< PerTensor or PerToken baseline
  std::vector<double> static_scales;
};

struct QuantizedBlock {
  ToyBlockConfig cfg;
  int act_bits = 4;
  WeightQuantConfig wcfg;
  StaticInput attn_in, ffn_in;
  DynamicInput out_in, down_in;
  QuantLayer qkv, out, gate, up, down;

  static constexpr std::array<const char*, 5> kLayerNames{"qkv", "out", "gate", "up", "down"};

  QuantLayer& layer(std::size_t i) { return *std::array<QuantLayer*, 5>{&qkv, &out, &gate, &up, &down}[i]; }
  const QuantLayer& layer(std::size_t i) const {
    return *std::array<const QuantLayer*, 5>{&qkv, &out, &gate, &up, &down}[i];
  }

  void validate() const {
    for (std::size_t i = 0; i < 5; ++i)
      if (layer(i).weight.w_int.size() == 0 || layer(i).base.empty())
        throw ConfigError(std::string("quantized block is missing artifacts for layer '") + kLayerNames[i] + "'");
    for (const StaticInput* s : {&attn_in, &ffn_in}) {
      if (s->kind == StaticCalibration::PerChannelFolded && s->folded.slots() == 0)
        throw ConfigError("quantized block is missing a folded norm");
      if (s->kind != StaticCalibration::PerChannelFolded && s->scales.empty())
        throw ConfigError("quantized block is missing static activation scales");
    }
  }
};

/// Re-quantizes every layer from base (+ A B when an adapter is attached).
inline void refresh_weights(QuantizedBlock& qb) {
  for (std::size_t i = 0; i < 5; ++i) {
    QuantLayer& l = qb.layer(i);
    Tensor w = l.base;
    if (l.lora && !l.lora->empty()) w = add(w, matmul(l.lora->a, l.lora->b));
    std::vector<double> folded = std::move(l.weight.folded_row_scales);
    l.weight = quantize_weights(w, qb.wcfg);
    l.weight.folded_row_scales = std::move(folded);
  }
}

// ---------------------------------------------------------------------------
// calibration and construction

inline Tensor vstack(std::span<const Tensor> parts) {
  if (parts.empty()) throw DataError("nothing to stack");
  const std::size_t cols = parts.front().cols();
  std::vector<double> flat;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("vstack: column mismatch");
    flat.insert(flat.end(), p.data().begin(), p.data().end());
  }
  const std::size_t rows = flat.size() / cols;
  return Tensor({rows, cols}, std::move(flat));
}

inline Tensor hstack(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) throw ShapeError("hstack: row mismatch");
  Tensor out({a.rows(), a.cols() + b.cols()});
  for (std::size_t r = 0; r < a.rows(); ++r) {
    std::copy(a.row(r).begin(), a.row(r).end(), out.row(r).begin());
    std::copy(b.row(r).begin(), b.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(a.cols()));
  }
  return out;
}

/// Statistics for every quantized activation of the block.
struct BlockCalibration {
  CalibrationStats attn_in_channel, ffn_in_channel;  ///< with Hessian diagonal
  CalibrationStats attn_in_token, ffn_in_token;
  CalibrationStats attn_in_tensor, ffn_in_tensor;
  CalibrationStats out_in_channel, down_in_channel;

  static constexpr std::array<const char*, 8> kNames{"attn_in.channel", "ffn_in.channel", "attn_in.token", "ffn_in.token",
                                                     "attn_in.tensor", "ffn_in.tensor", "out_in.channel", "down_in.channel"};
  std::array<CalibrationStats*, 8> all() {
    return {&attn_in_channel, &ffn_in_channel, &attn_in_token, &ffn_in_token,
            &attn_in_tensor, &ffn_in_tensor, &out_in_channel, &down_in_channel};
  }
  std::array<const CalibrationStats*, 8> all() const {
    return {&attn_in_channel, &ffn_in_channel, &attn_in_token, &ffn_in_token,
            &attn_in_tensor, &ffn_in_tensor, &out_in_channel, &down_in_channel};
  }
};

inline BlockCalibration calibrate_block(const ToyBlock& b, std::span<const Tensor> samples) {
  if (samples.empty()) throw DataError("calibration stream is empty");
  BlockCalibration c;
  c.attn_in_channel.axis = c.ffn_in_channel.axis = c.out_in_channel.axis = c.down_in_channel.axis = 1;
  c.attn_in_token.axis = c.ffn_in_token.axis = 0;
  for (const auto& x : samples) {
    const FpTrace tr = block_trace_fp(b, x);
    c.attn_in_channel.observe(tr.norm1, true);
    c.ffn_in_channel.observe(tr.norm2, true);
    c.attn_in_token.observe(tr.norm1);
    c.ffn_in_token.observe(tr.norm2);
    c.attn_in_tensor.observe(tr.norm1);
    c.ffn_in_tensor.observe(tr.norm2);
    c.out_in_channel.observe(tr.attn);
    c.down_in_channel.observe(tr.act);
  }
  return c;
}

inline void save_stats(TensorArchive& ar, const std::string& name, const CalibrationStats& s) {
  ar.put_vector(name + ".max_abs", s.max_abs);
  ar.put_vector(name + ".min", s.min);
  ar.put_vector(name + ".max", s.max);
  ar.put_vector(name + ".hessian_diag", s.hessian_diag);
}

inline CalibrationStats load_stats(const TensorArchive& ar, const std::string& name, std::optional<std::size_t> axis) {
  CalibrationStats s;
  s.axis = axis;
  s.max_abs = ar.vector(name + ".max_abs");
  s.min = ar.vector(name + ".min");
  s.max = ar.vector(name + ".max");
  if (ar.has_real(name + ".hessian_diag")) s.hessian_diag = ar.vector(name + ".hessian_diag");
  s.sample_count = ar.metadata().value("sample_count", std::size_t{0});
  return s;
}

inline void save_calibration_stats(TensorArchive& ar, const BlockCalibration& c) {
  auto all = c.all();
  for (std::size_t i = 0; i < all.size(); ++i) save_stats(ar, BlockCalibration::kNames[i], *all[i]);
  ar.metadata()["sample_count"] = c.attn_in_channel.sample_count;
}

inline BlockCalibration load_calibration_stats(const TensorArchive& ar) {
  BlockCalibration c;
  auto all = c.all();
  for (std::size_t i = 0; i < all.size(); ++i) {
    const std::string name = BlockCalibration::kNames[i];
    std::optional<std::size_t> axis;
    if (name.ends_with(".channel")) axis = 1;
    else if (name.ends_with(".token")) axis = 0;
    *all[i] = load_stats(ar, name, axis);
  }
  return c;
}

struct QuantizeOptions {
  int act_bits = 4;
  WeightQuantConfig weights{4, true, 0};
  double alpha = 5.0;
  StaticCalibration static_kind = StaticCalibration::PerChannelFolded;
  bool clip_static = true;
  bool clip_dynamic = true;
  std::vector<double> clip_grid = default_clip_grid();
  bool hadamard = false;
  int dynamic_bits = 0;     ///< out/down activation bits; 0 uses act_bits
  /// Baselines only: also calibrate out/down inputs statically at the
  /// baseline granularity instead of per-token dynamic.
  bool baseline_static_everywhere = true;
  bool reconstruct = true;  ///< dimension reconstruction on the folded path
};

namespace detail {

inline StaticInput build_static_input(const NormParams& norm, const CalibrationStats& channel,
                                      const CalibrationStats& token, const CalibrationStats& tensor,
                                      const Tensor& calib_inputs, const std::vector<const Tensor*>& consumers,
                                      std::vector<QuantLayer*> layers, const QuantizeOptions& o) {
  StaticInput in;
  in.kind = o.static_kind;
  if (o.static_kind != StaticCalibration::PerChannelFolded) {
    in.norm = norm;
    in.scales = make_scales(o.static_kind == StaticCalibration::PerTensor ? tensor : token, o.act_bits);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i]->base = *consumers[i];
      layers[i]->weight = quantize_weights(*consumers[i], o.weights);
    }
    return in;
  }
  std::vector<double> scales = make_scales(channel, o.act_bits);
  const double alpha = o.reconstruct ? o.alpha : std::numeric_limits<double>::infinity();
  if (o.clip_static) {
    Tensor wcat = *consumers[0];
    for (std::size_t i = 1; i < consumers.size(); ++i) wcat = hstack(wcat, *consumers[i]);
    in.clip = search_static_clips(calib_inputs, wcat, compute_threshold(scales, alpha), o.act_bits, o.weights.bits,
                                  o.clip_grid);
    std::vector<double> clipped(channel.max_abs.size());
    for (std::size_t k = 0; k < clipped.size(); ++k) clipped[k] = in.clip.per_channel_ratios[k] * channel.max_abs[k];
    scales = make_scales(clipped, o.act_bits);
  }
  in.plan = build_plan(scales, alpha, channel.hessian_diag);
  const FoldedNorm folded = fold_quant_into_norm(norm, scales);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto [nf, q] = reconstruct_norm_and_weights(folded, *consumers[i], in.plan, o.weights);
    in.folded = std::move(nf);
    layers[i]->base = reconstructed_migrated_weight(*consumers[i], in.plan);
    layers[i]->weight = std::move(q);
  }
  return in;
}

inline DynamicInput build_dynamic_input(std::span<const Tensor> calib_parts, const Tensor& w, QuantLayer& layer,
                                        const QuantizeOptions& o) {
  DynamicInput in;
  in.bits = o.dynamic_bits ? o.dynamic_bits : o.act_bits;
  IntFormat{in.bits, false}.validate();
  in.hadamard = o.hadamard;
  std::vector<Tensor> parts;
  for (const auto& t : calib_parts) parts.push_back(o.hadamard ? hadamard_rotate(t, RotationSide::Right) : t);
  const Tensor x = vstack(parts);
  layer.base = o.hadamard ? hadamard_rotate(w, RotationSide::Left) : w;
  layer.weight = quantize_weights(layer.base, o.weights);
  if (o.static_kind != StaticCalibration::PerChannelFolded && o.baseline_static_everywhere) {
    const bool tensor = o.static_kind == StaticCalibration::PerTensor;
    in.static_kind = o.static_kind;
    in.static_scales = make_scales(calibrate(parts, tensor ? std::nullopt : std::optional<std::size_t>{0}), in.bits);
    return in;
  }
  if (o.clip_dynamic) {
    in.clip = search_dynamic_clip(x, layer.base, in.bits, o.clip_grid);
    in.clip_ratio = *in.clip.layer_ratio;
  }
  return in;
}

}  // namespace detail

/// Builds every quantization artifact of the block from calibration stats and
/// the calibration inputs themselves (needed by the clipping searches).
inline QuantizedBlock build_quantized_block(const ToyBlock& b, const BlockCalibration& stats,
                                            std::span<const Tensor> calib, const QuantizeOptions& o) {
  if (calib.empty()) throw DataError("calibration stream is empty");
  if (!(o.alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
  QuantizedBlock qb;
  qb.cfg = b.cfg;
  qb.act_bits = o.act_bits;
  qb.wcfg = o.weights;
  std::vector<Tensor> n1, att, n2, act;
  for (const auto& x : calib) {
    FpTrace tr = block_trace_fp(b, x);
    n1.push_back(std::move(tr.norm1));
    att.push_back(std::move(tr.attn));
    n2.push_back(std::move(tr.norm2));
    act.push_back(std::move(tr.act));
  }
  qb.attn_in = detail::build_static_input(b.norm1, stats.attn_in_channel, stats.attn_in_token, stats.attn_in_tensor,
                                          vstack(n1), {&b.w_qkv}, {&qb.qkv}, o);
  qb.ffn_in = detail::build_static_input(b.norm2, stats.ffn_in_channel, stats.ffn_in_token, stats.ffn_in_tensor,
                                         vstack(n2), {&b.w_gate, &b.w_up}, {&qb.gate, &qb.up}, o);
  qb.out_in = detail::build_dynamic_input(att, b.w_out, qb.out, o);
  qb.down_in = detail::build_dynamic_input(act, b.w_down, qb.down, o);
  return qb;
}

// ---------------------------------------------------------------------------
// forward / backward

/// Integer: real quantizers and integer GEMMs. Identity: every quantizer is
/// the identity (used to check gradients against finite differences).
enum class QuantSim { Integer, Identity };

struct StaticCache {
  Tensor xhat;                 ///< normalized input (before multiplier)
  std::vector<double> inv_rms; ///< per token
  Tensor u;                    ///< effective GEMM input (integers, or dequantized values)
};

struct QuantForwardCache {
  std::array<Tensor, 5> w_eff;  ///< effective real weight of each layer
  StaticCache s1, s2;
  Tensor qkv;
  AttentionCache att;
  Tensor u_out;                 ///< effective out input
  Tensor gate, up;
  Tensor u_down;
  Tensor y;
};

namespace detail {

inline Tensor effective_weight(const QuantLayer& l, QuantSim sim) {
  if (sim == QuantSim::Integer) return l.weight.dequantized_weight();
  Tensor w = l.base;
  if (l.lora && !l.lora->empty()) w = add(w, matmul(l.lora->a, l.lora->b));
  return w;
}

/// Normalization without the multiplier plus per-token 1/RMS.
inline Tensor normalize_cached(const Tensor& x, double eps, std::vector<double>& inv_rms) {
  Tensor out = x;
  inv_rms.resize(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = out.row(r);
    const double inv = 1.0 / std::sqrt(sum_squares(row) / static_cast<double>(row.size()) + eps);
    inv_rms[r] = inv;
    for (double& v : row) v *= inv;
  }
  return out;
}

/// Static-input linear(s): returns the outputs for each consumer layer.
inline std::vector<Tensor> static_forward(const StaticInput& in, const Tensor& x, int bits,
                                          std::vector<const QuantLayer*> layers, const std::vector<const Tensor*>& w_eff,
                                          QuantSim sim, Accumulator acc, StaticCache* cache, StageCounts* counts) {
  std::vector<Tensor> outs;
  const double eps = in.kind == StaticCalibration::PerChannelFolded ? in.folded.base.epsilon : in.norm.epsilon;
  StaticCache local;
  StaticCache& c = cache ? *cache : local;
  c.xhat = normalize_cached(x, eps, c.inv_rms);

  if (in.kind == StaticCalibration::PerChannelFolded) {
    const FoldedNorm& f = in.folded;
    if (sim == QuantSim::Integer) {
      const QuantizedTensor q = folded_norm_forward(x, f, bits, counts);
      for (const QuantLayer* l : layers) outs.push_back(folded_linear(q, l->weight, acc, counts));
      c.u = q.ints.to_real();
    } else {
      c.u = Tensor({x.rows(), f.slots()});
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t i = 0; i < f.slots(); ++i) c.u(r, i) = c.xhat(r, f.source_channel(i)) * f.folded_gamma[i];
      for (const Tensor* w : w_eff) outs.push_back(matmul(c.u, *w));
    }
    return outs;
  }

  Tensor a = rmsnorm(x, in.norm);
  if (sim == QuantSim::Integer) {
    const Granularity g = in.kind == StaticCalibration::PerTensor ? Granularity::PerTensor : Granularity::PerToken;
    if (g == Granularity::PerToken && in.scales.size() != a.rows())
      throw ShapeError("per-token static scales were calibrated for " + std::to_string(in.scales.size()) +
                       " tokens, input has " + std::to_string(a.rows()));
    const QuantizedTensor q = quantize(a, in.scales, QuantScheme{bits, true, g, 0, CalibrationMode::Static});
    if (counts) {
      counts->quantize_passes += 1;
      counts->roundings += a.size();
    }
    for (const QuantLayer* l : layers) {
      outs.push_back(quantized_linear(q, l->weight, acc));
      if (counts) ++counts->integer_gemms;
    }
    c.u = dequantize(q);
  } else {
    c.u = std::move(a);
    for (const Tensor* w : w_eff) outs.push_back(matmul(c.u, *w));
  }
  return outs;
}

inline Tensor dynamic_forward(const DynamicInput& in, const Tensor& a, int weight_bits, const QuantLayer& l,
                              const Tensor& w_eff, QuantSim sim, Tensor* u_cache, StageCounts* counts) {
  const int bits = in.bits;
  const Accumulator acc = accumulator_for(bits, weight_bits);
  const Tensor x = in.hadamard ? hadamard_rotate(a, RotationSide::Right) : a;
  if (sim == QuantSim::Identity) {
    if (u_cache) *u_cache = x;
    return matmul(x, w_eff);
  }
  QuantizedTensor q;
  if (in.static_kind) {
    const Granularity g = *in.static_kind == StaticCalibration::PerTensor ? Granularity::PerTensor : Granularity::PerToken;
    if (g == Granularity::PerToken && in.static_scales.size() != x.rows())
      throw ShapeError("per-token static scales were calibrated for " + std::to_string(in.static_scales.size()) +
                       " tokens, input has " + std::to_string(x.rows()));
    q = quantize(x, in.static_scales, QuantScheme{bits, true, g, 0, CalibrationMode::Static});
  } else {
    q = quantize_per_token_dynamic(x, bits, in.clip_ratio);
  }
  if (counts) {
    counts->quantize_passes += 1;
    counts->roundings += x.size();
    counts->integer_gemms += 1;
  }
  if (u_cache) *u_cache = dequantize(q);
  return quantized_linear(q, l.weight, acc);
}

/// d/dx of x -> x * inv_rms(x), given the upstream gradient on xhat.
inline Tensor normalize_backward(const Tensor& xhat, const std::vector<double>& inv_rms, const Tensor& dxhat) {
  Tensor dx(xhat.shape());
  const double n = static_cast<double>(xhat.cols());
  for (std::size_t r = 0; r < xhat.rows(); ++r) {
    double dot = 0.0;
    for (std::size_t k = 0; k < xhat.cols(); ++k) dot += dxhat(r, k) * xhat(r, k);
    for (std::size_t k = 0; k < xhat.cols(); ++k) dx(r, k) = inv_rms[r] * (dxhat(r, k) - xhat(r, k) * dot / n);
  }
  return dx;
}

/// Straight-through gradient of a static input with respect to x.
inline Tensor static_backward(const StaticInput& in, const StaticCache& c, const Tensor& du) {
  Tensor dxhat(c.xhat.shape());
  if (in.kind == StaticCalibration::PerChannelFolded) {
    const FoldedNorm& f = in.folded;
    for (std::size_t r = 0; r < du.rows(); ++r)
      for (std::size_t i = 0; i < f.slots(); ++i) dxhat(r, f.source_channel(i)) += du(r, i) * f.folded_gamma[i];
  } else {
    for (std::size_t r = 0; r < du.rows(); ++r)
      for (std::size_t k = 0; k < du.cols(); ++k) dxhat(r, k) = du(r, k) * in.norm.gamma[k];
  }
  return normalize_backward(c.xhat, c.inv_rms, dxhat);
}

}  // namespace detail

/// Quantized forward pass of one (tokens x hidden) sample.
inline Tensor quantized_forward(const QuantizedBlock& qb, const Tensor& x, QuantSim sim = QuantSim::Integer,
                                QuantForwardCache* cache = nullptr, StageCounts* counts = nullptr) {
  qb.validate();
  if (x.rank() != 2 || x.cols() != qb.cfg.hidden) throw ShapeError("block input must be tokens x hidden");
  QuantForwardCache local;
  QuantForwardCache& c = cache ? *cache : local;
  const Accumulator acc = accumulator_for(qb.act_bits, qb.wcfg.bits);
  for (std::size_t i = 0; i < 5; ++i) c.w_eff[i] = detail::effective_weight(qb.layer(i), sim);

  auto o1 = detail::static_forward(qb.attn_in, x, qb.act_bits, {&qb.qkv}, {&c.w_eff[0]}, sim, acc, &c.s1, counts);
  c.qkv = std::move(o1[0]);
  const Tensor attn = attention_forward(c.qkv, qb.cfg.heads, &c.att);
  const Tensor o = detail::dynamic_forward(qb.out_in, attn, qb.wcfg.bits, qb.out, c.w_eff[1], sim, &c.u_out, counts);
  const Tensor h = add(x, o);
  auto o2 = detail::static_forward(qb.ffn_in, h, qb.act_bits, {&qb.gate, &qb.up}, {&c.w_eff[2], &c.w_eff[3]}, sim, acc,
                                   &c.s2, counts);
  c.gate = std::move(o2[0]);
  c.up = std::move(o2[1]);
  Tensor act(c.gate.shape());
  for (std::size_t i = 0; i < act.size(); ++i) act[i] = silu(c.gate[i]) * c.up[i];
  const Tensor d = detail::dynamic_forward(qb.down_in, act, qb.wcfg.bits, qb.down, c.w_eff[4], sim, &c.u_down, counts);
  c.y = add(h, d);
  return c.y;
}

/// Per-layer output MSE with every layer fed its reference input, so errors
/// do not compound. Order follows kLayerNames.
inline std::array<double, 5> layer_errors(const ToyBlock& fp, const QuantizedBlock& qb, const Tensor& x) {
  qb.validate();
  const FpTrace tr = block_trace_fp(fp, x);
  const Accumulator acc = accumulator_for(qb.act_bits, qb.wcfg.bits);
  std::array<double, 5> e{};
  const Tensor w0 = detail::effective_weight(qb.qkv, QuantSim::Integer);
  const auto q1 = detail::static_forward(qb.attn_in, x, qb.act_bits, {&qb.qkv}, {&w0}, QuantSim::Integer, acc, nullptr, nullptr);
  e[0] = mse(q1[0], tr.qkv);
  const Tensor w1 = detail::effective_weight(qb.out, QuantSim::Integer);
  e[1] = mse(detail::dynamic_forward(qb.out_in, tr.attn, qb.wcfg.bits, qb.out, w1, QuantSim::Integer, nullptr, nullptr),
             matmul(tr.attn, fp.w_out));
  const Tensor w2 = detail::effective_weight(qb.gate, QuantSim::Integer);
  const Tensor w3 = detail::effective_weight(qb.up, QuantSim::Integer);
  const auto q2 = detail::static_forward(qb.ffn_in, tr.h, qb.act_bits, {&qb.gate, &qb.up}, {&w2, &w3}, QuantSim::Integer,
                                         acc, nullptr, nullptr);
  e[2] = mse(q2[0], matmul(tr.norm2, fp.w_gate));
  e[3] = mse(q2[1], matmul(tr.norm2, fp.w_up));
  const Tensor w4 = detail::effective_weight(qb.down, QuantSim::Integer);
  e[4] = mse(detail::dynamic_forward(qb.down_in, tr.act, qb.wcfg.bits, qb.down, w4, QuantSim::Integer, nullptr, nullptr),
             matmul(tr.act, fp.w_down));
  return e;
}

/// Gradients of a scalar loss with respect to each layer's effective weight,
/// given dL/dy. Quantizers pass gradients straight through.
inline std::array<Tensor, 5> quantized_backward(const QuantizedBlock& qb, const QuantForwardCache& c, const Tensor& dy) {
  std::array<Tensor, 5> g;
  auto unrotate = [](const Tensor& t, bool had) { return had ? hadamard_rotate(t, RotationSide::Right) : t; };

  // down
  g[4] = matmul(transpose(c.u_down), dy);
  const Tensor dact = unrotate(matmul(dy, transpose(c.w_eff[4])), qb.down_in.hadamard);
  Tensor dgate(c.gate.shape()), dup(c.up.shape());
  for (std::size_t i = 0; i < dact.size(); ++i) {
    dgate[i] = dact[i] * c.up[i] * silu_grad(c.gate[i]);
    dup[i] = dact[i] * silu(c.gate[i]);
  }
  // gate / up
  g[2] = matmul(transpose(c.s2.u), dgate);
  g[3] = matmul(transpose(c.s2.u), dup);
  const Tensor du2 = add(matmul(dgate, transpose(c.w_eff[2])), matmul(dup, transpose(c.w_eff[3])));
  const Tensor dh = add(dy, detail::static_backward(qb.ffn_in, c.s2, du2));
  // out
  g[1] = matmul(transpose(c.u_out), dh);
  const Tensor dattn = unrotate(matmul(dh, transpose(c.w_eff[1])), qb.out_in.hadamard);
  // qkv
  const Tensor dqkv = attention_backward(c.qkv, c.att, dattn, qb.cfg.heads);
  g[0] = matmul(transpose(c.s1.u), dqkv);
  return g;
}

// ---------------------------------------------------------------------------
// serialization

namespace detail {

inline void save_layer(TensorArchive& ar, const std::string& p, const QuantLayer& l) {
  ar.put(p + ".w_int", l.weight.w_int);
  ar.put_vector(p + ".scales", l.weight.w_scales);
  if (!l.weight.zero_points.empty())
    ar.put(p + ".zp", IntTensor({l.weight.zero_points.size()}, l.weight.zero_points, IntFormat{l.weight.w_int.bits(), true}));
  ar.put_vector(p + ".folded_row_scales", l.weight.folded_row_scales);
  ar.put(p + ".base", l.base);
  if (l.lora && !l.lora->empty()) {
    ar.put(p + ".lora_a", l.lora->a);
    ar.put(p + ".lora_b", l.lora->b);
  }
}

inline QuantLayer load_layer(const TensorArchive& ar, const std::string& p, const WeightQuantConfig& cfg) {
  QuantLayer l;
  l.base = ar.real(p + ".base");
  l.weight.w_int = ar.integer(p + ".w_int");
  l.weight.w_scales = ar.vector(p + ".scales");
  if (ar.has_int(p + ".zp")) {
    const auto& zp = ar.integer(p + ".zp").data();
    l.weight.zero_points.assign(zp.begin(), zp.end());
  }
  if (ar.has_real(p + ".folded_row_scales")) l.weight.folded_row_scales = ar.vector(p + ".folded_row_scales");
  l.weight.group_size = cfg.group_size ? cfg.group_size : l.weight.w_int.shape()[0];
  if (ar.has_real(p + ".lora_a")) {
    LoraPair lp{ar.real(p + ".lora_a"), ar.real(p + ".lora_b"), 0};
    lp.rank = lp.a.cols();
    l.lora = std::move(lp);
  }
  return l;
}

inline nlohmann::json save_static(TensorArchive& ar, const std::string& p, const StaticInput& in) {
  nlohmann::json j;
  j["kind"] = to_string(in.kind);
  if (in.kind == StaticCalibration::PerChannelFolded) {
    ar.put_vector(p + ".folded_gamma", in.folded.folded_gamma);
    ar.put_vector(p + ".scales", in.folded.scales);
    ar.put_vector(p + ".gamma", in.folded.base.gamma);
    j["epsilon"] = in.folded.base.epsilon;
    j["plan"] = to_json(in.plan);
    if (!in.clip.grid.empty()) j["clip"] = to_json(in.clip);
  } else {
    ar.put_vector(p + ".gamma", in.norm.gamma);
    ar.put_vector(p + ".scales", in.scales);
    j["epsilon"] = in.norm.epsilon;
  }
  return j;
}

inline StaticInput load_static(const TensorArchive& ar, const std::string& p, const nlohmann::json& j) {
  StaticInput in;
  in.kind = static_calibration_from_string(j.at("kind"));
  const double eps = j.at("epsilon");
  if (in.kind == StaticCalibration::PerChannelFolded) {
    in.plan = plan_from_json(j.at("plan"));
    in.folded.base = NormParams::rms(ar.vector(p + ".gamma"), eps);
    in.folded.folded_gamma = ar.vector(p + ".folded_gamma");
    in.folded.scales = ar.vector(p + ".scales");
    in.folded.gather = in.plan.gather;
    if (j.contains("clip")) in.clip = clip_plan_from_json(j.at("clip"));
  } else {
    in.norm = NormParams::rms(ar.vector(p + ".gamma"), eps);
    in.scales = ar.vector(p + ".scales");
  }
  return in;
}

}  // namespace detail

/// Writes the block's tensors under "<prefix>." and returns its metadata.
inline nlohmann::json save_quantized_block(TensorArchive& ar, const QuantizedBlock& qb, const std::string& prefix) {
  nlohmann::json j;
  j["act_bits"] = qb.act_bits;
  j["weight_bits"] = qb.wcfg.bits;
  j["weight_symmetric"] = qb.wcfg.symmetric;
  j["weight_group_size"] = qb.wcfg.group_size;
  j["attn_in"] = detail::save_static(ar, prefix + ".attn_in", qb.attn_in);
  j["ffn_in"] = detail::save_static(ar, prefix + ".ffn_in", qb.ffn_in);
  for (auto [name, in] : {std::pair{"out_in", &qb.out_in}, std::pair{"down_in", &qb.down_in}}) {
    nlohmann::json d;
    d["bits"] = in->bits;
    d["clip_ratio"] = in->clip_ratio;
    d["hadamard"] = in->hadamard;
    if (in->static_kind) {
      d["static_kind"] = to_string(*in->static_kind);
      ar.put_vector(prefix + "." + name + ".scales", in->static_scales);
    }
    if (!in->clip.grid.empty()) d["clip"] = to_json(in->clip);
    j[name] = d;
  }
  for (std::size_t i = 0; i < 5; ++i) detail::save_layer(ar, prefix + "." + QuantizedBlock::kLayerNames[i], qb.layer(i));
  return j;
}

inline QuantizedBlock load_quantized_block(const TensorArchive& ar, const std::string& prefix, const nlohmann::json& j,
                                           const ToyBlockConfig& cfg) {
  try {
    QuantizedBlock qb;
    qb.cfg = cfg;
    qb.act_bits = j.at("act_bits");
    qb.wcfg = WeightQuantConfig{j.at("weight_bits"), j.at("weight_symmetric"), j.at("weight_group_size")};
    qb.attn_in = detail::load_static(ar, prefix + ".attn_in", j.at("attn_in"));
    qb.ffn_in = detail::load_static(ar, prefix + ".ffn_in", j.at("ffn_in"));
    for (auto [name, in] : {std::pair{"out_in", &qb.out_in}, std::pair{"down_in", &qb.down_in}}) {
      const auto& d = j.at(name);
      in->bits = d.at("bits");
      in->clip_ratio = d.at("clip_ratio");
      in->hadamard = d.at("hadamard");
      if (d.contains("static_kind")) {
        in->static_kind = static_calibration_from_string(d.at("static_kind"));
        in->static_scales = ar.vector(prefix + "." + std::string(name) + ".scales");
      }
      if (d.contains("clip")) in->clip = clip_plan_from_json(d.at("clip"));
    }
    for (std::size_t i = 0; i < 5; ++i)
      qb.layer(i) = detail::load_layer(ar, prefix + "." + QuantizedBlock::kLayerNames[i], qb.wcfg);
    qb.validate();
    return qb;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed quantized block metadata for '" + prefix + "': " + e.what());
  }
}

}  // namespace mq
