// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Adaptive clipping.
//
// Static per-channel path: for channel i and candidate ratio r the loss is
//     L_i(r) = ||Xhat_i(s(r)) - X_i||^2 + ||What^X - W^X||^2,   s(r) = r * max|X_i| / qmax
// where W^X are the weight rows channel i's scale is migrated into (split at
// the threshold T exactly as dimension reconstruction would), quantized per
// output column. Column scales take the larger of the other channels' folded
// rows and this channel's own rows, so each channel's loss stays separable.
//
// Dynamic per-token path (out/down layers): one ratio per layer minimizing
// ||Q_r(X) W - X W||^2 under per-token dynamic quantization.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "mergequant/dimrec.hpp"
#include "mergequant/error.hpp"
#include "mergequant/quantizer.hpp"
#include "mergequant/tensor.hpp"

namespace mq {

/// {0.50, 0.51, ..., 1.00}
inline std::vector<double> default_clip_grid() {
  std::vector<double> g;
  for (int i = 50; i <= 100; ++i) g.push_back(i / 100.0);
  return g;
}

inline void validate_clip_grid(std::span<const double> grid) {
  if (grid.empty()) throw ConfigError("clip grid is empty");
  bool has_one = false;
  for (double r : grid) {
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("clip ratios must lie in (0, 1]");
    has_one = has_one || r == 1.0;
  }
  if (!has_one) throw ConfigError("clip grid must contain 1.0");
}

/// Weight rows touched by one channel's migrated scale.
struct FoldedRowContext {
  double threshold = std::numeric_limits<double>::infinity();
  std::vector<double> weight_row;     ///< W_i over every consumer output column
  std::vector<double> other_col_max;  ///< per column: max |folded weight| over the other channels
  int weight_bits = 4;
};

struct ClipChoice {
  double ratio = 1.0;
  double loss = 0.0;
  std::vector<double> losses;  ///< aligned with the grid
};

inline double activation_clip_loss(std::span<const double> samples, double scale, int bits) {
  const double q = static_cast<double>(qmax(bits));
  double loss = 0.0;
  for (double x : samples) {
    const double xh = std::clamp(round_half_even(x / scale), -q, q) * scale;
    loss += (xh - x) * (xh - x);
  }
  return loss;
}

inline double folded_weight_clip_loss(double scale, const FoldedRowContext& ctx) {
  if (ctx.weight_row.empty()) return 0.0;
  if (ctx.other_col_max.size() != ctx.weight_row.size()) throw ShapeError("folded row context: column count mismatch");
  const std::vector<double> pieces =
      (std::isinf(ctx.threshold) || scale <= ctx.threshold) ? std::vector<double>{scale} : detail::split_scale(scale, ctx.threshold);
  const double top = *std::max_element(pieces.begin(), pieces.end());
  const double q = static_cast<double>(qmax(ctx.weight_bits));
  double loss = 0.0;
  for (std::size_t c = 0; c < ctx.weight_row.size(); ++c) {
    const double colmax = std::max(ctx.other_col_max[c], top * std::abs(ctx.weight_row[c]));
    const double ws = colmax > 0.0 ? colmax / q : kScaleFloor;
    for (double p : pieces) {
      const double v = p * ctx.weight_row[c];
      const double vh = std::clamp(round_half_even(v / ws), -q, q) * ws;
      loss += (vh - v) * (vh - v);
    }
  }
  return loss;
}

/// Loss of one channel at one clip ratio.
inline double channel_clip_loss(std::span<const double> samples, double ratio, int act_bits, const FoldedRowContext* ctx) {
  double maxabs = 0.0;
  for (double x : samples) maxabs = std::max(maxabs, std::abs(x));
  const double s = maxabs > 0.0 ? ratio * maxabs / static_cast<double>(qmax(act_bits)) : kScaleFloor;
  double loss = activation_clip_loss(samples, s, act_bits);
  if (ctx) loss += folded_weight_clip_loss(s, *ctx);
  return loss;
}

namespace detail {

/// Argmin with ties resolved toward the larger ratio.
inline ClipChoice pick(std::span<const double> grid, std::vector<double> losses) {
  ClipChoice c;
  c.loss = std::numeric_limits<double>::infinity();
  c.ratio = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i)
    if (losses[i] < c.loss || (losses[i] == c.loss && grid[i] > c.ratio)) {
      c.loss = losses[i];
      c.ratio = grid[i];
    }
  c.losses = std::move(losses);
  return c;
}

}  // namespace detail

inline ClipChoice search_channel_clip(std::span<const double> samples, const FoldedRowContext* ctx, int act_bits,
                                      std::span<const double> grid) {
  validate_clip_grid(grid);
  if (samples.empty()) throw DataError("channel clip search needs calibration samples");
  std::vector<double> losses;
  losses.reserve(grid.size());
  for (double r : grid) losses.push_back(channel_clip_loss(samples, r, act_bits, ctx));
  return detail::pick(grid, std::move(losses));
}

/// ||deq(Q_r(X)) W - X W||^2_F under per-token dynamic quantization.
inline double token_clip_loss(const Tensor& x, const Tensor& w, const Tensor& reference, double ratio, int bits) {
  const Tensor xq = dequantize(quantize_per_token_dynamic(x, bits, ratio));
  return squared_error(matmul(xq, w), reference);
}

inline ClipChoice search_token_clip(const Tensor& x, const Tensor& w, int bits, std::span<const double> grid) {
  validate_clip_grid(grid);
  if (x.empty()) throw DataError("token clip search needs calibration inputs");
  const Tensor ref = matmul(x, w);
  std::vector<double> losses;
  for (double r : grid) losses.push_back(token_clip_loss(x, w, ref, r, bits));
  return detail::pick(grid, std::move(losses));
}

struct ClipPlan {
  std::vector<double> per_channel_ratios;  ///< static path
  std::optional<double> layer_ratio;       ///< dynamic path
  std::vector<double> grid;
  std::vector<std::vector<double>> losses; ///< per channel (or one entry for the layer), aligned with grid
};

/// Per-channel clip search for a folded norm -> linear(s) group.
/// `x`: calibration norm outputs (tokens x n); `w`: consumer weights
/// concatenated along the output axis (n x J); `threshold`: split threshold.
inline ClipPlan search_static_clips(const Tensor& x, const Tensor& w, double threshold, int act_bits, int weight_bits,
                                    std::span<const double> grid) {
  validate_clip_grid(grid);
  if (w.rank() != 2 || w.dim(0) != x.cols()) throw ShapeError("static clip search: weight rows differ from channel count");
  const std::size_t n = x.cols(), cols = w.dim(1), tokens = x.rows();
  std::vector<double> maxabs(n, 0.0);
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t k = 0; k < n; ++k) maxabs[k] = std::max(maxabs[k], std::abs(x(t, k)));
  const auto base = make_scales(maxabs, act_bits);

  // Per column, the largest and second-largest folded row magnitude with its owner.
  std::vector<double> top1(cols, 0.0), top2(cols, 0.0);
  std::vector<std::size_t> owner(cols, n);
  for (std::size_t k = 0; k < n; ++k) {
    const double piece = std::min(base[k], threshold);
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = piece * std::abs(w(k, c));
      if (v > top1[c]) {
        top2[c] = top1[c];
        top1[c] = v;
        owner[c] = k;
      } else if (v > top2[c]) {
        top2[c] = v;
      }
    }
  }

  ClipPlan plan;
  plan.grid.assign(grid.begin(), grid.end());
  std::vector<double> samples(tokens);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t t = 0; t < tokens; ++t) samples[t] = x(t, k);
    FoldedRowContext ctx;
    ctx.threshold = threshold;
    ctx.weight_bits = weight_bits;
    ctx.weight_row.assign(w.row(k).begin(), w.row(k).end());
    ctx.other_col_max.resize(cols);
    for (std::size_t c = 0; c < cols; ++c) ctx.other_col_max[c] = owner[c] == k ? top2[c] : top1[c];
    ClipChoice choice = search_channel_clip(samples, &ctx, act_bits, grid);
    plan.per_channel_ratios.push_back(choice.ratio);
    plan.losses.push_back(std::move(choice.losses));
  }
  return plan;
}

inline ClipPlan search_dynamic_clip(const Tensor& x, const Tensor& w, int bits, std::span<const double> grid) {
  ClipChoice c = search_token_clip(x, w, bits, grid);
  ClipPlan plan;
  plan.layer_ratio = c.ratio;
  plan.grid.assign(grid.begin(), grid.end());
  plan.losses.push_back(std::move(c.losses));
  return plan;
}

inline nlohmann::json to_json(const ClipPlan& p) {
  nlohmann::json j;
  j["grid"] = p.grid;
  if (p.layer_ratio) j["layer_ratio"] = *p.layer_ratio;
  else j["per_channel_ratios"] = p.per_channel_ratios;
  j["losses"] = p.losses;
  return j;
}

inline ClipPlan clip_plan_from_json(const nlohmann::json& j) {
  try {
    ClipPlan p;
    p.grid = j.at("grid").get<std::vector<double>>();
    if (j.contains("layer_ratio")) p.layer_ratio = j.at("layer_ratio").get<double>();
    if (j.contains("per_channel_ratios")) p.per_channel_ratios = j.at("per_channel_ratios").get<std::vector<double>>();
    p.losses = j.at("losses").get<std::vector<std::vector<double>>>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed clip plan: ") + e.what());
  }
}

}  // namespace mq
