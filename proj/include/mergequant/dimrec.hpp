// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Dimension reconstruction.
//
// Static per-channel scales above T = mean(s) + alpha * std(s) are split into
// pieces (s_k - m*T, T, ..., T), each in (0, T]. The M extra slots are paid
// for by pruning M low-importance channels (neighbors of outliers first,
// ranked by the Hessian diagonal), so the reconstructed width equals the
// original n. At inference the activation side is a single index gather.
//
// Split semantics: every slot of channel k carries the same folded gamma
// gamma_k / s_k (so duplicates emit identical integers), and weight row
// slot_i = piece_i * W_k. Since the pieces sum to s_k the split is lossless
// before weight rounding.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mergequant/error.hpp"
#include "mergequant/qsm.hpp"
#include "mergequant/quantizer.hpp"
#include "mergequant/tensor.hpp"

namespace mq {

struct ReconstructionPlan {
  double alpha = 0.0;
  double threshold = std::numeric_limits<double>::infinity();
  std::size_t dim = 0;
  std::map<std::size_t, std::vector<double>> splits;  ///< channel -> pieces (remainder first)
  std::vector<std::size_t> outliers;                   ///< channels with s_k > T, ascending
  std::vector<std::size_t> neighbors;
  std::vector<std::size_t> pruned;
  std::vector<std::size_t> gather;       ///< slot -> source channel (kept channels, then extra split slots)
  std::vector<double> slot_scales;       ///< per slot dequant factor (piece or original scale)

  /// M: slots added by splitting.
  std::size_t extra_slots() const {
    std::size_t m = 0;
    for (const auto& [_, pieces] : splits) m += pieces.size() - 1;
    return m;
  }
  bool is_identity() const { return splits.empty() && pruned.empty(); }
};

/// T = mean(s) + alpha * std(s), population standard deviation.
inline double compute_threshold(std::span<const double> scales, double alpha) {
  if (scales.empty()) throw ShapeError("compute_threshold: no scales");
  if (std::isinf(alpha) && alpha > 0) return std::numeric_limits<double>::infinity();
  const double n = static_cast<double>(scales.size());
  const double mean = std::accumulate(scales.begin(), scales.end(), 0.0) / n;
  double var = 0.0;
  for (double s : scales) var += (s - mean) * (s - mean);
  return mean + alpha * std::sqrt(var / n);
}

namespace detail {

/// Sum of a split: the full-threshold pieces left to right, then the
/// remainder (stored first). This is the order the exactness guarantee uses.
inline double sum_pieces(std::span<const double> pieces) {
  if (pieces.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 1; i < pieces.size(); ++i) s += pieces[i];
  return s + pieces[0];
}

/// Pieces (r, T, ..., T) with m copies of T and r in (0, T]. With acc the
/// rounded sum of the m copies, r = s - acc is exact (acc <= s <= 2 acc), so
/// acc + r reproduces s bit for bit.
inline std::vector<double> split_scale(double s, double threshold) {
  auto m = static_cast<std::size_t>(std::ceil(s / threshold)) - 1;
  auto remainder = [&](std::size_t copies) {
    double acc = 0.0;
    for (std::size_t i = 0; i < copies; ++i) acc += threshold;
    return s - acc;
  };
  double r = remainder(m);
  while (r > threshold) r = remainder(++m);
  while (r <= 0.0 && m > 0) r = remainder(--m);
  std::vector<double> pieces(m + 1, threshold);
  pieces[0] = r;
  return pieces;
}

}  // namespace detail

/// Splits every scale above T. Fills threshold, splits and outliers.
inline ReconstructionPlan split_strong_params(std::span<const double> scales, double threshold) {
  if (!(threshold > 0.0)) throw ConfigError("split threshold must be positive");
  ReconstructionPlan plan;
  plan.threshold = threshold;
  plan.dim = scales.size();
  for (std::size_t k = 0; k < scales.size(); ++k) {
    if (scales[k] > threshold) {
      plan.outliers.push_back(k);
      plan.splits.emplace(k, detail::split_scale(scales[k], threshold));
    }
  }
  return plan;
}

/// Immediate index neighbors of the outliers that are themselves in range and
/// not outliers, deduplicated and ascending.
inline std::vector<std::size_t> identify_neighbors(std::span<const std::size_t> outliers, std::size_t n) {
  const std::set<std::size_t> out(outliers.begin(), outliers.end());
  std::set<std::size_t> nb;
  for (std::size_t k : outliers) {
    if (k >= n) throw ShapeError("outlier index " + std::to_string(k) + " out of range for width " + std::to_string(n));
    if (k > 0 && !out.count(k - 1)) nb.insert(k - 1);
    if (k + 1 < n && !out.count(k + 1)) nb.insert(k + 1);
  }
  return {nb.begin(), nb.end()};
}

/// Chooses M channels to prune:
///   N > M  the M neighbors with the smallest Hessian diagonal;
///   N == M all neighbors;
///   N < M  all neighbors plus the M - N least important other non-outliers.
/// Ties go to the lower channel index. Result is ascending.
inline std::vector<std::size_t> select_prune_channels(std::span<const std::size_t> neighbors, std::size_t m,
                                                      std::span<const double> hessian_diag,
                                                      std::span<const std::size_t> outliers) {
  const std::size_t n = hessian_diag.size();
  const std::set<std::size_t> out(outliers.begin(), outliers.end());
  const std::set<std::size_t> nb(neighbors.begin(), neighbors.end());
  if (n < out.size() || n - out.size() < m)
    throw ConfigError("dimension reconstruction needs " + std::to_string(m) + " prunable channels but only " +
                      std::to_string(n - std::min(n, out.size())) + " non-outlier channels exist");
  for (auto k : nb)
    if (k >= n || out.count(k)) throw ShapeError("neighbor set contains an invalid or outlier channel");

  auto by_importance = [&](std::vector<std::size_t> v) {
    std::stable_sort(v.begin(), v.end(), [&](std::size_t a, std::size_t b) {
      return hessian_diag[a] < hessian_diag[b] || (hessian_diag[a] == hessian_diag[b] && a < b);
    });
    return v;
  };

  std::vector<std::size_t> pruned;
  if (nb.size() >= m) {
    auto ranked = by_importance({nb.begin(), nb.end()});
    pruned.assign(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(m));
  } else {
    pruned.assign(nb.begin(), nb.end());
    std::vector<std::size_t> others;
    for (std::size_t k = 0; k < n; ++k)
      if (!nb.count(k) && !out.count(k)) others.push_back(k);
    auto ranked = by_importance(std::move(others));
    pruned.insert(pruned.end(), ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(m - nb.size()));
  }
  std::sort(pruned.begin(), pruned.end());
  return pruned;
}

/// Full plan: threshold, splits, neighbors, pruning and the gather vector
/// (kept channels ascending, then one extra slot per additional piece).
inline ReconstructionPlan build_plan(std::span<const double> scales, double alpha, std::span<const double> hessian_diag) {
  if (scales.empty()) throw ShapeError("build_plan: no scales");
  if (hessian_diag.size() != scales.size()) throw ShapeError("build_plan: Hessian diagonal length differs from scale count");
  for (double s : scales)
    if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("build_plan: scales must be positive and finite");
  const double t = compute_threshold(scales, alpha);
  ReconstructionPlan plan;
  if (std::isinf(t)) {
    plan.threshold = t;
    plan.dim = scales.size();
  } else {
    plan = split_strong_params(scales, t);
  }
  plan.alpha = alpha;
  plan.neighbors = identify_neighbors(plan.outliers, scales.size());
  plan.pruned = select_prune_channels(plan.neighbors, plan.extra_slots(), hessian_diag, plan.outliers);

  const std::set<std::size_t> pruned(plan.pruned.begin(), plan.pruned.end());
  for (std::size_t k = 0; k < scales.size(); ++k) {
    if (pruned.count(k)) continue;
    plan.gather.push_back(k);
    auto it = plan.splits.find(k);
    plan.slot_scales.push_back(it == plan.splits.end() ? scales[k] : it->second.front());
  }
  for (const auto& [k, pieces] : plan.splits)
    for (std::size_t i = 1; i < pieces.size(); ++i) {
      plan.gather.push_back(k);
      plan.slot_scales.push_back(pieces[i]);
    }
  if (plan.gather.size() != scales.size()) throw NumericError("reconstructed width differs from original width");
  return plan;
}

/// y[..., i] = x[..., gather[i]]. Pure index gather, no arithmetic.
template <typename T>
BasicTensor<T> reconstruct_activation(const BasicTensor<T>& x, const ReconstructionPlan& plan) {
  if (x.cols() != plan.dim)
    throw ShapeError("reconstruct_activation: last dim " + std::to_string(x.cols()) + " != plan width " + std::to_string(plan.dim));
  const std::size_t out_cols = plan.gather.size();
  for (auto g : plan.gather)
    if (g >= x.cols()) throw ShapeError("gather index out of range");
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  shape.push_back(out_cols);
  BasicTensor<T> y(shape);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T* src = &x.data()[r * x.cols()];
    T* dst = &y.data()[r * out_cols];
    for (std::size_t i = 0; i < out_cols; ++i) dst[i] = src[plan.gather[i]];
  }
  return y;
}

/// Real weight rows for the reconstructed slots: slot_scale_i * W_{gather_i}.
inline Tensor reconstructed_migrated_weight(const Tensor& w, const ReconstructionPlan& plan) {
  if (w.rank() != 2 || w.dim(0) != plan.dim) throw ShapeError("reconstruction plan does not match weight input dimension");
  Tensor out({plan.gather.size(), w.dim(1)});
  for (std::size_t i = 0; i < plan.gather.size(); ++i) {
    auto src = w.row(plan.gather[i]);
    auto dst = out.row(i);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] = plan.slot_scales[i] * src[c];
  }
  return out;
}

/// Gathers a folded norm into the reconstructed slot layout.
inline FoldedNorm reconstruct_norm(const FoldedNorm& f, const ReconstructionPlan& plan) {
  if (!f.gather.empty()) throw ConfigError("folded norm is already reconstructed");
  if (f.slots() != plan.dim) throw ShapeError("reconstruction plan does not match folded norm width");
  FoldedNorm out;
  out.base = f.base;
  out.gather = plan.gather;
  for (auto k : plan.gather) {
    out.folded_gamma.push_back(f.folded_gamma[k]);
    out.scales.push_back(f.scales[k]);
  }
  if (f.folded_beta) {
    std::vector<double> b;
    for (auto k : plan.gather) b.push_back((*f.folded_beta)[k]);
    out.folded_beta = std::move(b);
  }
  return out;
}

/// Reconstructs both sides of a folded norm -> linear pair.
inline std::pair<FoldedNorm, QuantizedLinear> reconstruct_norm_and_weights(const FoldedNorm& f, const Tensor& w,
                                                                           const ReconstructionPlan& plan,
                                                                           const WeightQuantConfig& cfg) {
  for (std::size_t k = 0; k < f.scales.size() && k < plan.dim; ++k) {
    auto it = plan.splits.find(k);
    if (it != plan.splits.end() && detail::sum_pieces(it->second) != f.scales[k])
      throw ConfigError("reconstruction plan was not built from these norm scales");
  }
  FoldedNorm nf = reconstruct_norm(f, plan);
  QuantizedLinear q = quantize_weights(reconstructed_migrated_weight(w, plan), cfg);
  q.folded_row_scales = plan.slot_scales;
  return {std::move(nf), std::move(q)};
}

inline nlohmann::json to_json(const ReconstructionPlan& p) {
  nlohmann::json j;
  j["alpha"] = std::isinf(p.alpha) ? nlohmann::json(nullptr) : nlohmann::json(p.alpha);
  j["T"] = std::isinf(p.threshold) ? nlohmann::json(nullptr) : nlohmann::json(p.threshold);
  j["dim"] = p.dim;
  nlohmann::json splits = nlohmann::json::object();
  for (const auto& [k, pieces] : p.splits) splits[std::to_string(k)] = pieces;
  j["splits"] = splits;
  j["outliers"] = p.outliers;
  j["neighbors"] = p.neighbors;
  j["prune"] = p.pruned;
  j["gather"] = p.gather;
  j["slot_scales"] = p.slot_scales;
  return j;
}

inline ReconstructionPlan plan_from_json(const nlohmann::json& j) {
  try {
    ReconstructionPlan p;
    p.alpha = j.at("alpha").is_null() ? std::numeric_limits<double>::infinity() : j.at("alpha").get<double>();
    p.threshold = j.at("T").is_null() ? std::numeric_limits<double>::infinity() : j.at("T").get<double>();
    p.dim = j.at("dim");
    for (auto it = j.at("splits").begin(); it != j.at("splits").end(); ++it)
      p.splits.emplace(std::stoul(it.key()), it.value().get<std::vector<double>>());
    p.outliers = j.at("outliers").get<std::vector<std::size_t>>();
    p.neighbors = j.at("neighbors").get<std::vector<std::size_t>>();
    p.pruned = j.at("prune").get<std::vector<std::size_t>>();
    p.gather = j.at("gather").get<std::vector<std::size_t>>();
    p.slot_scales = j.at("slot_scales").get<std::vector<double>>();
    if (p.gather.size() != p.slot_scales.size()) throw DataError("plan gather/slot_scales length mismatch");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed reconstruction plan: ") + e.what());
  }
}

}  // namespace mq
