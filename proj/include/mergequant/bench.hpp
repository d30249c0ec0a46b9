// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Microbenchmark: the activation-side runtime work of the static path (one
// index gather) against explicit per-token quantize + dequantize.

#pragma once

#include <chrono>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "mergequant/dimrec.hpp"
#include "mergequant/error.hpp"
#include "mergequant/quantizer.hpp"
#include "mergequant/tensor.hpp"
#include "mergequant/toymodel.hpp"

namespace mq {

struct BenchConfig {
  std::vector<std::size_t> batches{1, 16, 32};
  std::vector<std::size_t> seqlens{1, 128, 256};
  std::vector<std::size_t> hidden{64, 128, 256};
  std::size_t repetitions = 500;
  std::size_t warmup = 50;
  int bits = 4;
  double alpha = 5.0;

  void validate() const {
    if (batches.empty() || seqlens.empty() || hidden.empty()) throw ConfigError("bench grid axes must be nonempty");
    for (auto v : batches)
      if (v == 0) throw ConfigError("bench batch sizes must be positive");
    for (auto v : seqlens)
      if (v == 0) throw ConfigError("bench sequence lengths must be positive");
    for (auto v : hidden)
      if (v == 0) throw ConfigError("bench hidden sizes must be positive");
    if (repetitions == 0) throw ConfigError("bench repetitions must be positive");
    IntFormat{bits, false}.validate();
  }
};

/// Elementwise operations per token of width n.
/// Gather: one indexed copy per output element.
inline std::uint64_t gather_ops_per_token(std::size_t n) { return n; }

/// Per-token quantize + dequantize: |x| max-reduction (n), scale and its
/// reciprocal (2), x * (1/s) (n), round (n), clamp (n), q * s (n).
inline std::uint64_t quant_dequant_ops_per_token(std::size_t n) { return 5 * static_cast<std::uint64_t>(n) + 2; }

struct BenchCell {
  std::size_t batch = 0, seqlen = 0, hidden = 0;
  double gather_ms = 0.0;
  double quant_dequant_ms = 0.0;
  std::uint64_t gather_ops = 0;
  std::uint64_t quant_dequant_ops = 0;
  std::size_t extra_slots = 0;

  double speedup() const { return gather_ms > 0.0 ? quant_dequant_ms / gather_ms : 0.0; }
};

namespace detail {

template <typename F>
double mean_ms(F&& f, std::size_t warmup, std::size_t reps) {
  for (std::size_t i = 0; i < warmup; ++i) f();
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < reps; ++i) f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / static_cast<double>(reps);
}

}  // namespace detail

/// Times both paths on one (batch * seqlen) x hidden activation.
inline BenchCell bench_cell(std::size_t batch, std::size_t seqlen, std::size_t hidden, const BenchConfig& cfg,
                            std::uint64_t seed) {
  const std::size_t tokens = batch * seqlen;
  OutlierProfile profile;
  profile.seed = seed;
  profile.outlier_channel_count = std::min<std::size_t>(3, hidden);
  const Tensor x = generate_activations(profile, tokens, hidden, hidden);
  const CalibrationStats stats = calibrate(std::span<const Tensor>(&x, 1), std::optional<std::size_t>{1}, true);
  const ReconstructionPlan plan = build_plan(make_scales(stats, cfg.bits), cfg.alpha, stats.hessian_diag);

  volatile double sink = 0.0;
  BenchCell c{batch, seqlen, hidden};
  c.extra_slots = plan.extra_slots();
  c.gather_ms = detail::mean_ms([&] { sink = sink + reconstruct_activation(x, plan).data()[0]; }, cfg.warmup, cfg.repetitions);
  c.quant_dequant_ms = detail::mean_ms(
      [&] { sink = sink + dequantize(quantize_per_token_dynamic(x, cfg.bits)).data()[0]; }, cfg.warmup, cfg.repetitions);
  c.gather_ops = tokens * gather_ops_per_token(hidden);
  c.quant_dequant_ops = tokens * quant_dequant_ops_per_token(hidden);
  return c;
}

inline std::vector<BenchCell> run_bench_grid(const BenchConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::vector<BenchCell> cells;
  for (auto b : cfg.batches)
    for (auto s : cfg.seqlens)
      for (auto h : cfg.hidden) cells.push_back(bench_cell(b, s, h, cfg, seed));
  return cells;
}

}  // namespace mq
