// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Low-rank compensation: each quantized linear carries A (n_in x r) and
// B (r x n_out) and uses q(W + A B). A and B are fitted by plain gradient
// descent on the block reconstruction error, with the weight quantizer
// treated as the identity for gradients.

#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <vector>

#include "mergequant/error.hpp"
#include "mergequant/quantized_block.hpp"
#include "mergequant/tensor.hpp"
#include "mergequant/toymodel.hpp"

namespace mq {

struct LoraConfig {
  std::size_t rank = 4;
  std::size_t steps = 200;
  double step_size = 1e-3;
  double init_std = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(step_size > 0.0) || !std::isfinite(step_size)) throw ConfigError("lora step_size must be positive");
    if (!(init_std >= 0.0)) throw ConfigError("lora init_std must be non-negative");
  }
};

struct CompensationResult {
  std::array<LoraPair, 5> pairs;  ///< best-seen adapters, one per layer
  double initial_loss = 0.0;
  double best_loss = 0.0;
  std::size_t best_step = 0;      ///< 0 means the initial (zero-adapter) point
  std::vector<double> history;    ///< loss before each update, then the final loss
};

/// Mean over samples of ||fp(x) - q(x)||_F^2.
inline double reconstruction_loss(const ToyBlock& fp, const QuantizedBlock& qb, std::span<const Tensor> samples) {
  double loss = 0.0;
  for (const auto& x : samples) loss += squared_error(quantized_forward(qb, x), block_forward_fp(fp, x));
  return loss / static_cast<double>(samples.size());
}

inline void attach_adapters(QuantizedBlock& qb, const std::array<LoraPair, 5>& pairs) {
  for (std::size_t i = 0; i < 5; ++i) {
    if (pairs[i].empty()) qb.layer(i).lora.reset();
    else qb.layer(i).lora = pairs[i];
  }
  refresh_weights(qb);
}

namespace detail {

inline double loss_and_grads(const ToyBlock& fp, const QuantizedBlock& qb, std::span<const Tensor> samples,
                             std::span<const Tensor> targets, QuantSim sim, std::array<Tensor, 5>* grads) {
  const double inv = 1.0 / static_cast<double>(samples.size());
  double loss = 0.0;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    QuantForwardCache cache;
    const Tensor y = quantized_forward(qb, samples[s], sim, &cache);
    const Tensor diff = sub(y, targets[s]);
    loss += sum_squares(diff.data()) * inv;
    if (grads) {
      const auto g = quantized_backward(qb, cache, scaled(diff, 2.0 * inv));
      for (std::size_t i = 0; i < 5; ++i) (*grads)[i] = (*grads)[i].empty() ? g[i] : add((*grads)[i], g[i]);
    }
  }
  (void)fp;
  return loss;
}

}  // namespace detail

/// Gradients of the reconstruction loss with respect to every adapter.
/// Exposed for finite-difference checks.
inline double compensation_gradients(const ToyBlock& fp, const QuantizedBlock& qb, std::span<const Tensor> samples,
                                     QuantSim sim, std::array<LoraPair, 5>& d_pairs) {
  std::vector<Tensor> targets;
  for (const auto& x : samples) targets.push_back(block_forward_fp(fp, x));
  std::array<Tensor, 5> gw;
  const double loss = detail::loss_and_grads(fp, qb, samples, targets, sim, &gw);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& l = qb.layer(i);
    if (!l.lora || l.lora->empty()) {
      d_pairs[i] = {};
      continue;
    }
    d_pairs[i] = LoraPair{matmul(gw[i], transpose(l.lora->b)), matmul(transpose(l.lora->a), gw[i]), l.lora->rank};
  }
  return loss;
}

/// Fits adapters on `samples` and returns the best pair seen. `qb` is left
/// with the best adapters attached and its weights re-quantized.
inline CompensationResult fit_compensation(const ToyBlock& fp, QuantizedBlock& qb, std::span<const Tensor> samples,
                                           const LoraConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw DataError("compensation needs at least one calibration sample");
  if (fp.cfg.hidden != qb.cfg.hidden || fp.cfg.ffn != qb.cfg.ffn || fp.cfg.heads != qb.cfg.heads)
    throw ShapeError("reference and quantized blocks differ in dimensions");

  std::vector<Tensor> targets;
  for (const auto& x : samples) targets.push_back(block_forward_fp(fp, x));

  CompensationResult res;
  for (std::size_t i = 0; i < 5; ++i) qb.layer(i).lora.reset();
  refresh_weights(qb);
  res.initial_loss = detail::loss_and_grads(fp, qb, samples, targets, QuantSim::Integer, nullptr);
  res.best_loss = res.initial_loss;
  res.history.push_back(res.initial_loss);
  if (cfg.rank == 0 || cfg.steps == 0 || res.initial_loss == 0.0) return res;

  std::mt19937_64 rng(mix_seed(cfg.seed, 0x10a7));
  std::normal_distribution<double> nd(0.0, cfg.init_std);
  std::array<LoraPair, 5> cur;
  for (std::size_t i = 0; i < 5; ++i) {
    const QuantLayer& l = qb.layer(i);
    LoraPair p{Tensor({l.base.dim(0), cfg.rank}), Tensor({cfg.rank, l.base.dim(1)}), cfg.rank};
    for (double& v : p.a.data()) v = nd(rng);
    cur[i] = std::move(p);
  }
  // B = 0, so this starting point is exactly the uncompensated block.
  attach_adapters(qb, cur);
  res.pairs = cur;

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::array<Tensor, 5> gw;
    const double loss = detail::loss_and_grads(fp, qb, samples, targets, QuantSim::Integer, &gw);
    if (step > 1) res.history.push_back(loss);
    if (!std::isfinite(loss) || loss > 10.0 * res.initial_loss) {
      std::ostringstream os;
      os << "compensation diverged at step " << step << ": loss " << loss << " vs initial " << res.initial_loss
         << " (step_size " << cfg.step_size << ", rank " << cfg.rank << ")";
      throw NumericError(os.str());
    }
    if (loss < res.best_loss) {
      res.best_loss = loss;
      res.best_step = step - 1;
      res.pairs = cur;
    }
    for (std::size_t i = 0; i < 5; ++i) {
      LoraPair& p = cur[i];
      const Tensor da = matmul(gw[i], transpose(p.b));
      const Tensor db = matmul(transpose(p.a), gw[i]);
      p.a = sub(p.a, scaled(da, cfg.step_size));
      p.b = sub(p.b, scaled(db, cfg.step_size));
    }
    attach_adapters(qb, cur);
  }
  const double final_loss = detail::loss_and_grads(fp, qb, samples, targets, QuantSim::Integer, nullptr);
  res.history.push_back(final_loss);
  if (final_loss < res.best_loss) {
    res.best_loss = final_loss;
    res.best_step = cfg.steps;
    res.pairs = cur;
  }
  attach_adapters(qb, res.pairs);
  return res;
}

}  // namespace mq
