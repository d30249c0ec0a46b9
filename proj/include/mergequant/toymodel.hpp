// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Desk-scale Llama-style block and synthetic structured-outlier activations.
//
//   h = x + Out(Attn(Qkv(RMSNorm1(x))))
//   y = h + Down(SiLU(Gate(n2)) * Up(n2)),   n2 = RMSNorm2(h)
//
// Attention is causal multi-head softmax attention and always runs in reals.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mergequant/error.hpp"
#include "mergequant/mqt.hpp"
#include "mergequant/tensor.hpp"

namespace mq {

struct ToyBlockConfig {
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn = 128;
  double epsilon = 1e-6;

  void validate() const {
    if (hidden == 0 || heads == 0 || ffn == 0) throw ConfigError("toy block dimensions must be positive");
    if (hidden % heads != 0) throw ConfigError("hidden size must be divisible by the head count");
  }
  std::size_t head_dim() const noexcept { return hidden / heads; }
};

struct ToyBlock {
  ToyBlockConfig cfg;
  NormParams norm1, norm2;
  Tensor w_qkv;   ///< hidden x 3*hidden
  Tensor w_out;   ///< hidden x hidden
  Tensor w_gate;  ///< hidden x ffn
  Tensor w_up;    ///< hidden x ffn
  Tensor w_down;  ///< ffn x hidden
};

/// Deterministic seed mixing (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline Tensor random_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

/// Weights ~ N(0, 1/sqrt(fan_in)); norm multipliers 1 + N(0, 0.1).
inline ToyBlock make_toy_block(const ToyBlockConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(mix_seed(seed, 0x70b));
  ToyBlock b;
  b.cfg = cfg;
  const double sh = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
  const double sf = 1.0 / std::sqrt(static_cast<double>(cfg.ffn));
  auto gamma = [&] {
    std::vector<double> g(cfg.hidden);
    std::normal_distribution<double> d(0.0, 0.1);
    for (auto& v : g) v = 1.0 + d(rng);
    return g;
  };
  b.norm1 = NormParams::rms(gamma(), cfg.epsilon);
  b.norm2 = NormParams::rms(gamma(), cfg.epsilon);
  b.w_qkv = random_normal({cfg.hidden, 3 * cfg.hidden}, sh, rng);
  b.w_out = random_normal({cfg.hidden, cfg.hidden}, sh, rng);
  b.w_gate = random_normal({cfg.hidden, cfg.ffn}, sh, rng);
  b.w_up = random_normal({cfg.hidden, cfg.ffn}, sh, rng);
  b.w_down = random_normal({cfg.ffn, cfg.hidden}, sf, rng);
  return b;
}

inline void save_block(TensorArchive& ar, const ToyBlock& b, const std::string& prefix = "fp.") {
  ar.put(prefix + "norm1.gamma", Tensor({b.cfg.hidden}, b.norm1.gamma));
  ar.put(prefix + "norm2.gamma", Tensor({b.cfg.hidden}, b.norm2.gamma));
  ar.put(prefix + "qkv.weight", b.w_qkv);
  ar.put(prefix + "out.weight", b.w_out);
  ar.put(prefix + "gate.weight", b.w_gate);
  ar.put(prefix + "up.weight", b.w_up);
  ar.put(prefix + "down.weight", b.w_down);
}

inline ToyBlock load_block(const TensorArchive& ar, const ToyBlockConfig& cfg, const std::string& prefix = "fp.") {
  ToyBlock b;
  b.cfg = cfg;
  b.norm1 = NormParams::rms(ar.vector(prefix + "norm1.gamma"), cfg.epsilon);
  b.norm2 = NormParams::rms(ar.vector(prefix + "norm2.gamma"), cfg.epsilon);
  b.w_qkv = ar.real(prefix + "qkv.weight");
  b.w_out = ar.real(prefix + "out.weight");
  b.w_gate = ar.real(prefix + "gate.weight");
  b.w_up = ar.real(prefix + "up.weight");
  b.w_down = ar.real(prefix + "down.weight");
  if (b.w_qkv.shape() != Shape{cfg.hidden, 3 * cfg.hidden} || b.w_down.shape() != Shape{cfg.ffn, cfg.hidden})
    throw DataError("stored block weights do not match the configured dimensions");
  return b;
}

// ---------------------------------------------------------------------------
// attention and activation helpers

inline double silu(double v) { return v / (1.0 + std::exp(-v)); }
inline double silu_grad(double v) {
  const double s = 1.0 / (1.0 + std::exp(-v));
  return s * (1.0 + v * (1.0 - s));
}

struct AttentionCache {
  std::vector<Tensor> probs;  ///< per head, tokens x tokens (causal)
};

/// Causal multi-head attention over a (tokens x 3*hidden) projection.
inline Tensor attention_forward(const Tensor& qkv, std::size_t heads, AttentionCache* cache = nullptr) {
  if (qkv.rank() != 2 || qkv.cols() % 3 != 0) throw ShapeError("attention expects tokens x 3*hidden");
  const std::size_t t = qkv.rows(), n = qkv.cols() / 3, d = n / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor out({t, n});
  if (cache) cache->probs.assign(heads, Tensor());
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor p({t, t});
    for (std::size_t i = 0; i < t; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += qkv(i, h * d + c) * qkv(j, n + h * d + c);
        p(i, j) = s * inv;
        mx = std::max(mx, p(i, j));
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        p(i, j) = std::exp(p(i, j) - mx);
        z += p(i, j);
      }
      for (std::size_t j = 0; j <= i; ++j) p(i, j) /= z;
      for (std::size_t j = 0; j <= i; ++j)
        for (std::size_t c = 0; c < d; ++c) out(i, h * d + c) += p(i, j) * qkv(j, 2 * n + h * d + c);
    }
    if (cache) cache->probs[h] = std::move(p);
  }
  return out;
}

/// Gradient of attention_forward with respect to its qkv input.
inline Tensor attention_backward(const Tensor& qkv, const AttentionCache& cache, const Tensor& d_out, std::size_t heads) {
  const std::size_t t = qkv.rows(), n = qkv.cols() / 3, d = n / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor dqkv({t, 3 * n});
  std::vector<double> dp(t);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor& p = cache.probs[h];
    for (std::size_t i = 0; i < t; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          s += d_out(i, h * d + c) * qkv(j, 2 * n + h * d + c);
          dqkv(j, 2 * n + h * d + c) += p(i, j) * d_out(i, h * d + c);
        }
        dp[j] = s;
        dot += s * p(i, j);
      }
      for (std::size_t j = 0; j <= i; ++j) {
        const double ds = p(i, j) * (dp[j] - dot) * inv;
        for (std::size_t c = 0; c < d; ++c) {
          dqkv(i, h * d + c) += ds * qkv(j, n + h * d + c);
          dqkv(j, n + h * d + c) += ds * qkv(i, h * d + c);
        }
      }
    }
  }
  return dqkv;
}

/// Intermediate activations of the reference forward pass.
struct FpTrace {
  Tensor norm1;     ///< qkv input
  Tensor qkv;
  Tensor attn;      ///< out input
  Tensor h;
  Tensor norm2;     ///< gate/up input
  Tensor act;       ///< down input
  Tensor y;
};

inline FpTrace block_trace_fp(const ToyBlock& b, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != b.cfg.hidden) throw ShapeError("block input must be tokens x hidden");
  FpTrace tr;
  tr.norm1 = rmsnorm(x, b.norm1);
  tr.qkv = matmul(tr.norm1, b.w_qkv);
  tr.attn = attention_forward(tr.qkv, b.cfg.heads);
  tr.h = add(x, matmul(tr.attn, b.w_out));
  tr.norm2 = rmsnorm(tr.h, b.norm2);
  const Tensor g = matmul(tr.norm2, b.w_gate);
  const Tensor u = matmul(tr.norm2, b.w_up);
  tr.act = Tensor(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) tr.act[i] = silu(g[i]) * u[i];
  tr.y = add(tr.h, matmul(tr.act, b.w_down));
  return tr;
}

inline Tensor block_forward_fp(const ToyBlock& b, const Tensor& x) { return block_trace_fp(b, x).y; }

// ---------------------------------------------------------------------------
// synthetic data

struct OutlierProfile {
  std::size_t outlier_channel_count = 3;
  double magnitude_factor = 100.0;
  std::uint64_t seed = 0;
};

/// Outlier channel indices; fixed per profile seed, ascending.
inline std::vector<std::size_t> outlier_channels(const OutlierProfile& p, std::size_t n) {
  if (p.outlier_channel_count > n) throw ConfigError("more outlier channels than hidden channels");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(mix_seed(p.seed, 0x0c));
  for (std::size_t i = 0; i < p.outlier_channel_count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  std::vector<std::size_t> out(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(p.outlier_channel_count));
  std::sort(out.begin(), out.end());
  return out;
}

/// Gaussian N(0,1) activations (tokens x n) whose outlier channels are scaled
/// by the magnitude factor. `stream` selects independent draws with the same
/// outlier pattern.
inline Tensor generate_activations(const OutlierProfile& p, std::size_t tokens, std::size_t n, std::uint64_t stream = 0) {
  if (tokens == 0 || n == 0) throw ConfigError("activation shape must be positive");
  if (!(p.magnitude_factor > 0.0)) throw ConfigError("magnitude factor must be positive");
  std::mt19937_64 rng(mix_seed(p.seed, 0xda7a + stream * 7919));
  Tensor x = random_normal({tokens, n}, 1.0, rng);
  for (std::size_t k : outlier_channels(p, n))
    for (std::size_t t = 0; t < tokens; ++t) x(t, k) *= p.magnitude_factor;
  return x;
}

inline std::vector<Tensor> generate_samples(const OutlierProfile& p, std::size_t samples, std::size_t tokens,
                                            std::size_t n, std::uint64_t stream_base) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < samples; ++i) out.push_back(generate_activations(p, tokens, n, stream_base + i));
  return out;
}

inline void save_calibration(const std::filesystem::path& path, const std::vector<Tensor>& samples) {
  TensorArchive ar;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample.%06zu", i);
    ar.put(name, samples[i]);
  }
  ar.save(path);
}

/// Reads a calibration set: an MQT1 container of equally shaped real
/// "sample.*" tensors, or a JSON profile config that is generated on the fly.
inline std::vector<Tensor> load_calibration(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("calibration data not found: " + path.string());
  if (path.extension() == ".json") {
    std::ifstream f(path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(f);
      OutlierProfile p{j.value("outlier_channel_count", std::size_t{3}), j.value("magnitude_factor", 100.0),
                       j.value("seed", std::uint64_t{0})};
      return generate_samples(p, j.at("samples"), j.at("tokens"), j.at("hidden"), j.value("stream", std::uint64_t{0}));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ": malformed calibration profile: " + e.what());
    }
  }
  const TensorArchive ar = TensorArchive::load(path);
  std::vector<Tensor> out;
  for (const auto& [name, t] : ar.reals()) {
    if (name.rfind("sample.", 0) != 0) continue;
    if (t.rank() != 2) throw DataError(path.string() + ": calibration sample '" + name + "' is not rank 2");
    if (!out.empty() && out.front().shape() != t.shape())
      throw DataError(path.string() + ": calibration samples have mismatched shapes");
    out.push_back(t);
  }
  if (out.empty()) throw DataError(path.string() + ": container holds no calibration samples");
  return out;
}

}  // namespace mq
