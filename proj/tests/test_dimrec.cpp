// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <limits>
#include <map>
#include <random>
#include <set>

#include "mergequant/dimrec.hpp"
#include "test_util.hpp"

namespace mq {
namespace {

using Idx = std::vector<std::size_t>;

// Enumerates candidates and sorts by (H_kk, index).
Idx brute_force_prune(const Idx& outliers, std::size_t m, const std::vector<double>& h) {
  const std::size_t n = h.size();
  std::set<std::size_t> out(outliers.begin(), outliers.end()), nb;
  for (auto k : outliers) {
    if (k > 0) nb.insert(k - 1);
    if (k + 1 < n) nb.insert(k + 1);
  }
  for (auto k : out) nb.erase(k);
  std::vector<std::pair<double, std::size_t>> neigh, rest;
  for (std::size_t k = 0; k < n; ++k) {
    if (out.count(k)) continue;
    (nb.count(k) ? neigh : rest).push_back({h[k], k});
  }
  std::sort(neigh.begin(), neigh.end());
  std::sort(rest.begin(), rest.end());
  Idx chosen;
  for (std::size_t i = 0; i < std::min(m, neigh.size()); ++i) chosen.push_back(neigh[i].second);
  for (std::size_t i = 0; chosen.size() < m; ++i) chosen.push_back(rest.at(i).second);
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

TEST(Threshold, HandComputed) {
  EXPECT_NEAR(compute_threshold(std::vector<double>{1, 1, 1, 1, 10}, 1.0), 6.4, 1e-12);
  EXPECT_NEAR(compute_threshold(std::vector<double>{1, 1, 1, 1, 10}, 0.0), 2.8, 1e-12);
  const std::vector<double> s{1, 1, 1, 1, 10};
  const auto plan = build_plan(s, 100.0, std::vector<double>(5, 1.0));
  EXPECT_TRUE(plan.outliers.empty());
  EXPECT_TRUE(plan.is_identity());
}

TEST(Split, HandComputed) {
  const auto a = split_strong_params(std::vector<double>{10}, 6.4);
  ASSERT_EQ(a.splits.at(0).size(), 2u);
  EXPECT_NEAR(a.splits.at(0)[0], 3.6, 1e-12);
  EXPECT_EQ(a.splits.at(0)[1], 6.4);
  EXPECT_EQ(a.extra_slots(), 1u);
  const auto b = split_strong_params(std::vector<double>{20}, 6);
  EXPECT_EQ(b.splits.at(0), (std::vector<double>{2, 6, 6, 6}));
  EXPECT_EQ(b.extra_slots(), 3u);
  const auto c = split_strong_params(std::vector<double>{6.4, 1}, 6.4);
  EXPECT_TRUE(c.splits.empty());
  const auto d = split_strong_params(std::vector<double>{12.8}, 6.4);
  EXPECT_EQ(d.splits.at(0), (std::vector<double>{6.4, 6.4}));
  EXPECT_THROW(split_strong_params(std::vector<double>{1}, 0.0), ConfigError);
}

TEST(Neighbors, ThreeCases) {
  EXPECT_EQ(identify_neighbors(Idx{3, 4}, 8), (Idx{2, 5}));
  EXPECT_EQ(identify_neighbors(Idx{2, 4}, 8), (Idx{1, 3, 5}));
  EXPECT_EQ(identify_neighbors(Idx{0}, 8), (Idx{1}));
  EXPECT_EQ(identify_neighbors(Idx{7}, 8), (Idx{6}));
  EXPECT_THROW(identify_neighbors(Idx{8}, 8), ShapeError);
}

TEST(Prune, SchemesMatchBruteForce) {
  struct Case {
    Idx outliers;
    std::size_t m;
    std::vector<double> h;
  };
  const std::vector<Case> cases{
      {{2, 4}, 2, {5, 3, 9, 1, 9, 2, 0.5, 7}},   // N=3 > M=2, shared middle neighbor
      {{3, 4}, 2, {1, 1, 9, 9, 9, 0.1, 1, 1}},   // N=M=2, adjacency
      {{0}, 3, {9, 8, 0.3, 0.2, 5, 0.1, 4, 4}},  // N=1 < M=3, boundary
      {{7}, 1, {1, 2, 3, 4, 5, 6, 0.1, 9}},      // N=M=1, right boundary
      {{1, 5}, 2, {2, 2, 2, 0, 2, 9, 2, 2}},     // N=4 > M, ties resolved to lower index
      {{0, 1}, 4, {9, 9, 3, 3, 3, 3, 3, 3}},     // N=1 < M, ties in the fallback pool
  };
  for (const auto& c : cases) {
    const Idx nb = identify_neighbors(c.outliers, c.h.size());
    EXPECT_EQ(select_prune_channels(nb, c.m, c.h, c.outliers), brute_force_prune(c.outliers, c.m, c.h));
  }
  // N = M ignores the Hessian entirely.
  EXPECT_EQ(select_prune_channels(Idx{2, 5}, 2, std::vector<double>{0, 0, 9, 9, 9, 9, 0, 0}, Idx{3, 4}), (Idx{2, 5}));
}

TEST(Prune, RandomizedAgainstBruteForce) {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 4 + rng() % 12;
    std::vector<double> h(n);
    for (auto& v : h) v = double(rng() % 5);  // small range forces ties
    Idx outliers;
    for (std::size_t k = 0; k < n; ++k)
      if (rng() % 4 == 0) outliers.push_back(k);
    const std::size_t m = rng() % (n - outliers.size() + 1);
    const Idx nb = identify_neighbors(outliers, n);
    EXPECT_EQ(select_prune_channels(nb, m, h, outliers), brute_force_prune(outliers, m, h));
  }
}

TEST(Prune, InsufficientCandidatesFail) {
  EXPECT_THROW(select_prune_channels(Idx{1}, 3, std::vector<double>{1, 1, 1}, Idx{0}), ConfigError);
}

TEST(Plan, IdentityWithoutStrongParameters) {
  const auto p = build_plan(std::vector<double>(8, 1.0), 5.0, std::vector<double>(8, 1.0));
  EXPECT_TRUE(p.is_identity());
  EXPECT_EQ(p.gather, (Idx{0, 1, 2, 3, 4, 5, 6, 7}));
}

TEST(Plan, OneSplitOnePrune) {
  const std::vector<double> s{1, 1, 1, 1, 10, 1, 1, 1};
  const std::vector<double> h{1, 1, 1, 5, 1, 2, 1, 1};
  const auto p = build_plan(s, 1.0, h);
  EXPECT_EQ(p.outliers, (Idx{4}));
  EXPECT_EQ(p.neighbors, (Idx{3, 5}));
  EXPECT_EQ(p.pruned, (Idx{5}));
  EXPECT_EQ(p.gather, (Idx{0, 1, 2, 3, 4, 6, 7, 4}));
  EXPECT_EQ(p.gather.size(), s.size());
}

TEST(Plan, InvariantsOnRandomScales) {
  std::mt19937_64 rng(42);
  std::lognormal_distribution<double> ln(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 8 + rng() % 57;
    std::vector<double> s(n), h(n);
    for (auto& v : s) v = ln(rng);
    for (std::size_t i = 0; i < 1 + rng() % 3; ++i) s[rng() % n] *= 20.0 + double(rng() % 100);
    for (auto& v : h) v = ln(rng);
    const double alpha = std::uniform_real_distribution<double>(0.5, 5.0)(rng);
    ReconstructionPlan p;
    try {
      p = build_plan(s, alpha, h);
    } catch (const ConfigError&) {
      continue;  // pathological M; covered by InsufficientCandidatesFail
    }
    const std::set<std::size_t> out(p.outliers.begin(), p.outliers.end());
    std::size_t m = 0;
    for (const auto& [k, pieces] : p.splits) {
      ASSERT_GT(s[k], p.threshold);
      for (double piece : pieces) {
        ASSERT_GT(piece, 0.0);
        ASSERT_LE(piece, p.threshold);
      }
      ASSERT_EQ(detail::sum_pieces(pieces), s[k]);
      m += pieces.size() - 1;
    }
    ASSERT_EQ(m, p.extra_slots());
    ASSERT_EQ(p.pruned.size(), m);
    for (auto k : p.pruned) ASSERT_FALSE(out.count(k));
    ASSERT_EQ(p.gather.size(), n);
    std::map<std::size_t, std::size_t> count;
    for (auto g : p.gather) ++count[g];
    for (std::size_t k = 0; k < n; ++k) {
      const bool pruned = std::find(p.pruned.begin(), p.pruned.end(), k) != p.pruned.end();
      const std::size_t want = pruned ? 0 : p.splits.count(k) ? p.splits.at(k).size() : 1;
      ASSERT_EQ(count[k], want);
    }
    for (double v : p.slot_scales) ASSERT_LE(v, p.threshold);
  }
}

TEST(Gather, LiteralAndShapes) {
  ReconstructionPlan p;
  p.dim = 4;
  p.gather = {0, 1, 1, 3};
  const Tensor y = reconstruct_activation(Tensor::from_rows({{10, 20, 30, 40}}), p);
  EXPECT_EQ(y.vec(), (std::vector<double>{10, 20, 20, 40}));
  std::mt19937_64 rng(43);
  const Tensor x3 = testing::random_tensor({2, 3, 4}, rng);
  EXPECT_EQ(reconstruct_activation(x3, p).shape(), (Shape{2, 3, 4}));
  ReconstructionPlan id;
  id.dim = 4;
  id.gather = {0, 1, 2, 3};
  EXPECT_EQ(reconstruct_activation(x3, id), x3);
  EXPECT_THROW(reconstruct_activation(Tensor({1, 5}), p), ShapeError);
  p.gather = {0, 1, 9, 3};
  EXPECT_THROW(reconstruct_activation(Tensor({1, 4}), p), ShapeError);
}

struct Instance {
  Tensor x;  // norm outputs before the multiplier is folded in
  NormParams norm;
  std::vector<double> scales, hessian;
  Tensor w;
};

Instance make_instance(std::uint64_t seed, std::size_t n = 32) {
  std::mt19937_64 rng(seed);
  Instance in{testing::random_tensor({12, n}, rng), NormParams::rms(testing::random_positive(n, rng, 0.5, 1.5)),
              testing::random_positive(n, rng, 0.05, 0.2), testing::random_positive(n, rng), testing::random_tensor({n, 8}, rng)};
  in.scales[3] = 4.0;
  in.scales[n - 1] = 2.5;
  return in;
}

// Real output of the reconstructed layer before weight rounding.
Tensor reconstructed_output(const Instance& in, const ReconstructionPlan& plan) {
  const auto f = reconstruct_norm(fold_quant_into_norm(in.norm, in.scales), plan);
  const auto q = folded_norm_forward(in.x, f, 4);
  return matmul(q.ints.to_real(), reconstructed_migrated_weight(in.w, plan));
}

TEST(Reconstruct, LosslessWithoutPruning) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Instance in = make_instance(seed);
    ReconstructionPlan plan = build_plan(in.scales, 1.0, in.hessian);
    ASSERT_FALSE(plan.splits.empty());
    // Drop pruning: gather every channel once, then the extra split slots.
    ReconstructionPlan np = plan;
    np.pruned.clear();
    np.gather.clear();
    np.slot_scales.clear();
    for (std::size_t k = 0; k < in.scales.size(); ++k) {
      np.gather.push_back(k);
      np.slot_scales.push_back(plan.splits.count(k) ? plan.splits.at(k)[0] : in.scales[k]);
    }
    for (const auto& [k, pieces] : plan.splits)
      for (std::size_t i = 1; i < pieces.size(); ++i) {
        np.gather.push_back(k);
        np.slot_scales.push_back(pieces[i]);
      }
    const auto q = folded_norm_forward(in.x, fold_quant_into_norm(in.norm, in.scales), 4);
    const Tensor original = matmul(q.ints.to_real(), migrate_rows(in.w, in.scales));
    EXPECT_LE(testing::rel_err(reconstructed_output(in, np), original), 1e-9);
  }
}

TEST(Reconstruct, PruningErrorIdentity) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Instance in = make_instance(seed);
    const ReconstructionPlan plan = build_plan(in.scales, 1.0, in.hessian);
    ASSERT_FALSE(plan.pruned.empty());
    const auto q = folded_norm_forward(in.x, fold_quant_into_norm(in.norm, in.scales), 4);
    const Tensor xi = q.ints.to_real();
    const Tensor original = matmul(xi, migrate_rows(in.w, in.scales));
    Tensor restored = reconstructed_output(in, plan);
    for (auto k : plan.pruned)
      for (std::size_t i = 0; i < xi.rows(); ++i)
        for (std::size_t c = 0; c < in.w.cols(); ++c) restored(i, c) += in.scales[k] * xi(i, k) * in.w(k, c);
    EXPECT_LE(testing::rel_err(restored, original), 1e-9);
  }
}

TEST(Reconstruct, DuplicatesEmitIdenticalIntegers) {
  const Instance in = make_instance(7);
  const ReconstructionPlan plan = build_plan(in.scales, 1.0, in.hessian);
  const auto f = reconstruct_norm(fold_quant_into_norm(in.norm, in.scales), plan);
  const auto q = folded_norm_forward(in.x, f, 4);
  for (std::size_t a = 0; a < plan.gather.size(); ++a)
    for (std::size_t b = a + 1; b < plan.gather.size(); ++b)
      if (plan.gather[a] == plan.gather[b])
        for (std::size_t r = 0; r < in.x.rows(); ++r) EXPECT_EQ(q.ints(r, a), q.ints(r, b));
}

TEST(Reconstruct, FoldedWeightBoundAndDimensions) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Instance in = make_instance(seed);
    const ReconstructionPlan plan = build_plan(in.scales, 1.0, in.hessian);
    const auto f = fold_quant_into_norm(in.norm, in.scales);
    auto [nf, q] = reconstruct_norm_and_weights(f, in.w, plan, {});
    EXPECT_EQ(nf.slots(), in.scales.size());
    EXPECT_EQ(q.in_features(), in.scales.size());
    double wmax = 0.0, fmax = 0.0;
    for (double v : in.w.data()) wmax = std::max(wmax, std::abs(v));
    for (double v : reconstructed_migrated_weight(in.w, plan).data()) fmax = std::max(fmax, std::abs(v));
    EXPECT_LE(fmax, plan.threshold * wmax);
    EXPECT_EQ(q.folded_row_scales, plan.slot_scales);
  }
}

TEST(Reconstruct, EmptyPlanEqualsPlainFold) {
  const Instance in = make_instance(3);
  const ReconstructionPlan plan = build_plan(in.scales, 1e9, in.hessian);
  ASSERT_TRUE(plan.is_identity());
  const auto f = fold_quant_into_norm(in.norm, in.scales);
  auto [nf, q] = reconstruct_norm_and_weights(f, in.w, plan, {});
  const auto plain = fold_dequant_into_weights(in.w, in.scales, {});
  EXPECT_EQ(q.w_int, plain.w_int);
  EXPECT_EQ(q.w_scales, plain.w_scales);
  EXPECT_EQ(nf.folded_gamma, f.folded_gamma);
}

TEST(Reconstruct, RejectsForeignPlan) {
  const Instance in = make_instance(4);
  const ReconstructionPlan plan = build_plan(in.scales, 1.0, in.hessian);
  std::vector<double> other = in.scales;
  other[3] *= 1.5;
  EXPECT_THROW(reconstruct_norm_and_weights(fold_quant_into_norm(in.norm, other), in.w, plan, {}), ConfigError);
}

TEST(Plan, JsonRoundTrip) {
  const Instance in = make_instance(5);
  const ReconstructionPlan plan = build_plan(in.scales, 1.0, in.hessian);
  const auto j = to_json(plan);
  EXPECT_TRUE(j.contains("T"));
  EXPECT_TRUE(j.contains("splits"));
  const ReconstructionPlan back = plan_from_json(j);
  EXPECT_EQ(back.gather, plan.gather);
  EXPECT_EQ(back.pruned, plan.pruned);
  EXPECT_EQ(back.splits, plan.splits);
  EXPECT_EQ(back.slot_scales, plan.slot_scales);
  EXPECT_EQ(back.threshold, plan.threshold);
}

TEST(Plan, JsonRoundTripWithInfiniteAlpha) {
  const Instance in = make_instance(6);
  const double inf = std::numeric_limits<double>::infinity();
  const ReconstructionPlan plan = build_plan(in.scales, inf, in.hessian);
  const ReconstructionPlan back = plan_from_json(nlohmann::json::parse(to_json(plan).dump()));
  EXPECT_EQ(back.alpha, inf);
  EXPECT_EQ(back.threshold, inf);
  EXPECT_EQ(back.gather, plan.gather);
}

}  // namespace
}  // namespace mq
