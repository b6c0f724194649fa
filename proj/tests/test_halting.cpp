#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "alct/halting.hpp"
#include "oracle.hpp"

namespace {

using namespace alct;
using namespace alct::halting;
using V = std::vector<double>;

V random_gates(std::mt19937_64& rng, int k_max) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  V g(static_cast<std::size_t>(k_max));
  for (auto& x : g) x = u(rng);
  g.back() = 0.0;
  return g;
}

void expect_near(const V& a, const V& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "index " << i;
}

TEST(ComputeReach, ProductOfGates) {
  expect_near(compute_reach<double>(V{0.5, 0.5, 0.5, 0}), V{1, 0.5, 0.25, 0.125}, 0);
  expect_near(compute_reach<double>(V{0, 0, 0, 0}), V{1, 0, 0, 0}, 0);
  expect_near(compute_reach<double>(V{1, 1, 1, 0}), V{1, 1, 1, 1}, 0);
}

TEST(ComputeReach, RejectsEmpty) { EXPECT_THROW(compute_reach<double>(V{}), InvalidInput); }

TEST(GateVector, EnforcesInvariants) {
  EXPECT_THROW(GateVector<double>(V{}), InvalidInput);
  EXPECT_THROW(GateVector<double>(V{0.5, 0.1}), InvalidInput);
  EXPECT_THROW(GateVector<double>(V{1.5, 0}), InvalidInput);
  EXPECT_NO_THROW(GateVector<double>(V{0.5, 0}));
}

TEST(ComputeExit, TelescopesToOne) {
  const V g{0.5, 0.5, 0.5, 0};
  const auto exit = compute_exit<double>(g, compute_reach<double>(g));
  expect_near(exit, V{0.5, 0.25, 0.125, 0.125}, 0);
  expect_near(compute_exit<double>(V{0, 0, 0, 0}, V{1, 0, 0, 0}), V{1, 0, 0, 0}, 0);
  EXPECT_THROW(compute_exit<double>(V{0.5, 0}, V{1}), InvalidInput);
}

TEST(TruncationStep, Examples) {
  const V reach{1, 0.5, 0.25, 0.125};
  EXPECT_EQ(truncation_step<double>(reach, 0.3), 2);
  EXPECT_EQ(truncation_step<double>(reach, 1.0), 1);
  EXPECT_EQ(truncation_step<double>(V{1, 1, 1, 1}, 0.5), 4);
  // A reach equal to the threshold is still executed.
  EXPECT_EQ(truncation_step<double>(reach, 0.25), 3);
}

TEST(TruncationStep, RejectsBadThreshold) {
  const V reach{1, 0.5};
  EXPECT_THROW(truncation_step<double>(reach, 0.0), InvalidInput);
  EXPECT_THROW(truncation_step<double>(reach, -0.1), InvalidInput);
  EXPECT_THROW(truncation_step<double>(reach, 1.5), InvalidInput);
}

TEST(ReallocateResidual, Examples) {
  const V exit{0.5, 0.25, 0.125, 0.125};
  const V reach{1, 0.5, 0.25, 0.125};
  expect_near(reallocate_residual<double>(exit, reach, 2), V{0.5, 0.5}, 0);
  expect_near(reallocate_residual<double>(exit, reach, 4), exit, 0);
  EXPECT_THROW(reallocate_residual<double>(exit, reach, 0), InvalidInput);
  EXPECT_THROW(reallocate_residual<double>(exit, reach, 5), InvalidInput);
}

TEST(MixStates, ConvexCombination) {
  expect_near(mix_states<double>(V{0.5, 0.5}, {V{1, 0}, V{0, 1}}), V{0.5, 0.5}, 1e-15);
  expect_near(mix_states<double>(V{1.0}, {V{3, -2, 7}}), V{3, -2, 7}, 0);
  const V v{0.3, -1.2, 4.0};
  expect_near(mix_states<double>(V{0.25, 0.25, 0.5}, {v, v, v}), v, 1e-15);
  EXPECT_THROW(mix_states<double>(V{0.5}, {V{1}, V{2}}), InvalidInput);
  EXPECT_THROW(mix_states<double>(V{0.5, 0.4}, {V{1}, V{2}}), InvalidInput);
}

TEST(PruneRatio, Examples) {
  EXPECT_DOUBLE_EQ(prune_ratio(std::vector<int>(10, 5), 5), 0.0);
  EXPECT_DOUBLE_EQ(prune_ratio(std::vector<int>(10, 0), 5), 1.0);
  // Mean executed length 4.38 of 5 -> 12.4% pruned.
  std::vector<int> lengths(50, 4);
  for (int i = 0; i < 19; ++i) lengths[std::size_t(i)] = 5;
  EXPECT_NEAR(prune_ratio(lengths, 5), 0.124, 1e-12);
  EXPECT_THROW(prune_ratio(std::vector<int>{}, 5), InvalidInput);
  EXPECT_THROW(prune_ratio(std::vector<int>{6}, 5), InvalidInput);
}

TEST(Properties, MassConservationFloat64) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10000; ++trial) {
    const int k_max = 1 + int(rng() % 8);
    const auto g = random_gates(rng, k_max);
    const auto reach = compute_reach<double>(g);
    const auto exit = compute_exit<double>(g, reach);
    EXPECT_NEAR(std::accumulate(exit.begin(), exit.end(), 0.0), 1.0, 1e-9);
    for (std::size_t k = 1; k < reach.size(); ++k) ASSERT_LE(reach[k], reach[k - 1]);
  }
}

TEST(Properties, MassConservationFloat32) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10000; ++trial) {
    const auto gd = random_gates(rng, 1 + int(rng() % 8));
    std::vector<float> g(gd.begin(), gd.end());
    const auto exit = compute_exit<float>(g, compute_reach<float>(g));
    EXPECT_NEAR(std::accumulate(exit.begin(), exit.end(), 0.0), 1.0, 1e-5);
  }
}

TEST(Properties, TruncatedMassAndTailSum) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(1e-6, 1.0);
  for (int trial = 0; trial < 10000; ++trial) {
    const auto g = random_gates(rng, 1 + int(rng() % 8));
    const double tau = u(rng);
    const auto s = make_schedule(GateVector<double>(g), tau);
    EXPECT_NEAR(std::accumulate(s.hat_exit.begin(), s.hat_exit.end(), 0.0), 1.0, 1e-9);
    double tail = 0.0;
    for (std::size_t k = std::size_t(s.k_star - 1); k < s.exit.size(); ++k) tail += s.exit[k];
    EXPECT_NEAR(s.hat_exit.back() - tail, 0.0, 1e-12);
    for (int k = 0; k < s.k_star - 1; ++k) EXPECT_EQ(s.hat_exit[std::size_t(k)], s.exit[std::size_t(k)]);
  }
}

TEST(Properties, RaisingThresholdNeverExtendsExecution) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 2000; ++trial) {
    const auto reach = compute_reach<double>(random_gates(rng, 6));
    int last = 99;
    for (double tau = 0.01; tau <= 1.0; tau += 0.01) {
      const int k = truncation_step<double>(reach, tau);
      EXPECT_LE(k, last);
      last = k;
    }
  }
}

TEST(Properties, VanishingThresholdKeepsEveryStep) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    std::uniform_real_distribution<double> u(1e-3, 1.0);
    V g(5);
    for (auto& x : g) x = u(rng);
    g.back() = 0;
    const auto s = make_schedule(GateVector<double>(g), 1e-300);
    EXPECT_EQ(s.k_star, 5);
    expect_near(s.hat_exit, s.exit, 0);
    const auto limit = make_untruncated_schedule<double>(g, 5);
    expect_near(limit.hat_exit, s.exit, 0);
  }
}

TEST(Properties, MonteCarloMatchesExitDistribution) {
  const V g{0.5, 0.5, 0.5, 0};
  const auto exit = compute_exit<double>(g, compute_reach<double>(g));
  const int n = 100000;
  const auto hist = oracle::halting_mc(g, n, 1234);
  for (std::size_t k = 0; k < exit.size(); ++k) {
    const double se = std::sqrt(exit[k] * (1 - exit[k]) / n);
    EXPECT_NEAR(hist[k], exit[k], 3 * se + 1e-12);
  }
  EXPECT_DOUBLE_EQ(oracle::halting_mc(V{0, 0, 0}, 1000, 1)[0], 1.0);
  EXPECT_DOUBLE_EQ(oracle::halting_mc(V{1, 1, 0}, 1000, 1)[2], 1.0);
}

TEST(HatExitVjp, MatchesCentralDifferences) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (int trial = 0; trial < 500; ++trial) {
    const int k_max = 2 + int(rng() % 6);
    V g(static_cast<std::size_t>(k_max));
    for (auto& x : g) x = u(rng);
    g.back() = 0;
    const int k_star = 1 + int(rng() % std::size_t(k_max));
    V up(static_cast<std::size_t>(k_star));
    for (auto& x : up) x = u(rng) - 0.5;
    auto weights = [&](const V& gates) {
      const auto reach = compute_reach<double>(gates);
      return reallocate_residual<double>(compute_exit<double>(gates, reach), reach, k_star);
    };
    const auto analytic = hat_exit_vjp<double>(g, k_star, up);
    for (int j = 0; j + 1 < k_max; ++j) {
      const double h = 1e-6;
      V gp = g, gm = g;
      gp[std::size_t(j)] += h;
      gm[std::size_t(j)] -= h;
      const auto wp = weights(gp), wm = weights(gm);
      double fd = 0.0;
      for (int k = 0; k < k_star; ++k) fd += up[std::size_t(k)] * (wp[std::size_t(k)] - wm[std::size_t(k)]) / (2 * h);
      EXPECT_NEAR(analytic[std::size_t(j)], fd, 1e-8);
    }
  }
}

TEST(SanitizeGate, ClampsAndForcesTerminal) {
  EXPECT_EQ(sanitize_gate(0.7, true), 0.0);
  EXPECT_DOUBLE_EQ(sanitize_gate(0.0, false), kGateEpsilon);
  EXPECT_DOUBLE_EQ(sanitize_gate(1.0, false), 1.0 - kGateEpsilon);
  EXPECT_DOUBLE_EQ(sanitize_gate(0.3, false), 0.3);
}

}  // namespace
