#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <numeric>

#include "patchgame/gradcheck.hpp"
#include "patchgame/oracles.hpp"
#include "patchgame/rng.hpp"
#include "patchgame/softrank.hpp"

using namespace patchgame;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t k, double sd = 1.0) {
  std::vector<double> v(k);
  for (auto& x : v) x = sd * rng.normal();
  return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Isotonic, NonIncreasingInputUnchanged) {
  std::vector<double> v{5, 3, 3, 1, -2};
  auto sol = isotonic_regression(v);
  EXPECT_EQ(sol.values, v);
  EXPECT_EQ(sol.blocks.size(), 5u);
}

TEST(Isotonic, TwoPointAverage) {
  std::vector<double> v{1, 3};
  auto sol = isotonic_regression(v);
  EXPECT_EQ(sol.values, (std::vector<double>{2, 2}));
  ASSERT_EQ(sol.blocks.size(), 1u);
  EXPECT_EQ(sol.blocks[0], (std::pair<std::size_t, std::size_t>{0, 2}));
}

TEST(Isotonic, MatchesExhaustiveOracle) {
  Rng rng(101);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t k = 1 + rng.below(6);
    auto v = random_vec(rng, k);
    auto sol = isotonic_regression(v);
    EXPECT_LT(max_abs_diff(sol.values, oracle::isotonic_exhaustive(v)), 1e-9);
    for (std::size_t i = 1; i < k; ++i) EXPECT_GE(sol.values[i - 1], sol.values[i]);
    for (const auto& [b, e] : sol.blocks) {
      double m = 0;
      for (std::size_t i = b; i < e; ++i) m += v[i];
      EXPECT_NEAR(sol.values[b], m / static_cast<double>(e - b), 1e-12);
    }
  }
}

TEST(SoftRank, HardRanksAtVanishingEpsilon) {
  std::vector<double> s{3.0, 1.0, 2.0};
  auto r = soft_rank(s, 1e-6);
  EXPECT_NEAR(r.values[0], 3.0, 1e-3);
  EXPECT_NEAR(r.values[1], 1.0, 1e-3);
  EXPECT_NEAR(r.values[2], 2.0, 1e-3);
}

TEST(SoftRank, ConstantScoresGiveMidRank) {
  std::vector<double> s(4, 0.7);
  for (double v : soft_rank(s, 1.0).values) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(SoftRank, LargeEpsilonApproachesCentroid) {
  std::vector<double> s{3.0, -1.0, 2.0, 0.5};
  for (double v : soft_rank(s, 1e6).values) EXPECT_NEAR(v, 2.5, 1e-5);
}

TEST(SoftRank, RejectsNonFinite) {
  std::vector<double> s{1.0, std::nan("")};
  EXPECT_THROW(soft_rank(s, 1.0), std::domain_error);
  std::vector<double> ok{1.0};
  EXPECT_THROW(soft_rank(ok, 0.0), std::invalid_argument);
}

TEST(SoftRank, MatchesPermutahedronBruteForce) {
  Rng rng(7);
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  int count = 0;
  for (double eps : {0.01, 0.1, 1.0, 10.0}) {
    for (int trial = 0; trial < 40; ++trial, ++count) {
      const std::size_t k = 2 + rng.below(4);
      auto s = random_vec(rng, k, 2.0);
      std::vector<double> z(k);
      for (std::size_t i = 0; i < k; ++i) z[i] = s[i] / eps;
      worst = std::max(worst, max_abs_diff(soft_rank(s, eps).values, oracle::permutahedron_projection(z)));
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_GE(count, 100);
  EXPECT_LT(worst, 1e-6);
  EXPECT_LT(secs, 10.0);
}

TEST(SoftRank, InvariantsOverRandomInputs) {
  Rng rng(8);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t k = 1 + rng.below(12);
    const double eps = std::exp(rng.uniform(-5, 4));
    auto s = random_vec(rng, k, std::exp(rng.uniform(-3, 3)));
    auto r = soft_rank(s, eps).values;
    const double total = std::accumulate(r.begin(), r.end(), 0.0);
    EXPECT_NEAR(total, k * (k + 1) / 2.0, 1e-6);
    for (std::size_t i = 0; i < k; ++i) {
      EXPECT_GE(r[i], 1.0 - 1e-9);
      EXPECT_LE(r[i], static_cast<double>(k) + 1e-9);
      for (std::size_t j = 0; j < k; ++j) {
        if (s[i] > s[j]) {
          EXPECT_GE(r[i], r[j] - 1e-12);
        }
      }
    }
    // Shift invariance.
    const double c = rng.uniform(-50, 50);
    auto shifted = s;
    for (auto& v : shifted) v += c;
    EXPECT_LT(max_abs_diff(soft_rank(shifted, eps).values, r), 1e-8 * std::max(1.0, std::abs(c) / eps));
    // Monotonicity in one coordinate.
    const std::size_t i = rng.below(k);
    auto bumped = s;
    bumped[i] += std::abs(rng.normal());
    EXPECT_GE(soft_rank(bumped, eps).values[i], r[i] - 1e-12);
  }
}

// All-singleton PAV blocks: the isotonic Jacobian is the (sort-conjugated)
// identity, so the rank map is locally constant and the VJP vanishes.
TEST(SoftRankVjp, SingletonBlocksGiveZeroJacobian) {
  std::vector<double> s{10.0, -10.0, 0.0};
  std::vector<double> up{1.0, 2.0, 3.0};
  for (double g : soft_rank_vjp(s, 0.1, up)) EXPECT_EQ(g, 0.0);
}

TEST(SoftRankVjp, SingleBlockCentersUpstream) {
  std::vector<double> s(4, 1.0);
  std::vector<double> up{1.0, 2.0, 3.0, 6.0};
  auto g = soft_rank_vjp(s, 1.0, up);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g[i], up[i] - 3.0, 1e-12);
}

TEST(SoftRankVjp, MatchesFiniteDifferences) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const double eps = std::exp(rng.uniform(-1, 1));
    auto s = random_vec(rng, 5);
    auto w = random_vec(rng, 5);
    auto f = [&](const Tensor<double>& x) {
      return sum_all(mul(soft_rank(reshape(x, {1, 5}), eps), Tensor<double>::from({1, 5}, w)));
    };
    EXPECT_LT(grad_check(f, Tensor<double>::from({5}, s)), 1e-5);
  }
}

TEST(SoftRankTensor, BatchedRowsAreIndependent) {
  auto x = Tensor<double>::from({2, 3}, {3, 1, 2, 0, 0, 0});
  auto r = soft_rank(x, 1e-6);
  EXPECT_NEAR(r.at(0), 3.0, 1e-3);
  EXPECT_NEAR(r.at(3), 2.0, 1e-12);
}

TEST(HardRank, Basics) {
  std::vector<double> a{0.1, 0.9};
  EXPECT_EQ(hard_rank(a), (std::vector<int>{1, 2}));
  std::vector<double> b{5, 5};
  EXPECT_EQ(hard_rank(b), (std::vector<int>{1, 2}));
}

TEST(HardRank, AgreesWithSoftRankAtTinyEpsilon) {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    auto s = random_vec(rng, 2 + rng.below(15));
    auto h = hard_rank(s);
    auto r = soft_rank(s, 1e-8).values;
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(h[i], static_cast<int>(std::lround(r[i])));
  }
}
