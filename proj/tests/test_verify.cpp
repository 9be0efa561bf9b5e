#include <gtest/gtest.h>

#include <cmath>

#include "patchgame/verify.hpp"

using namespace patchgame;

TEST(Verify, AllChecksPass) {
  const auto checks = run_verify();
  EXPECT_EQ(checks.size(), 8u);
  for (const auto& c : checks) {
    EXPECT_TRUE(c.pass) << format_check(c);
    EXPECT_EQ(format_check(c).rfind("PASS ", 0), 0u);
  }
}

TEST(Verify, BrokenVjpIsCaught) {
  auto negated = [](std::span<const double> s, double eps, std::span<const double> w) {
    auto g = soft_rank_vjp(s, eps, w);
    for (auto& x : g) x = -x;
    return g;
  };
  const auto c = verify::grad_soft_rank_vjp(negated);
  EXPECT_FALSE(c.pass);
  EXPECT_GT(c.observed, 1.0);
  EXPECT_EQ(format_check(c).rfind("FAIL ", 0), 0u);
}

TEST(Verify, ChiSquaredPvalue) {
  EXPECT_NEAR(verify::chi_squared_pvalue({50, 50}, {0.5, 0.5}), 1.0, 1e-12);
  // statistic 4 on one degree of freedom: P(Z^2 > 4) = erfc(sqrt 2)
  EXPECT_NEAR(verify::chi_squared_pvalue({60, 40}, {0.5, 0.5}), std::erfc(std::sqrt(2.0)), 1e-12);
}
