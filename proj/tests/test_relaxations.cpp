#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <numbers>

#include "patchgame/relaxations.hpp"

using namespace patchgame;
using TD = Tensor<double>;

namespace {

std::vector<double> softmax_ref(const std::vector<double>& l) {
  double m = *std::max_element(l.begin(), l.end()), z = 0;
  std::vector<double> p(l.size());
  for (std::size_t i = 0; i < l.size(); ++i) z += (p[i] = std::exp(l[i] - m));
  for (auto& v : p) v /= z;
  return p;
}

std::vector<double> hard_frequencies(const std::vector<double>& logits, std::size_t draws, std::uint64_t seed) {
  const std::size_t v = logits.size();
  std::vector<double> tiled(draws * v);
  for (std::size_t d = 0; d < draws; ++d) std::copy(logits.begin(), logits.end(), tiled.begin() + d * v);
  Rng rng(seed);
  auto y = gumbel_softmax(TD::from({draws, v}, std::move(tiled)), {1.0, true}, rng);
  std::vector<double> counts(v, 0.0);
  for (std::size_t d = 0; d < draws; ++d)
    for (std::size_t j = 0; j < v; ++j) counts[j] += y.at(d * v + j);
  return counts;
}

double chi_squared_p(const std::vector<double>& counts, const std::vector<double>& probs) {
  double n = 0, stat = 0;
  for (double c : counts) n += c;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double e = n * probs[i];
    stat += (counts[i] - e) * (counts[i] - e) / e;
  }
  boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

}  // namespace

TEST(Gumbel, SeededDrawsAreReproducible) {
  Rng a(42), b(42);
  EXPECT_EQ(sample_gumbel<double>({100}, a).to_vector(), sample_gumbel<double>({100}, b).to_vector());
}

TEST(Gumbel, MomentsMatchStandardGumbel) {
  Rng rng(1);
  auto g = sample_gumbel<double>({1000000}, rng);
  double m = 0, v = 0;
  for (double x : g.data()) m += x;
  m /= g.numel();
  for (double x : g.data()) v += (x - m) * (x - m);
  v /= g.numel();
  EXPECT_NEAR(m, std::numbers::egamma, 0.01);
  EXPECT_NEAR(v, std::numbers::pi * std::numbers::pi / 6.0, 0.02);
}

TEST(GumbelSoftmax, HardModeIsOneHot) {
  Rng rng(2);
  auto logits = TD::from({3, 5}, {0.1, 2, -1, 0, 0, 1, 1, 1, 1, 1, -3, 4, 0, 0, 2});
  auto y = gumbel_softmax(logits, {0.5, true}, rng);
  for (std::size_t r = 0; r < 3; ++r) {
    int ones = 0;
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      const double v = y.at(r * 5 + j);
      EXPECT_TRUE(v == 0.0 || v == 1.0);
      ones += v == 1.0;
      s += v;
    }
    EXPECT_EQ(ones, 1);
    EXPECT_EQ(s, 1.0);
  }
}

TEST(GumbelSoftmax, DominantLogitFrequency) {
  auto counts = hard_frequencies({10, 0, 0, 0}, 100000, 3);
  const double expected = std::exp(10.0) / (std::exp(10.0) + 3.0);
  EXPECT_NEAR(expected, 0.99986, 1e-5);
  EXPECT_NEAR(counts[0] / 100000.0, expected, 0.002);
}

TEST(GumbelSoftmax, UniformLogitsFrequencies) {
  auto counts = hard_frequencies({0, 0, 0, 0}, 100000, 4);
  for (double c : counts) EXPECT_NEAR(c / 100000.0, 0.25, 0.01);
}

TEST(GumbelSoftmax, ChiSquaredAgainstSoftmax) {
  const std::vector<double> logits{1.0, -0.5, 0.3, 2.0, 0.0, -1.2};
  auto counts = hard_frequencies(logits, 100000, 5);
  EXPECT_GT(chi_squared_p(counts, softmax_ref(logits)), 0.001);
}

TEST(GumbelSoftmax, SoftRowsSumToOne) {
  Rng rng(6);
  std::vector<double> l(40);
  for (auto& v : l) v = 3 * rng.normal();
  auto y = gumbel_softmax(TD::from({5, 8}, l), {0.3, false}, rng);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_GT(y.at(r * 8 + j), 0.0 - 1e-300);
      s += y.at(r * 8 + j);
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(GumbelSoftmax, StraightThroughGradientEqualsSoftGradient) {
  Rng rng(7);
  auto noise = sample_gumbel<double>({2, 6}, rng);
  std::vector<double> l(12), w(12);
  for (auto& v : l) v = rng.normal();
  for (auto& v : w) v = rng.normal();
  auto weights = TD::from({2, 6}, w);
  auto grad_for = [&](bool hard) {
    auto x = TD::from({2, 6}, l, true);
    backward(sum_all(mul(gumbel_softmax_with_noise(x, noise, {0.7, hard}), weights)));
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  EXPECT_EQ(grad_for(true), grad_for(false));
}

TEST(GumbelSoftmax, LowTemperatureApproachesOneHot) {
  Rng rng(8);
  auto noise = TD::zeros({1, 4});
  auto logits = TD::from({1, 4}, {0.0, 1.0, -1.0, 2.0});  // margin 1
  auto soft = gumbel_softmax_with_noise(logits, noise, {1e-3, false});
  auto hard = gumbel_softmax_with_noise(logits, noise, {1e-3, true});
  double gap = 0;
  for (std::size_t j = 0; j < 4; ++j) gap = std::max(gap, std::abs(soft.at(j) - hard.at(j)));
  EXPECT_LT(gap, 1e-6);
}

TEST(GumbelSoftmax, TiesBreakToLowestIndex) {
  auto y = gumbel_softmax_with_noise(TD::from({1, 3}, {1, 1, 1}), TD::zeros({1, 3}), {1.0, true});
  EXPECT_EQ(y.to_vector(), (std::vector<double>{1, 0, 0}));
}

TEST(GumbelSoftmax, RejectsNonPositiveTemperature) {
  Rng rng(0);
  EXPECT_THROW(gumbel_softmax(TD::zeros({1, 2}), {0.0, true}, rng), std::invalid_argument);
}

namespace {
double bernoulli_mean(double p, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  auto y = bernoulli_relaxed(TD::full({n}, p), {1.0, true}, rng);
  double s = 0;
  for (double v : y.data()) s += v;
  return s / static_cast<double>(n);
}
}  // namespace

TEST(Bernoulli, DegenerateZero) {
  EXPECT_LE(bernoulli_mean(0.0, 100000, 1) * 100000, 5.0);
}

TEST(Bernoulli, HalfProbability) { EXPECT_NEAR(bernoulli_mean(0.5, 100000, 2), 0.5, 0.01); }

TEST(Bernoulli, NinetyPercent) { EXPECT_NEAR(bernoulli_mean(0.9, 100000, 3), 0.9, 0.01); }

TEST(Bernoulli, RejectsOutOfRange) {
  Rng rng(0);
  EXPECT_THROW(bernoulli_relaxed(TD::full({1}, 1.1), {1.0, true}, rng), std::domain_error);
  EXPECT_THROW(bernoulli_relaxed(TD::full({1}, -0.01), {1.0, true}, rng), std::domain_error);
  EXPECT_NO_THROW(bernoulli_relaxed(TD::full({1}, 1.0 + 1e-10), {1.0, true}, rng));
}

TEST(Bernoulli, SoftModeIsSigmoidOfShiftedLogit) {
  auto p = TD::from({2}, {0.3, 0.8});
  auto noise = TD::from({2}, {0.5, -1.0});
  auto y = bernoulli_relaxed_with_noise(p, noise, {2.0, false});
  for (std::size_t i = 0; i < 2; ++i) {
    const double pv = p.at(i);
    const double z = (std::log(pv) - std::log(1 - pv) + noise.at(i)) / 2.0;
    EXPECT_NEAR(y.at(i), 1.0 / (1.0 + std::exp(-z)), 1e-14);
  }
}

TEST(Bernoulli, StraightThroughGradientEqualsSoftGradient) {
  Rng rng(11);
  auto noise = sample_logistic<double>({6}, rng);
  std::vector<double> p{0.1, 0.3, 0.5, 0.6, 0.9, 0.95};
  auto grad_for = [&](bool hard) {
    auto x = TD::from({6}, p, true);
    backward(sum_all(mul(bernoulli_relaxed_with_noise(x, noise, {1.3, hard}), TD::from({6}, {1, -2, 3, 0.5, 1, 2}))));
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  EXPECT_EQ(grad_for(true), grad_for(false));
}

TEST(TemperatureSchedule, CosineAnnealing) {
  TemperatureSchedule s{5.0, 1.0, 50};
  EXPECT_DOUBLE_EQ(temperature_at(0, s), 5.0);
  EXPECT_DOUBLE_EQ(temperature_at(50, s), 1.0);
  EXPECT_DOUBLE_EQ(temperature_at(99, s), 1.0);
  EXPECT_NEAR(temperature_at(25, s), 3.0, 1e-12);
  for (int e = 1; e < 60; ++e) EXPECT_LE(temperature_at(e, s), temperature_at(e - 1, s));
}
