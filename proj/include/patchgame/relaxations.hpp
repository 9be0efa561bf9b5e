#pragma once

// Gumbel-softmax and relaxed Bernoulli sampling with straight-through
// estimators, plus the Gumbel temperature schedule.
//
// All noise comes from an explicit Rng. Each sampler also has a *_with_noise
// form taking pre-drawn noise, which is what gradient checks use to freeze
// the stochastic part.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "patchgame/ops.hpp"
#include "patchgame/rng.hpp"

namespace patchgame {

struct GumbelConfig {
  double tau = 1.0;   // relaxation temperature, > 0
  bool hard = true;   // one-hot forward, relaxed backward
};

struct TemperatureSchedule {
  double start = 5.0;
  double end = 1.0;
  int anneal_epochs = 50;
};

inline constexpr double kUniformClamp = 1e-12;
inline constexpr double kProbClamp = 1e-6;

// Cosine interpolation start -> end over anneal_epochs, then constant.
inline double temperature_at(int epoch, const TemperatureSchedule& s) {
  if (epoch >= s.anneal_epochs || s.anneal_epochs <= 0) return s.end;
  const double t = static_cast<double>(std::max(epoch, 0)) / s.anneal_epochs;
  return s.end + (s.start - s.end) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

template <class T>
Tensor<T> sample_gumbel(const Shape& shape, Rng& rng) {
  Buffer<T> g(shape_numel(shape));
  for (auto& v : g) {
    const double u = std::clamp(rng.uniform(), kUniformClamp, 1.0 - kUniformClamp);
    v = static_cast<T>(-std::log(-std::log(u)));
  }
  return Tensor<T>::adopt(shape, std::move(g));
}

// Standard logistic draws log(u) - log(1 - u).
template <class T>
Tensor<T> sample_logistic(const Shape& shape, Rng& rng) {
  Buffer<T> l(shape_numel(shape));
  for (auto& v : l) {
    const double u = std::clamp(rng.uniform(), kUniformClamp, 1.0 - kUniformClamp);
    v = static_cast<T>(std::log(u) - std::log1p(-u));
  }
  return Tensor<T>::adopt(shape, std::move(l));
}

namespace detail {
inline void check_tau(double tau, const char* op) {
  if (!(tau > 0.0)) throw std::invalid_argument(std::string(op) + ": temperature must be > 0, got " + std::to_string(tau));
}
}  // namespace detail

// softmax((logits + noise) / tau) over the last axis; in hard mode the forward
// value is the one-hot argmax of logits + noise (lowest index wins ties).
template <class T>
Tensor<T> gumbel_softmax_with_noise(const Tensor<T>& logits, const Tensor<T>& noise,
                                    const GumbelConfig& cfg) {
  detail::check_tau(cfg.tau, "gumbel_softmax");
  auto perturbed = add(logits, noise);
  auto soft = softmax(scale(perturbed, static_cast<T>(1.0 / cfg.tau)));
  if (!cfg.hard) return soft;
  const std::size_t v = logits.shape().back();
  Buffer<T> one_hot(soft.numel(), T(0));
  const auto pv = perturbed.data();
  for (std::size_t r = 0; r < soft.numel() / v; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < v; ++j)
      if (pv[r * v + j] > pv[r * v + best]) best = j;
    one_hot[r * v + best] = T(1);
  }
  return straight_through(Tensor<T>::adopt(soft.shape(), std::move(one_hot)), soft);
}

template <class T>
Tensor<T> gumbel_softmax(const Tensor<T>& logits, const GumbelConfig& cfg, Rng& rng) {
  return gumbel_softmax_with_noise(logits, sample_gumbel<T>(logits.shape(), rng), cfg);
}

// Binary concrete relaxation of Bernoulli(prob):
//   sigmoid((log p - log(1 - p) + L) / tau), L ~ Logistic(0, 1).
// Hard mode thresholds at 0.5, which makes the forward value an exact
// Bernoulli(p) draw.
template <class T>
Tensor<T> bernoulli_relaxed_with_noise(const Tensor<T>& prob, const Tensor<T>& noise,
                                       const GumbelConfig& cfg) {
  detail::check_tau(cfg.tau, "bernoulli_relaxed");
  for (T p : prob.data())
    if (!(p >= T(-1e-9) && p <= T(1 + 1e-9)))
      throw std::domain_error("bernoulli_relaxed: probability " + std::to_string(static_cast<double>(p)) +
                              " outside [0,1]");
  auto p = clamp(prob, static_cast<T>(kProbClamp), static_cast<T>(1.0 - kProbClamp));
  auto logit = sub(log(p), log(add_scalar(scale(p, T(-1)), T(1))));
  auto shifted = add(logit, noise);
  auto soft = sigmoid(scale(shifted, static_cast<T>(1.0 / cfg.tau)));
  if (!cfg.hard) return soft;
  Buffer<T> hard(soft.numel());
  for (std::size_t i = 0; i < hard.size(); ++i) hard[i] = shifted.data()[i] > T(0) ? T(1) : T(0);
  return straight_through(Tensor<T>::adopt(soft.shape(), std::move(hard)), soft);
}

template <class T>
Tensor<T> bernoulli_relaxed(const Tensor<T>& prob, const GumbelConfig& cfg, Rng& rng) {
  return bernoulli_relaxed_with_noise(prob, sample_logistic<T>(prob.shape(), rng), cfg);
}

}  // namespace patchgame
