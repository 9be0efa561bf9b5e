#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "patchgame/tensor.hpp"

namespace patchgame {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares backward() against central differences of f around x. f must be
// deterministic: any stochastic node inside it has to use frozen noise.
// Relative error is |a - n| / max(1, |a|, |n|); non-finite values propagate.
inline GradCheckReport grad_check_report(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                         const Tensor<double>& x, double step = 1e-5) {
  auto leaf = Tensor<double>::from(x.shape(), x.to_vector(), true);
  auto y = f(leaf);
  backward(y);
  std::vector<double> analytic(leaf.numel(), 0.0);
  if (!leaf.grad().empty()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

  GradCheckReport rep;
  std::vector<double> probe = x.to_vector();
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double fp = f(Tensor<double>::from(x.shape(), probe)).item();
    probe[i] = orig - step;
    const double fm = f(Tensor<double>::from(x.shape(), probe)).item();
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double err = std::abs(analytic[i] - numeric) /
                       std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    if (std::isnan(rep.max_rel_error)) continue;
    if (std::isnan(err) || err > rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst_index = i;
      rep.analytic = analytic[i];
      rep.numeric = numeric;
    }
  }
  return rep;
}

inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                         const Tensor<double>& x, double step = 1e-5) {
  return grad_check_report(f, x, step).max_rel_error;
}

// Variant for closed-over leaves (network parameters): perturbs each listed
// tensor in place. `stride` > 1 checks every stride-th coordinate only.
inline GradCheckReport grad_check_params(const std::function<Tensor<double>()>& f,
                                         std::vector<Tensor<double>> params, double step = 1e-5,
                                         std::size_t stride = 1) {
  for (auto& p : params) p.zero_grad();
  backward(f());
  GradCheckReport rep;
  std::size_t flat = 0;
  for (auto& p : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (!p.grad().empty()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); i += stride, flat += stride) {
      const double orig = values[i];
      values[i] = orig + step;
      const double fp = f().item();
      values[i] = orig - step;
      const double fm = f().item();
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double err = std::abs(analytic[i] - numeric) /
                         std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      if (std::isnan(rep.max_rel_error)) continue;
      if (std::isnan(err) || err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst_index = flat;
        rep.analytic = analytic[i];
        rep.numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace patchgame
