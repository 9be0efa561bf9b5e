#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchgame/tensor.hpp"

namespace patchgame {

// SGD with heavy-ball momentum:
//   v <- momentum * v + g + weight_decay * p
//   p <- p - lr * v
template <class T>
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor<T>> params, double momentum, double weight_decay = 0.0)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    buffers_.reserve(params_.size());
    for (const auto& p : params_) buffers_.emplace_back(p.numel(), T(0));
  }

  // Parameters that never received a gradient are treated as g = 0.
  void step(double lr) {
    const T mu = static_cast<T>(momentum_), wd = static_cast<T>(weight_decay_), eta = static_cast<T>(lr);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto p = params_[k].mutable_data();
      auto g = params_[k].grad();
      auto& v = buffers_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const T gi = g.empty() ? T(0) : g[i];
        v[i] = mu * v[i] + gi + wd * p[i];
        p[i] -= eta * v[i];
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const std::vector<Tensor<T>>& params() const { return params_; }
  std::vector<std::vector<T>>& buffers() { return buffers_; }
  const std::vector<std::vector<T>>& buffers() const { return buffers_; }
  double momentum() const { return momentum_; }
  double weight_decay() const { return weight_decay_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> buffers_;
  double momentum_;
  double weight_decay_;
};

// Linear warmup from 0 to base_lr over warmup_epochs, then half-cosine decay
// to 0 at total_epochs.
inline double cosine_lr(int epoch, int total_epochs, double base_lr, int warmup_epochs) {
  if (warmup_epochs < 0 || warmup_epochs >= total_epochs)
    throw std::invalid_argument("cosine_lr: warmup_epochs (" + std::to_string(warmup_epochs) +
                                ") must be in [0, total_epochs=" + std::to_string(total_epochs) + ")");
  if (epoch < warmup_epochs) return base_lr * static_cast<double>(epoch) / warmup_epochs;
  const double t = static_cast<double>(epoch - warmup_epochs) / (total_epochs - warmup_epochs);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace patchgame
