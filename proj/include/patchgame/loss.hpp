#pragma once

// Similarity matrix, symmetric InfoNCE and retrieval accuracy.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchgame/ops.hpp"

namespace patchgame {

// text [B, d] x image [B, d] -> [B, B] scaled by 1 / tau.
template <class T>
Tensor<T> similarity_matrix(const Tensor<T>& text, const Tensor<T>& image, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("similarity_matrix: tau must be > 0, got " + std::to_string(tau));
  if (text.ndim() != 2 || text.shape() != image.shape())
    throw ShapeError("similarity_matrix: shapes " + shape_str(text.shape()) + " and " + shape_str(image.shape()));
  return scale(matmul(text, transpose(image)), static_cast<T>(1.0 / tau));
}

// Mean over rows of -log softmax_row at the diagonal, averaged with the same
// over columns.
template <class T>
Tensor<T> info_nce(const Tensor<T>& sim) {
  if (sim.ndim() != 2 || sim.dim(0) != sim.dim(1)) throw ShapeError("info_nce: expected square matrix, got " + shape_str(sim.shape()));
  const std::size_t b = sim.dim(0);
  std::vector<T> eye(b * b, T(0));
  for (std::size_t i = 0; i < b; ++i) eye[i * b + i] = T(1);
  const auto diag = Tensor<T>::from({b, b}, std::move(eye));
  const T w = static_cast<T>(-0.5 / static_cast<double>(b));
  auto text = sum_all(mul(log_softmax(sim), diag));
  auto vision = sum_all(mul(log_softmax(transpose(sim)), diag));
  return scale(add(text, vision), w);
}

// Fraction of rows whose own column is among the k highest entries. Ties
// rank the lower column first.
template <class T>
double topk_accuracy(const Tensor<T>& sim, std::size_t k, bool by_column = false) {
  const std::size_t b = sim.dim(0);
  const auto v = sim.data();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b; ++i) {
    auto at = [&](std::size_t j) { return by_column ? v[j * b + i] : v[i * b + j]; };
    const T own = at(i);
    std::size_t better = 0;
    for (std::size_t j = 0; j < b; ++j)
      if (at(j) > own || (at(j) == own && j < i)) ++better;
    hits += better < k;
  }
  return static_cast<double>(hits) / static_cast<double>(b);
}

}  // namespace patchgame
