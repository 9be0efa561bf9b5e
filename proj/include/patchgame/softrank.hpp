#pragma once

// Differentiable ranking by Euclidean projection onto the permutahedron.
//
// soft_rank(s, eps) = argmin_{mu in P(1..K)} 0.5 * ||mu - s/eps||^2
//
// With z = s/eps sorted descending (permutation sigma) and w = (K, ..., 1),
// the projection is z - v[sigma^-1] where v is the non-increasing isotonic
// regression of z_sorted - w. PAV solves that in O(K), the sort dominates.
// The Jacobian of v is block-wise averaging over the PAV blocks, so the
// Jacobian of the rank map is (I - blockavg) conjugated by sigma, over eps.
//
// Orientation: the largest score receives rank K.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "patchgame/ops.hpp"

namespace patchgame {

struct IsotonicSolution {
  std::vector<double> values;
  // Half-open [begin, end) index ranges of the constant blocks, in order.
  std::vector<std::pair<std::size_t, std::size_t>> blocks;
};

// argmin over non-increasing u of ||u - v||^2 via pool-adjacent-violators.
inline IsotonicSolution isotonic_regression(std::span<const double> v) {
  struct Block {
    std::size_t begin, end;
    double sum;
    double mean() const { return sum / static_cast<double>(end - begin); }
  };
  std::vector<Block> stack;
  stack.reserve(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    stack.push_back({i, i + 1, v[i]});
    while (stack.size() > 1 && stack[stack.size() - 2].mean() < stack.back().mean()) {
      Block top = stack.back();
      stack.pop_back();
      stack.back().end = top.end;
      stack.back().sum += top.sum;
    }
  }
  IsotonicSolution sol;
  sol.values.resize(v.size());
  for (const auto& b : stack) {
    const double m = b.mean();
    std::fill(sol.values.begin() + static_cast<std::ptrdiff_t>(b.begin),
              sol.values.begin() + static_cast<std::ptrdiff_t>(b.end), m);
    sol.blocks.emplace_back(b.begin, b.end);
  }
  return sol;
}

struct SoftRanks {
  std::vector<double> values;
  double regularization = 1.0;
};

namespace detail {

struct SoftRankTrace {
  std::vector<double> ranks;
  std::vector<std::size_t> order;  // order[i] = original index at sorted position i
  std::vector<std::pair<std::size_t, std::size_t>> blocks;
};

inline SoftRankTrace soft_rank_trace(std::span<const double> scores, double eps) {
  if (scores.empty()) throw std::invalid_argument("soft_rank: empty score vector");
  if (!(eps > 0.0)) throw std::invalid_argument("soft_rank: epsilon must be > 0, got " + std::to_string(eps));
  for (double s : scores)
    if (!std::isfinite(s)) throw std::domain_error("soft_rank: non-finite score");
  const std::size_t k = scores.size();
  SoftRankTrace tr;
  tr.order.resize(k);
  std::iota(tr.order.begin(), tr.order.end(), std::size_t{0});
  std::stable_sort(tr.order.begin(), tr.order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<double> sorted(k), resid(k);
  for (std::size_t i = 0; i < k; ++i) {
    sorted[i] = scores[tr.order[i]] / eps;
    resid[i] = sorted[i] - static_cast<double>(k - i);
  }
  auto iso = isotonic_regression(resid);
  tr.ranks.resize(k);
  for (std::size_t i = 0; i < k; ++i) tr.ranks[tr.order[i]] = sorted[i] - iso.values[i];
  tr.blocks = std::move(iso.blocks);
  return tr;
}

inline std::vector<double> soft_rank_vjp_from_trace(const SoftRankTrace& tr, double eps,
                                                    std::span<const double> upstream) {
  const std::size_t k = tr.order.size();
  std::vector<double> sorted_up(k), out(k);
  for (std::size_t i = 0; i < k; ++i) sorted_up[i] = upstream[tr.order[i]];
  for (const auto& [b, e] : tr.blocks) {
    double m = 0.0;
    for (std::size_t i = b; i < e; ++i) m += sorted_up[i];
    m /= static_cast<double>(e - b);
    for (std::size_t i = b; i < e; ++i) out[tr.order[i]] = (sorted_up[i] - m) / eps;
  }
  return out;
}

}  // namespace detail

inline SoftRanks soft_rank(std::span<const double> scores, double eps = 1.0) {
  return {detail::soft_rank_trace(scores, eps).ranks, eps};
}

// upstream^T * d soft_rank / d scores.
inline std::vector<double> soft_rank_vjp(std::span<const double> scores, double eps,
                                         std::span<const double> upstream) {
  if (upstream.size() != scores.size())
    throw std::invalid_argument("soft_rank_vjp: upstream has " + std::to_string(upstream.size()) +
                                " entries for " + std::to_string(scores.size()) + " scores");
  return detail::soft_rank_vjp_from_trace(detail::soft_rank_trace(scores, eps), eps, upstream);
}

// Integer ranks 1..K ascending with score; on ties the lower index gets the
// lower rank.
inline std::vector<int> hard_rank(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<int> ranks(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) ranks[order[i]] = static_cast<int>(i + 1);
  return ranks;
}

// Row-wise soft rank of a [rows, K] score tensor as a graph operation.
template <class T>
Tensor<T> soft_rank(const Tensor<T>& scores, double eps) {
  if (scores.ndim() != 2) throw ShapeError("soft_rank: expected [rows, K], got " + shape_str(scores.shape()));
  const std::size_t rows = scores.dim(0), k = scores.dim(1);
  auto traces = std::make_shared<std::vector<detail::SoftRankTrace>>();
  traces->reserve(rows);
  Buffer<T> y(rows * k);
  std::vector<double> row(k);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < k; ++j) row[j] = static_cast<double>(scores.data()[r * k + j]);
    traces->push_back(detail::soft_rank_trace(row, eps));
    for (std::size_t j = 0; j < k; ++j) y[r * k + j] = static_cast<T>(traces->back().ranks[j]);
  }
  return detail::record<T>("soft_rank", scores.shape(), std::move(y), {scores},
                           [traces, rows, k, eps](Node<T>& self) {
                             T* g = detail::grad_of(self, 0);
                             std::vector<double> up(k);
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t j = 0; j < k; ++j) up[j] = static_cast<double>(self.grad[r * k + j]);
                               auto d = detail::soft_rank_vjp_from_trace((*traces)[r], eps, up);
                               for (std::size_t j = 0; j < k; ++j) g[r * k + j] += static_cast<T>(d[j]);
                             }
                           });
}

}  // namespace patchgame
