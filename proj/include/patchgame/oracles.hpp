#pragma once

// Brute-force reference solvers used only by the verification suites. They
// share no code with the production paths they check.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace patchgame::oracle {

// Exhaustive isotonic regression (non-increasing). Any optimum is constant on
// consecutive blocks with block means as values, so enumerating all 2^(n-1)
// consecutive partitions and keeping the best feasible one is exact.
inline std::vector<double> isotonic_exhaustive(std::span<const double> v) {
  const std::size_t n = v.size();
  if (n == 0) return {};
  if (n > 20) throw std::invalid_argument("isotonic_exhaustive: n too large");
  std::vector<double> best;
  double best_obj = std::numeric_limits<double>::infinity();
  std::vector<double> cand(n);
  for (std::uint32_t cuts = 0; cuts < (1u << (n - 1)); ++cuts) {
    std::size_t begin = 0;
    bool feasible = true;
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n && feasible; ++i) {
      const bool end_here = (i == n - 1) || (cuts >> i & 1u);
      if (!end_here) continue;
      double m = 0;
      for (std::size_t j = begin; j <= i; ++j) m += v[j];
      m /= static_cast<double>(i + 1 - begin);
      if (m > prev + 1e-15) feasible = false;
      prev = m;
      for (std::size_t j = begin; j <= i; ++j) cand[j] = m;
      begin = i + 1;
    }
    if (!feasible) continue;
    double obj = 0;
    for (std::size_t i = 0; i < n; ++i) obj += (cand[i] - v[i]) * (cand[i] - v[i]);
    if (obj < best_obj) {
      best_obj = obj;
      best = cand;
    }
  }
  return best;
}

// Wolfe's minimum-norm-point algorithm: the point of conv(points) closest to
// the origin. Exact up to round-off; terminates finitely.
inline Eigen::VectorXd min_norm_point(const std::vector<Eigen::VectorXd>& points, double tol = 1e-12) {
  if (points.empty()) throw std::invalid_argument("min_norm_point: no points");
  std::vector<std::size_t> corral;
  std::vector<double> lambda;
  std::size_t first = 0;
  for (std::size_t i = 1; i < points.size(); ++i)
    if (points[i].squaredNorm() < points[first].squaredNorm()) first = i;
  corral.push_back(first);
  lambda.push_back(1.0);
  Eigen::VectorXd x = points[first];

  for (int major = 0; major < 10000; ++major) {
    std::size_t j = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < points.size(); ++i) {
      const double d = x.dot(points[i]);
      if (d < best) {
        best = d;
        j = i;
      }
    }
    if (best >= x.squaredNorm() - tol * std::max(1.0, x.squaredNorm())) return x;
    if (std::find(corral.begin(), corral.end(), j) != corral.end()) return x;
    corral.push_back(j);
    lambda.push_back(0.0);

    for (int minor = 0; minor < 1000; ++minor) {
      const auto m = static_cast<Eigen::Index>(corral.size());
      Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(m + 1, m + 1);
      for (Eigen::Index a = 0; a < m; ++a) {
        for (Eigen::Index b = 0; b < m; ++b) kkt(a, b) = points[corral[a]].dot(points[corral[b]]);
        kkt(a, m) = 1.0;
        kkt(m, a) = 1.0;
      }
      Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m + 1);
      rhs(m) = 1.0;
      Eigen::VectorXd sol = kkt.fullPivLu().solve(rhs);
      Eigen::VectorXd alpha = sol.head(m);
      if ((alpha.array() > tol).all()) {
        for (Eigen::Index a = 0; a < m; ++a) lambda[a] = alpha(a);
        break;
      }
      double theta = 1.0;
      for (Eigen::Index a = 0; a < m; ++a)
        if (alpha(a) <= tol) theta = std::min(theta, lambda[a] / (lambda[a] - alpha(a)));
      for (Eigen::Index a = 0; a < m; ++a) lambda[a] += theta * (alpha(a) - lambda[a]);
      std::vector<std::size_t> keep_c;
      std::vector<double> keep_l;
      for (Eigen::Index a = 0; a < m; ++a)
        if (lambda[a] > tol) {
          keep_c.push_back(corral[a]);
          keep_l.push_back(lambda[a]);
        }
      corral = std::move(keep_c);
      lambda = std::move(keep_l);
      const double total = std::accumulate(lambda.begin(), lambda.end(), 0.0);
      for (auto& l : lambda) l /= total;
    }
    x = Eigen::VectorXd::Zero(points[0].size());
    for (std::size_t a = 0; a < corral.size(); ++a) x += lambda[a] * points[corral[a]];
  }
  return x;
}

// Projection of z onto the convex hull of all K! permutations of (1, ..., K),
// by vertex enumeration and Wolfe's algorithm.
inline std::vector<double> permutahedron_projection(std::span<const double> z) {
  const std::size_t k = z.size();
  if (k == 0 || k > 8) throw std::invalid_argument("permutahedron_projection: K must be in [1, 8]");
  Eigen::VectorXd zv(static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < k; ++i) zv(static_cast<Eigen::Index>(i)) = z[i];
  std::vector<int> perm(k);
  std::iota(perm.begin(), perm.end(), 1);
  std::vector<Eigen::VectorXd> shifted;
  do {
    Eigen::VectorXd p(static_cast<Eigen::Index>(k));
    for (std::size_t i = 0; i < k; ++i) p(static_cast<Eigen::Index>(i)) = perm[i];
    shifted.push_back(p - zv);
  } while (std::next_permutation(perm.begin(), perm.end()));
  Eigen::VectorXd x = min_norm_point(shifted) + zv;
  return {x.data(), x.data() + x.size()};
}

}  // namespace patchgame::oracle
