#pragma once

// Self-check suite: oracle agreement, gradient checks and closed forms.

#include <boost/math/distributions/chi_squared.hpp>

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "patchgame/agents.hpp"
#include "patchgame/gradcheck.hpp"
#include "patchgame/loss.hpp"
#include "patchgame/oracles.hpp"
#include "patchgame/relaxations.hpp"
#include "patchgame/softrank.hpp"

namespace patchgame {

struct CheckResult {
  std::string name;
  bool pass = false;
  double observed = 0;   // worst error or test statistic
  double tolerance = 0;  // pass bound on `observed`
  double seconds = 0;
  std::string detail;
};

inline std::string format_check(const CheckResult& c) {
  std::ostringstream s;
  s << (c.pass ? "PASS " : "FAIL ") << c.name << "  observed=" << c.observed << " bound=" << c.tolerance
    << " time=" << std::fixed << std::setprecision(2) << c.seconds << "s";
  if (!c.detail.empty()) s << "  (" << c.detail << ")";
  return s.str();
}

using SoftRankVjpFn = std::function<std::vector<double>(std::span<const double>, double, std::span<const double>)>;

namespace verify {

using TD = Tensor<double>;

inline TD randn(const Shape& s, Rng& rng, double sd = 1.0) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = sd * rng.normal();
  return TD::from(s, std::move(v));
}

template <class F>
CheckResult timed(const std::string& name, double tolerance, F body) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r;
  r.name = name;
  r.tolerance = tolerance;
  body(r);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// >= 100 instances, K in 2..5, four epsilons, against the vertex-enumeration
// projection. Also bounded in time.
inline CheckResult softrank_oracle(std::uint64_t seed = 7, double time_limit = 10.0) {
  auto r = timed("softrank_vs_permutahedron_bruteforce", 1e-6, [&](CheckResult& r) {
    Rng rng(seed);
    int count = 0;
    for (double eps : {0.01, 0.1, 1.0, 10.0})
      for (int t = 0; t < 30; ++t, ++count) {
        const std::size_t k = 2 + static_cast<std::size_t>(t) % 4;
        std::vector<double> s(k), z(k);
        for (std::size_t i = 0; i < k; ++i) {
          s[i] = 2.0 * rng.normal();
          z[i] = s[i] / eps;
        }
        r.observed = std::max(r.observed, max_abs_diff(soft_rank(s, eps).values, oracle::permutahedron_projection(z)));
      }
    r.detail = std::to_string(count) + " instances";
  });
  r.pass = r.observed < r.tolerance && r.seconds < time_limit;
  if (r.seconds >= time_limit) r.detail += ", too slow";
  return r;
}

inline CheckResult isotonic_oracle(std::uint64_t seed = 8) {
  auto r = timed("isotonic_vs_exhaustive", 1e-9, [&](CheckResult& r) {
    Rng rng(seed);
    int count = 0;
    for (std::size_t k = 1; k <= 6; ++k)
      for (int t = 0; t < 50; ++t, ++count) {
        std::vector<double> v(k);
        // Rounded values produce ties and equal-mean blocks as well.
        for (auto& x : v) x = t % 2 ? rng.normal() : std::round(2 * rng.normal()) / 2;
        r.observed = std::max(r.observed, max_abs_diff(isotonic_regression(v).values, oracle::isotonic_exhaustive(v)));
      }
    r.detail = std::to_string(count) + " instances";
  });
  r.pass = r.observed < r.tolerance;
  return r;
}

// Every differentiable operation, probed through a random linear functional.
inline CheckResult grad_ops(std::uint64_t seed = 20240) {
  auto r = timed("gradcheck_operations", 1e-4, [&](CheckResult& r) {
    Rng rng(seed);
    std::string worst;
    auto check = [&](const std::string& name, const std::function<TD(const TD&)>& f, const TD& x) {
      Rng wr(derive_seed(seed, name));
      auto w = randn(f(x).shape(), wr);
      const double e = grad_check([&](const TD& y) { return sum_all(mul(f(y), w)); }, x);
      if (!(e <= r.observed)) {
        r.observed = e;
        worst = name;
      }
    };
    auto a = randn({2, 3}, rng), b = randn({3, 4}, rng), ba = randn({2, 3, 4}, rng), bb = randn({2, 4, 5}, rng);
    auto lw = randn({4, 5}, rng), lb = randn({5}, rng), row = randn({3, 1}, rng), v = randn({3, 7}, rng);
    auto gamma = randn({7}, rng), beta = randn({7}, rng);
    auto img = randn({2, 6, 6, 3}, rng), kern = randn({3, 3, 3, 4}, rng), kb = randn({4}, rng);
    check("matmul.a", [&](const TD& x) { return matmul(x, b); }, a);
    check("matmul.b", [&](const TD& x) { return matmul(a, x); }, b);
    check("bmm.a", [&](const TD& x) { return bmm(x, bb); }, ba);
    check("bmm.b", [&](const TD& x) { return bmm(ba, x); }, bb);
    check("linear.x", [&](const TD& x) { return linear(x, lw, lb); }, ba);
    check("linear.w", [&](const TD& x) { return linear(ba, x, lb); }, lw);
    check("linear.b", [&](const TD& x) { return linear(ba, lw, x); }, lb);
    check("add.broadcast", [&](const TD& x) { return add(ba, x); }, row);
    check("mul.a", [&](const TD& x) { return mul(x, row); }, ba);
    check("mul.broadcast", [&](const TD& x) { return mul(ba, x); }, row);
    check("sub", [&](const TD& x) { return sub(x, mul(x, x)); }, v);
    check("scale", [](const TD& x) { return scale(x, -1.7); }, v);
    check("add_scalar", [](const TD& x) { return mul(add_scalar(x, 0.3), x); }, v);
    check("relu", [](const TD& x) { return relu(x); }, v);
    check("gelu", [](const TD& x) { return gelu(x); }, v);
    check("exp", [](const TD& x) { return exp(x); }, v);
    check("log", [](const TD& x) { return log(add_scalar(mul(x, x), 0.5)); }, v);
    check("sigmoid", [](const TD& x) { return sigmoid(x); }, v);
    check("clamp", [](const TD& x) { return clamp(x, -5.0, 5.0); }, v);
    check("softmax", [](const TD& x) { return softmax(x); }, v);
    check("log_softmax", [](const TD& x) { return log_softmax(x); }, v);
    check("l2_normalize", [](const TD& x) { return l2_normalize(x); }, v);
    check("sum", [](const TD& x) { return sum(x, 0); }, v);
    check("mean", [](const TD& x) { return mean(x, 1); }, v);
    check("sum_all", [](const TD& x) { return sum_all(mul(x, x)); }, v);
    check("mean_all", [](const TD& x) { return mean_all(mul(x, x)); }, v);
    check("transpose", [](const TD& x) { return transpose(x); }, v);
    check("reshape", [](const TD& x) { return reshape(x, {7, 3}); }, v);
    check("permute", [](const TD& x) { return permute(x, {2, 0, 1}); }, ba);
    check("slice", [](const TD& x) { return slice(x, 1, 2, 5); }, v);
    check("concat", [&](const TD& x) { return concat<double>({x, v, x}, 1); }, v);
    check("gather_rows", [](const TD& x) { return gather_rows(x, {2, -1, 0, 2}); }, v);
    check("layer_norm.x", [&](const TD& x) { return layer_norm(x, gamma, beta); }, v);
    check("layer_norm.gamma", [&](const TD& x) { return layer_norm(v, x, beta); }, gamma);
    check("layer_norm.beta", [&](const TD& x) { return layer_norm(v, gamma, x); }, beta);
    for (std::size_t stride : {1u, 2u}) {
      const auto st = std::to_string(stride);
      check("conv2d.x.s" + st, [&](const TD& x) { return conv2d(x, kern, kb, stride, 1); }, img);
      check("conv2d.w.s" + st, [&](const TD& x) { return conv2d(img, x, kb, stride, 1); }, kern);
      check("conv2d.b.s" + st, [&](const TD& x) { return conv2d(img, kern, x, stride, 1); }, kb);
    }
    check("avg_pool2d", [](const TD& x) { return avg_pool2d(x, 3); }, img);
    auto noise = randn({3, 7}, rng);
    check("gumbel_softmax.soft", [&](const TD& x) { return gumbel_softmax_with_noise(x, noise, {0.7, false}); }, v);
    auto p = TD::from({5}, {0.1, 0.3, 0.5, 0.7, 0.9});
    auto ln = randn({5}, rng);
    check("bernoulli_relaxed.soft", [&](const TD& x) { return bernoulli_relaxed_with_noise(x, ln, {0.7, false}); }, p);
    check("soft_rank", [](const TD& x) { return soft_rank(x, 0.8); }, v);
    r.detail = "worst: " + worst;
  });
  r.pass = r.observed < r.tolerance;
  return r;
}

inline CheckResult grad_info_nce(std::uint64_t seed = 11) {
  auto r = timed("gradcheck_info_nce", 1e-4, [&](CheckResult& r) {
    Rng rng(seed);
    for (std::size_t b : {2u, 3u, 5u}) {
      auto t = randn({b, 4}, rng), im = randn({b, 4}, rng);
      auto f = [&](const TD& x) { return info_nce(similarity_matrix(l2_normalize(x), l2_normalize(im), 0.1)); };
      auto g = [&](const TD& x) { return info_nce(similarity_matrix(l2_normalize(t), l2_normalize(x), 0.1)); };
      r.observed = std::max({r.observed, grad_check(f, t), grad_check(g, im)});
    }
  });
  r.pass = r.observed < r.tolerance;
  return r;
}

// Checks a soft-rank VJP implementation against central differences of
// soft_rank itself. The function is a parameter so that a deliberately
// broken VJP can be shown to fail.
inline CheckResult grad_soft_rank_vjp(const SoftRankVjpFn& vjp = soft_rank_vjp, std::uint64_t seed = 9) {
  auto r = timed("gradcheck_soft_rank_vjp", 1e-4, [&](CheckResult& r) {
    Rng rng(seed);
    const double h = 1e-6;
    for (int t = 0; t < 50; ++t) {
      const std::size_t k = 2 + static_cast<std::size_t>(t) % 6;
      const double eps = std::exp(rng.uniform(-1, 1));
      std::vector<double> s(k), w(k);
      for (std::size_t i = 0; i < k; ++i) {
        s[i] = rng.normal();
        w[i] = rng.normal();
      }
      auto f = [&](const std::vector<double>& x) {
        auto rk = soft_rank(x, eps).values;
        return std::inner_product(rk.begin(), rk.end(), w.begin(), 0.0);
      };
      const auto g = vjp(s, eps, w);
      for (std::size_t i = 0; i < k; ++i) {
        auto sp = s, sm = s;
        sp[i] += h;
        sm[i] -= h;
        const double num = (f(sp) - f(sm)) / (2 * h);
        r.observed = std::max(r.observed, std::abs(g[i] - num) / std::max({1.0, std::abs(g[i]), std::abs(num)}));
      }
    }
  });
  r.pass = r.observed < r.tolerance;
  return r;
}

// Tiny agents for the end-to-end gradient check.
inline AgentConfig tiny_agent_config() {
  AgentConfig c;
  c.grid = PatchGridSpec{3, 16, 16, 8};
  c.vocab = 4;
  c.embed_dim = 8;
  c.symbol_hidden = 8;
  c.rank_widths = {4, 4};
  c.text_width = 8;
  c.text_layers = 1;
  c.text_heads = 2;
  c.text_mlp = 16;
  c.vision_widths = {4, 8};
  c.vision_strides = {2, 2};
  c.proj_expansion = 2;
  return c;
}

// Full game loss on a B=2 batch with frozen noise, in the relaxed (soft)
// mode: the straight-through estimator is not the derivative of its own
// forward value, so only the relaxed game has a checkable gradient. The loss
// is scaled by 100 so that parameter gradients are O(1) and the relative
// error is not masked by the unit floor in its denominator.
inline CheckResult grad_end_to_end(std::uint64_t seed = 5, std::size_t stride = 3) {
  auto r = timed("gradcheck_end_to_end_loss_B2", 1e-4, [&](CheckResult& r) {
    auto cfg = tiny_agent_config();
    Agents<double> agents(cfg, seed);
    Rng rng(seed);
    auto x = randn({2, 16, 16, 3}, rng, 0.3), y = randn({2, 16, 16, 3}, rng, 0.3);
    x = add_scalar(x, 0.5);
    y = add_scalar(y, 0.5);
    auto f = [&]() {
      Rng noise(derive_seed(seed, "noise"));
      auto msg = agents.speak(x, 1.0, noise, false);
      return scale(info_nce(similarity_matrix(agents.embed_message(msg), agents.embed_image(y).embedding, 0.5)), 100.0);
    };
    auto rep = grad_check_params(f, agents.params().tensors(), 1e-5, stride);
    r.observed = rep.max_rel_error;
    r.detail = std::to_string(agents.params().numel()) + " parameters, checked at stride " + std::to_string(stride);
  });
  r.pass = r.observed < r.tolerance;
  return r;
}

inline double chi_squared_pvalue(const std::vector<double>& counts, const std::vector<double>& probs) {
  double n = 0, stat = 0;
  for (double c : counts) n += c;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double e = n * probs[i];
    stat += (counts[i] - e) * (counts[i] - e) / e;
  }
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared(static_cast<double>(counts.size() - 1)), stat));
}

// Hard Gumbel-max frequencies vs softmax (chi-squared, alpha = 0.001) and
// relaxed-Bernoulli means, 1e5 draws each. `observed` is the largest
// Bernoulli mean error; the chi-squared p-values are reported in `detail`.
inline CheckResult gumbel_fidelity(std::uint64_t seed = 3, std::size_t draws = 100000) {
  auto r = timed("gumbel_max_and_bernoulli_fidelity", 0.01, [&](CheckResult& r) {
    bool chi_ok = true;
    std::ostringstream det;
    det << "chi2 p:";
    const std::vector<std::vector<double>> cases{{0.0, 1.0, 2.0, -1.0}, {0.3, 0.3, 0.3}, {2.5, 0.0, -1.0, 0.5, 1.0}};
    for (std::size_t c = 0; c < cases.size(); ++c) {
      const auto& l = cases[c];
      const std::size_t v = l.size();
      std::vector<double> tiled(draws * v);
      for (std::size_t d = 0; d < draws; ++d) std::copy(l.begin(), l.end(), tiled.begin() + d * v);
      Rng rng(derive_seed(seed, "gumbel", c));
      auto y = gumbel_softmax(TD::from({draws, v}, std::move(tiled)), {1.0, true}, rng);
      std::vector<double> counts(v, 0.0), p(v);
      for (std::size_t d = 0; d < draws; ++d)
        for (std::size_t j = 0; j < v; ++j) counts[j] += y.at(d * v + j);
      const double m = *std::max_element(l.begin(), l.end());
      double z = 0;
      for (std::size_t j = 0; j < v; ++j) z += p[j] = std::exp(l[j] - m);
      for (auto& q : p) q /= z;
      const double pv = chi_squared_pvalue(counts, p);
      chi_ok = chi_ok && pv > 0.001;
      det << " " << pv;
    }
    for (double p : {0.1, 0.5, 0.9}) {
      Rng rng(derive_seed(seed, "bernoulli", static_cast<std::uint64_t>(p * 100)));
      auto b = bernoulli_relaxed(TD::full({draws}, p), {1.0, true}, rng);
      double mean = 0;
      for (double x : b.data()) mean += x;
      r.observed = std::max(r.observed, std::abs(mean / static_cast<double>(draws) - p));
    }
    r.pass = chi_ok;
    r.detail = det.str();
  });
  r.pass = r.pass && r.observed <= r.tolerance;
  return r;
}

// B=1 gives 0 exactly; the B=2 orthonormal case at tau=1 gives log(1 + 1/e);
// permuting the batch leaves the loss unchanged.
inline CheckResult info_nce_closed_forms(std::uint64_t seed = 4) {
  auto r = timed("info_nce_closed_forms", 1e-5, [&](CheckResult& r) {
    const double b1 = info_nce(similarity_matrix(TD::from({1, 2}, {0.6, 0.8}), TD::from({1, 2}, {1.0, 0.0}), 0.1)).item();
    auto e = TD::from({2, 2}, {1, 0, 0, 1});
    const double b2 = info_nce(similarity_matrix(e, e, 1.0)).item();
    Rng rng(seed);
    double perm_err = 0;
    for (int t = 0; t < 20; ++t) {
      const std::size_t b = 2 + rng.below(7);
      auto tx = l2_normalize(randn({b, 5}, rng)), im = l2_normalize(randn({b, 5}, rng));
      std::vector<std::ptrdiff_t> perm(b);
      std::iota(perm.begin(), perm.end(), 0);
      rng.shuffle(perm);
      const double base = info_nce(similarity_matrix(tx, im, 0.1)).item();
      const double moved = info_nce(similarity_matrix(gather_rows(tx, perm), gather_rows(im, perm), 0.1)).item();
      perm_err = std::max(perm_err, std::abs(base - moved));
    }
    r.observed = std::abs(b2 - 0.31326);
    r.pass = b1 == 0.0 && perm_err < 1e-9;
    std::ostringstream d;
    d << "B=1 loss " << b1 + 0.0 << ", B=2 loss " << std::setprecision(8) << b2 << ", permutation error " << perm_err;
    r.detail = d.str();
  });
  r.pass = r.pass && r.observed < r.tolerance;
  return r;
}

}  // namespace verify

inline std::vector<CheckResult> run_verify(const SoftRankVjpFn& vjp = soft_rank_vjp) {
  return {verify::softrank_oracle(),       verify::isotonic_oracle(), verify::grad_ops(),
          verify::grad_info_nce(),         verify::grad_soft_rank_vjp(vjp), verify::grad_end_to_end(),
          verify::gumbel_fidelity(),       verify::info_nce_closed_forms()};
}

}  // namespace patchgame
