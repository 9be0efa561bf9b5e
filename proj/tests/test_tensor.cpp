#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "patchgame/gradcheck.hpp"
#include "patchgame/ops.hpp"
#include "patchgame/optim.hpp"
#include "patchgame/rng.hpp"

using namespace patchgame;
using TD = Tensor<double>;

namespace {

TD randn(const Shape& s, Rng& rng, double sd = 1.0, bool rg = false) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = sd * rng.normal();
  return TD::from(s, std::move(v), rg);
}

// Reduces any tensor to a scalar through a fixed random linear functional, so
// every output coordinate contributes to the checked gradient.
std::function<TD(const TD&)> probe(std::function<TD(const TD&)> f, const Shape& out, std::uint64_t seed) {
  Rng rng(seed);
  auto w = randn(out, rng);
  return [f, w](const TD& x) { return sum_all(mul(f(x), w)); };
}

double check(std::function<TD(const TD&)> f, const TD& x, std::uint64_t seed = 7) {
  const Shape out = f(x).shape();
  return grad_check(probe(f, out, seed), x);
}

}  // namespace

TEST(Tensor, MatmulShapeRule) {
  auto a = TD::zeros({2, 3});
  auto b = TD::zeros({3, 4});
  EXPECT_EQ(matmul(a, b).shape(), (Shape{2, 4}));
}

TEST(Tensor, MatmulMismatchNamesShapes) {
  auto a = TD::zeros({2, 3});
  auto b = TD::zeros({4, 4});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4,4]"), std::string::npos);
  }
}

TEST(Tensor, SoftmaxOfZerosIsUniform) {
  auto y = softmax(TD::zeros({4}));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Tensor, LayerNormStandardizes) {
  Rng rng(3);
  auto x = randn({3, 17}, rng, 4.0);
  auto y = layer_norm(x, TD::full({17}, 1.0), TD::zeros({17}), 0.0);
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 17; ++j) m += y.at(r * 17 + j);
    m /= 17;
    for (std::size_t j = 0; j < 17; ++j) v += (y.at(r * 17 + j) - m) * (y.at(r * 17 + j) - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 17, 1.0, 1e-12);
  }
}

TEST(Backward, SumGivesOnes) {
  auto x = TD::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(sum_all(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, DotProduct) {
  auto x = TD::from({2}, {1, 2}, true);
  auto y = TD::from({2}, {3, 4}, true);
  backward(sum_all(mul(x, y)));
  EXPECT_EQ(x.grad()[0], 3.0);
  EXPECT_EQ(x.grad()[1], 4.0);
  EXPECT_EQ(y.grad()[0], 1.0);
  EXPECT_EQ(y.grad()[1], 2.0);
}

TEST(Backward, NonScalarRootRejected) {
  auto x = TD::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ShapeError);
}

TEST(Backward, RepeatedCallsAccumulate) {
  auto x = TD::from({2}, {1, 2}, true);
  auto y = sum_all(scale(x, 3.0));
  backward(y);
  backward(y);
  EXPECT_EQ(x.grad()[0], 6.0);
  x.zero_grad();
  backward(y);
  EXPECT_EQ(x.grad()[0], 3.0);
}

TEST(Backward, FanOutSumsContributions) {
  // f(x) = sum(x * x) + sum(exp(x)) uses x through three edges.
  auto f = [](const TD& x) { return add(sum_all(mul(x, x)), sum_all(exp(x))); };
  Rng rng(11);
  auto x = randn({5}, rng);
  EXPECT_LT(grad_check(f, x), 1e-8);
  auto leaf = TD::from({5}, x.to_vector(), true);
  backward(f(leaf));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(leaf.grad()[i], 2 * x.at(i) + std::exp(x.at(i)), 1e-12);
}

TEST(Backward, EvaluationBuildsNoGraph) {
  auto a = TD::from({2, 2}, {1, 2, 3, 4});
  auto y = matmul(a, a);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->inputs.empty());
}

TEST(Debug, NonFiniteInputRejected) {
  set_debug_checks(true);
  auto x = TD::from({2}, {1.0, std::nan("")});
  EXPECT_THROW(exp(x), NonFiniteError);
  set_debug_checks(false);
  EXPECT_NO_THROW(exp(x));
}

TEST(GradCheck, SumOfSquares) {
  Rng rng(1);
  auto x = randn({5}, rng);
  EXPECT_LT(grad_check([](const TD& v) { return sum_all(mul(v, v)); }, x), 1e-8);
}

TEST(GradCheck, SoftmaxCrossEntropy) {
  Rng rng(2);
  auto logits = randn({4, 6}, rng);
  auto target = TD::zeros({4, 6});
  for (std::size_t r = 0; r < 4; ++r) target.mutable_data()[r * 6 + (r * 5) % 6] = 1.0;
  auto ce = [target](const TD& z) { return scale(sum_all(mul(log_softmax(z), target)), -0.25); };
  EXPECT_LT(grad_check(ce, logits), 1e-6);
}

// Every differentiable kind, at random inputs away from kinks.
TEST(GradCheck, AllOperations) {
  Rng rng(20240);
  const double tol = 1e-5;
  auto a23 = randn({2, 3}, rng), b34 = randn({3, 4}, rng);
  EXPECT_LT(check([&](const TD& x) { return matmul(x, b34); }, a23), tol);
  EXPECT_LT(check([&](const TD& x) { return matmul(a23, x); }, b34), tol);

  auto ba = randn({2, 3, 4}, rng), bb = randn({2, 4, 5}, rng);
  EXPECT_LT(check([&](const TD& x) { return bmm(x, bb); }, ba), tol);
  EXPECT_LT(check([&](const TD& x) { return bmm(ba, x); }, bb), tol);

  auto lx = randn({2, 3, 4}, rng), lw = randn({4, 5}, rng), lb = randn({5}, rng);
  EXPECT_LT(check([&](const TD& x) { return linear(x, lw, lb); }, lx), tol);
  EXPECT_LT(check([&](const TD& w) { return linear(lx, w, lb); }, lw), tol);
  EXPECT_LT(check([&](const TD& b) { return linear(lx, lw, b); }, lb), tol);

  auto big = randn({2, 3, 4}, rng), row = randn({3, 1}, rng);
  EXPECT_LT(check([&](const TD& x) { return add(x, row); }, big), tol);
  EXPECT_LT(check([&](const TD& r) { return add(big, r); }, row), tol);
  EXPECT_LT(check([&](const TD& x) { return mul(x, row); }, big), tol);
  EXPECT_LT(check([&](const TD& r) { return mul(big, r); }, row), tol);
  EXPECT_LT(check([&](const TD& x) { return sub(x, big); }, big), tol);
  EXPECT_LT(check([](const TD& x) { return scale(x, -1.7); }, big), tol);
  EXPECT_LT(check([](const TD& x) { return add_scalar(x, 0.3); }, big), tol);

  auto v = randn({3, 7}, rng);
  EXPECT_LT(check([](const TD& x) { return relu(x); }, v), tol);
  EXPECT_LT(check([](const TD& x) { return gelu(x); }, v), tol);
  EXPECT_LT(check([](const TD& x) { return exp(x); }, v), tol);
  EXPECT_LT(check([](const TD& x) { return sigmoid(x); }, v), tol);
  EXPECT_LT(check([](const TD& x) { return log(add_scalar(mul(x, x), 0.5)); }, v), tol);
  EXPECT_LT(check([](const TD& x) { return clamp(x, -5.0, 5.0); }, v), tol);
  EXPECT_LT(check([](const TD& x) { return softmax(x); }, v), tol);
  EXPECT_LT(check([](const TD& x) { return log_softmax(x); }, v), tol);
  EXPECT_LT(check([](const TD& x) { return l2_normalize(x); }, v), tol);
  EXPECT_LT(check([](const TD& x) { return mean(x, 1); }, v), tol);
  EXPECT_LT(check([](const TD& x) { return sum(x, 0); }, v), tol);
  EXPECT_LT(check([](const TD& x) { return transpose(x); }, v), tol);
  EXPECT_LT(check([](const TD& x) { return reshape(x, {7, 3}); }, v), tol);
  EXPECT_LT(check([](const TD& x) { return slice(x, 1, 2, 5); }, v), tol);
  EXPECT_LT(check([](const TD& x) { return gather_rows(x, {2, -1, 0, 2}); }, v), tol);
  EXPECT_LT(check([&](const TD& x) { return concat<double>({x, v, x}, 1); }, v), tol);
  EXPECT_LT(check([](const TD& x) { return permute(x, {2, 0, 1}); }, big), tol);

  auto gamma = randn({7}, rng), beta = randn({7}, rng);
  EXPECT_LT(check([&](const TD& x) { return layer_norm(x, gamma, beta); }, v), tol);
  EXPECT_LT(check([&](const TD& g) { return layer_norm(v, g, beta); }, gamma), tol);
  EXPECT_LT(check([&](const TD& b) { return layer_norm(v, gamma, b); }, beta), tol);

  auto img = randn({2, 6, 6, 3}, rng), kern = randn({3, 3, 3, 4}, rng), kb = randn({4}, rng);
  for (std::size_t stride : {1u, 2u}) {
    EXPECT_LT(check([&](const TD& x) { return conv2d(x, kern, kb, stride, 1); }, img), tol);
    EXPECT_LT(check([&](const TD& w) { return conv2d(img, w, kb, stride, 1); }, kern), tol);
    EXPECT_LT(check([&](const TD& b) { return conv2d(img, kern, b, stride, 1); }, kb), tol);
  }
  EXPECT_LT(check([](const TD& x) { return avg_pool2d(x, 3); }, img), tol);
}

TEST(GradCheck, StraightThroughRoutesToSoft) {
  auto soft = TD::from({3}, {0.2, 0.5, 0.3}, true);
  auto hard = TD::from({3}, {0, 1, 0});
  auto y = straight_through(hard, soft);
  EXPECT_EQ(y.to_vector(), hard.to_vector());
  backward(sum_all(mul(y, TD::from({3}, {1, 2, 3}))));
  EXPECT_EQ(soft.grad()[2], 3.0);
}

TEST(Property, L2NormalizeHasUnitNorm) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = randn({1, 1 + rng.below(20)}, rng, std::exp(rng.uniform(-10, 10)));
    auto y = l2_normalize(x);
    double s = 0;
    for (double v : y.data()) s += v * v;
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-9);
  }
}

TEST(Property, ReluSubgradientAtZeroIsZero) {
  auto x = TD::from({1}, {0.0}, true);
  backward(sum_all(relu(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Sgd, ZeroMomentumIsGradientDescent) {
  auto p = TD::from({2}, {1.0, -1.0}, true);
  p.mutable_grad()[0] = 0.5;
  p.mutable_grad()[1] = -2.0;
  SgdMomentum<double> opt({p}, 0.0);
  opt.step(0.1);
  EXPECT_DOUBLE_EQ(p.at(0), 1.0 - 0.05);
  EXPECT_DOUBLE_EQ(p.at(1), -1.0 + 0.2);
}

TEST(Sgd, ZeroGradientLeavesParameters) {
  auto p = TD::from({2}, {1.0, -1.0}, true);
  SgdMomentum<double> opt({p}, 0.9);
  opt.step(1.0);
  EXPECT_EQ(p.to_vector(), (std::vector<double>{1.0, -1.0}));
}

TEST(Sgd, MomentumRecurrence) {
  auto p = TD::from({1}, {0.0}, true);
  SgdMomentum<double> opt({p}, 0.9);
  p.mutable_grad()[0] = 1.0;
  opt.step(1.0);
  opt.step(1.0);
  EXPECT_NEAR(p.at(0), -2.9, 1e-15);
}

TEST(Sgd, WeightDecayAddsToVelocity) {
  auto p = TD::from({1}, {2.0}, true);
  SgdMomentum<double> opt({p}, 0.0, 0.1);
  opt.step(1.0);
  EXPECT_NEAR(p.at(0), 2.0 - 0.2, 1e-15);
}

TEST(CosineLr, Endpoints) {
  EXPECT_EQ(cosine_lr(0, 100, 0.1, 30), 0.0);
  EXPECT_DOUBLE_EQ(cosine_lr(30, 100, 0.1, 30), 0.1);
  EXPECT_DOUBLE_EQ(cosine_lr(15, 100, 0.1, 30), 0.05);
  EXPECT_NEAR(cosine_lr(99, 100, 0.1, 30), 0.1 * 0.5 * (1 + std::cos(M_PI * 69.0 / 70.0)), 1e-15);
  // Limit t -> 1.
  EXPECT_NEAR(cosine_lr(100, 100, 0.1, 30), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(cosine_lr(0, 10, 0.1, 0), 0.1);
}

TEST(CosineLr, WarmupNotShorterThanTotalRejected) {
  EXPECT_THROW(cosine_lr(0, 10, 0.1, 10), std::invalid_argument);
}
