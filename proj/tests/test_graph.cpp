// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "vitft/gradcheck.hpp"
#include "vitft/graph.hpp"

using namespace vitft;

namespace {

Tensor<double> iota(Shape shape, double start = 0.0, double step = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = start + step * static_cast<double>(i);
  return t;
}

}  // namespace

TEST(Graph, IdentityMatmul) {
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  Tensor<double> x({2, 2}, {3, -1, 2.5, 7});
  Graph<double> g;
  const NodeId out = g.matmul(g.constant("x", x), g.constant("eye", eye));
  g.forward();
  EXPECT_TRUE(g.value(out).bits_equal(x));
}

TEST(Graph, SoftmaxOfEqualLogitsIsUniform) {
  Tensor<double> z({1, 3}, {0, 0, 0});
  Graph<double> g;
  const NodeId out = g.softmax(g.constant("z", z));
  g.forward();
  for (double v : g.value(out).data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Graph, LayerNormOfConstantRowIsZeroBeforeAffine) {
  Tensor<double> x({2, 4}, 3.5), w({4}, 1.0), b({4}, 0.0);
  Graph<double> g;
  const NodeId out = g.layernorm(g.constant("x", x), g.constant("w", w), g.constant("b", b));
  g.forward();
  for (double v : g.value(out).data()) EXPECT_EQ(v, 0.0);
}

TEST(Graph, SumOfSquaresGradient) {
  Tensor<double> x({3}, {1, 2, 3});
  x.set_requires_grad(true);
  Graph<double> g;
  const NodeId xi = g.leaf("x", x);
  const NodeId loss = g.sum(g.mul(xi, xi));
  g.forward();
  g.backward(loss);
  const auto grad = std::as_const(x).grad();
  EXPECT_EQ(grad[0], 2.0);
  EXPECT_EQ(grad[1], 4.0);
  EXPECT_EQ(grad[2], 6.0);
}

TEST(Graph, GradientsAccumulateAcrossBackwardPasses) {
  Tensor<double> x({3}, {1, 2, 3});
  x.set_requires_grad(true);
  Graph<double> g;
  const NodeId xi = g.leaf("x", x);
  const NodeId loss = g.sum(g.mul(xi, xi));
  g.forward();
  g.backward(loss);
  g.backward(loss);
  const auto grad = std::as_const(x).grad();
  EXPECT_EQ(grad[0], 4.0);
  EXPECT_EQ(grad[2], 12.0);
}

TEST(Graph, CrossEntropyGradientIsSoftmaxMinusOneHot) {
  Tensor<double> z({1, 4}, {0.3, -1.2, 2.0, 0.1});
  Tensor<double> t({1, 4}, {0, 0, 1, 0});
  z.set_requires_grad(true);
  Graph<double> g;
  const NodeId loss = g.cross_entropy(g.leaf("z", z), g.constant("t", t));
  g.forward();
  g.backward(loss);
  double denom = 0;
  for (double v : z.data()) denom += std::exp(v);
  const auto grad = std::as_const(z).grad();
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_NEAR(grad[k], std::exp(z[k]) / denom - t[k], 1e-15);
  }
}

TEST(Graph, ShapeMismatchNamesTheNode) {
  Tensor<double> a({2, 3}), b({4, 5});
  Graph<double> g;
  g.constant("a", a);
  g.constant("b", b);
  const NodeId bad = g.matmul(0, 1);
  try {
    g.forward();
    FAIL() << "expected GraphError";
  } catch (const GraphError& e) {
    EXPECT_EQ(e.node(), bad);
    EXPECT_NE(std::string(e.what()).find("(4, 5)"), std::string::npos) << e.what();
  }
}

TEST(Graph, UnboundInputIsRejected) {
  Graph<double> g;
  g.sum(g.input("x"));
  EXPECT_THROW(g.forward(), GraphError);
}

TEST(Graph, UnknownOpKindIsRejected) {
  Tensor<double> a({2});
  Graph<double> g;
  const NodeId x = g.constant("a", a);
  EXPECT_THROW(
      {
        g.append(static_cast<OpKind>(200), {x});
        g.forward();
      },
      GraphError);
}

TEST(Graph, BackwardPreconditions) {
  Tensor<double> x({3}, {1, 2, 3});
  x.set_requires_grad(true);
  Graph<double> g;
  const NodeId xi = g.leaf("x", x);
  const NodeId loss = g.sum(xi);
  EXPECT_THROW(g.backward(loss), std::logic_error);
  g.forward();
  EXPECT_THROW(g.backward(xi), std::exception);
}

TEST(Graph, ForwardIsBitReproducible) {
  Tensor<float> x({4, 16, 24}), w({24, 40}), b({40});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(0.37f * static_cast<float>(i));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::cos(0.11f * static_cast<float>(i));
  Graph<float> g;
  const NodeId out = g.softmax(g.gelu(g.add(g.matmul(g.constant("x", x), g.constant("w", w)),
                                            g.constant("b", b))));
  g.forward();
  const Tensor<float> first = g.value(out);
  g.forward();
  EXPECT_TRUE(g.value(out).bits_equal(first));
}

TEST(Graph, SoftmaxRowsSumToOne) {
  Tensor<double> z = iota({5, 7}, -3.0, 0.41);
  Graph<double> g;
  const NodeId out = g.softmax(g.constant("z", z));
  g.forward();
  const auto& v = g.value(out);
  for (int r = 0; r < 5; ++r) {
    double s = 0;
    for (int k = 0; k < 7; ++k) {
      EXPECT_GE(v[static_cast<std::size_t>(r * 7 + k)], 0.0);
      s += v[static_cast<std::size_t>(r * 7 + k)];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Graph, LayerNormRowStatistics) {
  Tensor<double> x({3, 32});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(1.3 * static_cast<double>(i)) * 5 + 2;
  Tensor<double> w({32}, 1.0), b({32}, 0.0);
  Graph<double> g;
  const NodeId out = g.layernorm(g.constant("x", x), g.constant("w", w), g.constant("b", b));
  g.forward();
  const auto& y = g.value(out);
  for (int r = 0; r < 3; ++r) {
    double mean = 0, var = 0;
    for (int k = 0; k < 32; ++k) mean += y[static_cast<std::size_t>(r * 32 + k)];
    mean /= 32;
    for (int k = 0; k < 32; ++k) var += std::pow(y[static_cast<std::size_t>(r * 32 + k)] - mean, 2);
    var /= 32;
    EXPECT_LT(std::abs(mean), 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(Graph, ShapesResolveAtForwardTime) {
  Tensor<double> w({3, 2}, 1.0);
  Graph<double> g;
  const NodeId x = g.input("x");
  const NodeId out = g.matmul(x, g.constant("w", w));
  Tensor<double> small({1, 3}, 1.0), big({5, 3}, 2.0);
  g.forward({{"x", &small}});
  EXPECT_EQ(g.value(out).shape(), (Shape{1, 2}));
  g.forward({{"x", &big}});
  EXPECT_EQ(g.value(out).shape(), (Shape{5, 2}));
  EXPECT_EQ(g.value(out)[0], 6.0);
}

TEST(FiniteDiff, SumHasUnitGradient) {
  Tensor<double> x = iota({2, 3}, -1.0, 0.7);
  const auto fd = finite_diff_grad([](const Tensor<double>& v) {
    return std::accumulate(v.data().begin(), v.data().end(), 0.0);
  }, x, 1e-5);
  for (double v : fd.data()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDiff, SquareAtThree) {
  Tensor<double> x({1}, {3.0});
  const auto fd = finite_diff_grad([](const Tensor<double>& v) { return v[0] * v[0]; }, x, 1e-5);
  EXPECT_NEAR(fd[0], 6.0, 1e-8);
}

TEST(FiniteDiff, NonFiniteOutputThrows) {
  Tensor<double> x({1}, {0.0});
  EXPECT_THROW(finite_diff_grad([](const Tensor<double>& v) { return 1.0 / v[0] / 0.0; }, x, 1e-5),
               std::domain_error);
}

TEST(FiniteDiff, FiniteDiffAtRestoresInput) {
  Tensor<double> x = iota({4}, 0.5, 0.25);
  const Tensor<double> before = x;
  const std::vector<std::size_t> coords{0, 3};
  const auto fd = finite_diff_at([&] { return x[0] * x[3]; }, x, coords, 1e-4);
  EXPECT_TRUE(x.bits_equal(before));
  EXPECT_NEAR(fd[0], x[3], 1e-9);
  EXPECT_NEAR(fd[1], x[0], 1e-9);
}

class KernelGradients : public ::testing::TestWithParam<int> {};

TEST_P(KernelGradients, MatchFiniteDifferences) {
  for (const auto& r : check_kernels(static_cast<std::uint64_t>(GetParam()))) {
    EXPECT_LT(r.rel_error, 1e-4) << r.name << " seed " << r.seed;
    EXPECT_GT(r.coords, 0u) << r.name;
  }
}

TEST_P(KernelGradients, FullModelMatchesFiniteDifferences) {
  for (const auto& r : check_vit_gradients(static_cast<std::uint64_t>(GetParam()), 4)) {
    EXPECT_LT(r.rel_error, 1e-4) << r.name << " seed " << r.seed;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, KernelGradients, ::testing::Range(0, 5));
