#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fd.hpp"
#include "gyrodenoise/error.hpp"
#include "gyrodenoise/so3.hpp"
#include "gyrodenoise/tensor.hpp"

using namespace gyrodenoise;
using namespace gyrodenoise::ad;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(s));
  for (auto& v : t.data) v = n(rng);
  return t;
}

// Contracts an op output with fixed random weights so every output entry
// contributes to the scalar.
Var project(Var y, std::uint64_t seed) {
  Tensor w = random_tensor(y.shape(), seed);
  return sum(mul(y, y.graph->constant(std::move(w))));
}

// Nested-loop reference of the causal dilated convolution.
std::vector<double> conv_reference(const Tensor& x, const Tensor& w, const Tensor* b, int d) {
  const std::size_t nb = x.dim(0), cin = x.dim(1), t = x.dim(2);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const std::size_t to = t - (k - 1) * static_cast<std::size_t>(d);
  std::vector<double> y(nb * cout * to, 0.0);
  for (std::size_t bi = 0; bi < nb; ++bi)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t s = 0; s < to; ++s) {
        double acc = b ? b->data[o] : 0.0;
        for (std::size_t i = 0; i < cin; ++i)
          for (std::size_t kk = 0; kk < k; ++kk)
            acc += w.data[(o * cin + i) * k + kk] * x.data[(bi * cin + i) * t + s + kk * static_cast<std::size_t>(d)];
        y[(bi * cout + o) * to + s] = acc;
      }
  return y;
}

}  // namespace

TEST(Tensor, ShapeHelpers) {
  EXPECT_EQ(numel({2, 3, 4}), 24u);
  EXPECT_EQ(shape_str({2, 3}), "[2,3]");
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), InvalidArgument);
}

TEST(Tensor, ConvMatchesNestedLoops) {
  for (int d : {1, 2, 4}) {
    Tensor x = random_tensor({2, 3, 40}, 1);
    Tensor w = random_tensor({5, 3, 3}, 2);
    Tensor b = random_tensor({5}, 3);
    Graph g;
    const Var y = conv1d(g.constant(x), g.constant(w), g.constant(b), d);
    ASSERT_EQ(y.shape(), (Shape{2, 5, 40 - 2 * static_cast<std::size_t>(d)}));
    const auto ref = conv_reference(x, w, &b, d);
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y.value()[i], ref[i], 1e-12);
    const Var y2 = conv1d(g.constant(x), g.constant(w), Var{}, d);
    const auto ref2 = conv_reference(x, w, nullptr, d);
    for (std::size_t i = 0; i < ref2.size(); ++i) ASSERT_NEAR(y2.value()[i], ref2[i], 1e-12);
  }
}

TEST(Tensor, ConvIsCausal) {
  // changing input sample s only affects outputs aligned at s or later
  Tensor x = random_tensor({1, 2, 30}, 4);
  Tensor w = random_tensor({2, 2, 3}, 5);
  const int d = 3;
  Graph g;
  const auto y0 = conv1d(g.constant(x), g.constant(w), Var{}, d).value().data;
  x.data[20] += 1.0;
  const auto y1 = conv1d(g.constant(x), g.constant(w), Var{}, d).value().data;
  const std::size_t to = 30 - 6;
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t s = 0; s < to; ++s) {
      const std::size_t aligned = s + 6;
      if (aligned < 20 || s > 20) EXPECT_EQ(y0[o * to + s], y1[o * to + s]) << s;
    }
}

TEST(Tensor, ConvGradient) {
  Tensor x = random_tensor({2, 3, 25}, 6);
  Tensor w = random_tensor({4, 3, 3}, 7);
  Tensor b = random_tensor({4}, 8);
  auto f = [&](Graph& g) { return project(conv1d(g.parameter(x), g.parameter(w), g.parameter(b), 2), 9); };
  EXPECT_LT(fdcheck::max_rel_err(f, {&x, &w, &b}), 1e-6);
}

TEST(Tensor, ElementwiseGradients) {
  Tensor a = random_tensor({3, 4}, 10);
  Tensor b = random_tensor({3, 4}, 11);
  auto f = [&](Graph& g) {
    const Var pa = g.parameter(a), pb = g.parameter(b);
    return add(project(mul(pa, pb), 1), add(scale(mean(pa), 3.0), project(add(pa, pb), 2)));
  };
  EXPECT_LT(fdcheck::max_rel_err(f, {&a, &b}), 1e-6);
}

TEST(Tensor, StructuralGradients) {
  Tensor a = random_tensor({3, 2, 6}, 12);
  auto f = [&](Graph& g) {
    const Var p = g.parameter(a);
    const Var s = slice_last(p, 1, 4);
    const Var t = transpose_last2(s);
    const std::vector<std::size_t> rows{2, 0, 2};
    const Var r = gather_rows(reshape(t, {3, 8}), rows);
    const Var bcast = broadcast_last(slice_last(p, 5, 1), 3);
    return add(project(r, 3), project(bcast, 4));
  };
  EXPECT_LT(fdcheck::max_rel_err(f, {&a}), 1e-6);
}

TEST(Tensor, BatchNormTrainGradient) {
  Tensor x = random_tensor({2, 3, 10}, 13);
  Tensor gamma = random_tensor({3}, 14);
  Tensor beta = random_tensor({3}, 15);
  auto f = [&](Graph& g) {
    BatchNormStats stats = BatchNormStats::initialized(3);
    return project(batchnorm1d(g.parameter(x), g.parameter(gamma), g.parameter(beta), stats, BnMode::train), 16);
  };
  EXPECT_LT(fdcheck::max_rel_err(f, {&x, &gamma, &beta}), 1e-5);
}

TEST(Tensor, BatchNormStatistics) {
  Tensor x = random_tensor({4, 2, 50}, 17, 3.0);
  Tensor gamma({2}, 1.0), beta({2}, 0.0);
  BatchNormStats stats = BatchNormStats::initialized(2);
  Graph g;
  const Var y = batchnorm1d(g.constant(x), g.constant(gamma), g.constant(beta), stats, BnMode::train);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, v = 0, xm = 0, xv = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t t = 0; t < 50; ++t) {
        m += y.value()[(b * 2 + c) * 50 + t];
        xm += x.data[(b * 2 + c) * 50 + t];
      }
    m /= 200;
    xm /= 200;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t t = 0; t < 50; ++t) {
        const double yy = y.value()[(b * 2 + c) * 50 + t] - m;
        const double xx = x.data[(b * 2 + c) * 50 + t] - xm;
        v += yy * yy;
        xv += xx * xx;
      }
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 200, 1.0, 1e-5);
    // running statistics: momentum 0.1, unbiased variance
    EXPECT_NEAR(stats.mean[c], 0.1 * xm, 1e-12);
    EXPECT_NEAR(stats.var[c], 0.9 + 0.1 * xv / 199, 1e-12);
  }
  // eval mode uses the running statistics and leaves them alone
  const auto before = stats.mean;
  const Var e = batchnorm1d(g.constant(x), g.constant(gamma), g.constant(beta), stats, BnMode::eval);
  EXPECT_EQ(stats.mean, before);
  EXPECT_NEAR(e.value()[0], (x.data[0] - stats.mean[0]) / std::sqrt(stats.var[0] + 1e-5), 1e-12);
  batchnorm1d(g.constant(x), g.constant(gamma), g.constant(beta), stats, BnMode::batch_stats);
  EXPECT_EQ(stats.mean, before);
}

TEST(Tensor, GeluValuesAndGradient) {
  EXPECT_EQ(gelu_value(0.0), 0.0);
  EXPECT_NEAR(gelu_value(1.0), 0.5 * (1 + std::tanh(0.7978845608 * (1 + 0.044715))), 1e-15);
  EXPECT_NEAR(gelu_value(-10.0), 0.0, 1e-12);
  Tensor x = random_tensor({2, 7}, 18, 2.0);
  auto f = [&](Graph& g) { return project(gelu(g.parameter(x)), 19); };
  EXPECT_LT(fdcheck::max_rel_err(f, {&x}), 1e-6);
}

TEST(Tensor, DropoutSemantics) {
  Tensor x({1, 1, 10000}, 1.0);
  Graph g;
  const Var y = dropout(g.constant(x), 0.1, true, 42);
  std::size_t zeros = 0;
  for (double v : y.value().data) {
    if (v == 0.0) ++zeros;
    else EXPECT_NEAR(v, 1.0 / 0.9, 1e-15);
  }
  EXPECT_NEAR(static_cast<double>(zeros) / 10000.0, 0.1, 0.015);
  EXPECT_EQ(dropout(g.constant(x), 0.1, true, 42).value().data, y.value().data);
  EXPECT_EQ(dropout(g.constant(x), 0.1, false, 42).value().data, x.data);

  Tensor p = random_tensor({2, 5}, 20);
  auto f = [&](Graph& gg) { return project(dropout(gg.parameter(p), 0.3, true, 7), 21); };
  EXPECT_LT(fdcheck::max_rel_err(f, {&p}), 1e-6);
}

TEST(Tensor, So3ExpMatchesCore) {
  Tensor v = random_tensor({5, 3}, 22);
  Graph g;
  const Var r = so3_exp(g.constant(v));
  for (std::size_t i = 0; i < 5; ++i) {
    const so3::Mat3 ref = so3::exp(so3::Vec3(v.data[3 * i], v.data[3 * i + 1], v.data[3 * i + 2])).matrix();
    for (int k = 0; k < 9; ++k) EXPECT_NEAR(r.value()[9 * i + k], ref(k / 3, k % 3), 1e-15);
  }
}

TEST(Tensor, So3ExpGradient) {
  Tensor v = random_tensor({4, 3}, 23);
  v.data[0] = 1e-9;  // one near-zero vector
  v.data[1] = 0.0;
  v.data[2] = 0.0;
  auto f = [&](Graph& g) { return project(so3_exp(g.parameter(v)), 24); };
  EXPECT_LT(fdcheck::max_rel_err(f, {&v}), 1e-6);
}

TEST(Tensor, So3LogGradientThroughExp) {
  // log(exp(v) R0) stays on the manifold, where the log gradient is exact
  Tensor v = random_tensor({4, 3}, 25, 0.5);
  const so3::Mat3 r0 = so3::exp(so3::Vec3(0.4, -1.1, 0.7)).matrix();
  Tensor r0t({4, 3, 3});
  for (std::size_t i = 0; i < 4; ++i)
    for (int k = 0; k < 9; ++k) r0t.data[9 * i + k] = r0(k / 3, k % 3);
  auto f = [&](Graph& g) {
    return project(so3_log(matmul3(so3_exp(g.parameter(v)), g.constant(r0t), false, false)), 26);
  };
  EXPECT_LT(fdcheck::max_rel_err(f, {&v}), 1e-6);
}

TEST(Tensor, PairProductsAndMatmul) {
  Tensor v = random_tensor({8, 3}, 27);
  Tensor u = random_tensor({4, 3}, 28);
  auto f = [&](Graph& g) {
    const Var a = pair_products(so3_exp(g.parameter(v)));
    const Var b = so3_exp(g.parameter(u));
    return add(project(matmul3(a, b, true, false), 29), project(matmul3(a, b, false, true), 30));
  };
  EXPECT_LT(fdcheck::max_rel_err(f, {&v, &u}), 1e-6);

  Graph g;
  const Var e = so3_exp(g.constant(v));
  const Var p = pair_products(e);
  for (std::size_t i = 0; i < 4; ++i) {
    const so3::Mat3 ref = so3::exp(so3::Vec3(v.data[6 * i], v.data[6 * i + 1], v.data[6 * i + 2])).matrix() *
                          so3::exp(so3::Vec3(v.data[6 * i + 3], v.data[6 * i + 4], v.data[6 * i + 5])).matrix();
    for (int k = 0; k < 9; ++k) EXPECT_NEAR(p.value()[9 * i + k], ref(k / 3, k % 3), 1e-15);
  }
}

TEST(Tensor, HuberBranches) {
  EXPECT_DOUBLE_EQ(huber_value(0.004, 0.005), 8e-6);
  EXPECT_DOUBLE_EQ(huber_value(0.1, 0.005), 4.875e-4);
  EXPECT_DOUBLE_EQ(huber_value(-0.1, 0.005), 4.875e-4);
  EXPECT_DOUBLE_EQ(huber_value(0.005, 0.005), 0.5 * 0.005 * 0.005);
  Tensor x({6}, std::vector<double>{-0.3, -0.004, 0.001, 0.002, 0.02, 0.5});
  auto f = [&](Graph& g) { return project(huber(g.parameter(x), 0.01), 31); };
  EXPECT_LT(fdcheck::max_rel_err(f, {&x}), 1e-7);
}

TEST(Tensor, BackwardAccumulates) {
  Tensor a({2}, std::vector<double>{1.0, 2.0});
  a.requires_grad = true;
  Graph g;
  const Var l = sum(mul(g.parameter(a), g.parameter(a)));
  g.backward(l);
  EXPECT_EQ(a.grad, (std::vector<double>{2.0, 4.0}));
  Graph g2;
  g2.backward(sum(mul(g2.parameter(a), g2.parameter(a))));
  EXPECT_EQ(a.grad, (std::vector<double>{4.0, 8.0}));
  EXPECT_THROW(g2.backward(g2.parameter(a)), InvalidArgument);
}

TEST(Tensor, ShapeErrors) {
  Graph g;
  const Var a = g.constant(Tensor({2, 3}));
  const Var b = g.constant(Tensor({3, 2}));
  EXPECT_THROW(add(a, b), InvalidArgument);
  EXPECT_THROW(conv1d(g.constant(Tensor({1, 2, 3})), g.constant(Tensor({1, 2, 5})), Var{}, 1), InvalidArgument);
  EXPECT_THROW(pair_products(g.constant(Tensor({3, 3, 3}))), InvalidArgument);
}
