// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "gcv/gradcheck.hpp"
#include "gcv/ops.hpp"

using namespace gcv;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<double> v(numel(s));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(s), std::move(v));
}

}  // namespace

TEST(Autograd, ReluForward) {
  auto y = relu(Tensor::vector({-1, 0, 2}));
  EXPECT_EQ(y.values(), (std::vector<double>{0, 0, 2}));
}

TEST(Autograd, MatmulIdentity) {
  auto m = random_tensor({3, 3}, 1);
  auto y = matmul(Tensor::eye(3), m);
  EXPECT_EQ(y.values(), m.values());
}

TEST(Autograd, SoftmaxUniform) {
  auto y = softmax(Tensor::vector({0, 0, 0, 0}), 0);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Autograd, SoftmaxIsShiftStable) {
  auto y = softmax(Tensor::vector({1000.0, 1000.0}), 0);
  EXPECT_DOUBLE_EQ(y[0], 0.5);
}

TEST(Autograd, SumOfSquaresGradient) {
  auto x = Tensor::vector({1, 2, 3}, true);
  backprop(sum_all(mul(x, x)));
  EXPECT_EQ(x.grad().values(), (std::vector<double>{2, 4, 6}));
}

TEST(Autograd, ReluSubgradientAtZeroIsZero) {
  auto x = Tensor::vector({0.0}, true);
  backprop(sum_all(relu(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Autograd, LogSoftmaxGradient) {
  // d/dx log softmax(x)_0 = e_0 - softmax(x); softmax([1,1]) = [.5,.5].
  auto x = Tensor::vector({1, 1}, true);
  backprop(slice(log_softmax(x, 0), 0, 0, 1));
  EXPECT_NEAR(x.grad()[0], 0.5, 1e-15);
  EXPECT_NEAR(x.grad()[1], -0.5, 1e-15);
}

TEST(Autograd, RepeatedBackpropAccumulates) {
  auto x = Tensor::vector({1, 2, 3}, true);
  backprop(sum_all(mul(x, x)));
  backprop(sum_all(mul(x, x)));
  EXPECT_EQ(x.grad().values(), (std::vector<double>{4, 8, 12}));
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Autograd, BackpropErrors) {
  auto x = Tensor::vector({1, 2}, true);
  EXPECT_THROW(backprop(mul(x, x)), ShapeError);
  EXPECT_THROW(backprop(Tensor::scalar(1.0)), StateError);
}

TEST(Autograd, ShapeMismatchNamesPrimitiveAndShapes) {
  try {
    (void)add(Tensor::zeros({2, 3}), Tensor::zeros({4}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4]"), std::string::npos);
  }
  EXPECT_THROW((void)matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Autograd, NonFiniteIsAnError) {
  EXPECT_THROW((void)log(Tensor::vector({0.0})), NumericError);
  EXPECT_THROW((void)exp(Tensor::vector({1000.0})), NumericError);
  EXPECT_THROW((void)div(Tensor::vector({1.0}), Tensor::vector({0.0})), NumericError);
}

TEST(Autograd, NoGradGuardSkipsTrace) {
  auto x = Tensor::vector({1, 2}, true);
  NoGradGuard g;
  auto y = sum_all(mul(x, x));
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, BroadcastTrailingAlignment) {
  auto a = Tensor({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor::vector({10, 20, 30});
  EXPECT_EQ(add(a, b).values(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  auto c = Tensor({2, 1}, {100, 200});
  EXPECT_EQ(add(a, c).values(), (std::vector<double>{101, 102, 103, 204, 205, 206}));
  auto d = add(Tensor({3, 1, 2}, std::vector<double>(6, 1.0)), Tensor({4, 1}, {0, 1, 2, 3}));
  EXPECT_EQ(d.shape(), (Shape{3, 4, 2}));
}

TEST(Autograd, GradcheckExamples) {
  auto x = Tensor::vector({1, 2, 3});
  EXPECT_LE(gradcheck([](const Tensor& t) { return sum_all(mul(t, t)); }, x, 1e-5), 1e-7);
  EXPECT_EQ(gradcheck([](const Tensor&) { return Tensor::scalar(3.0); }, x, 1e-5), 0.0);
  EXPECT_THROW(gradcheck([](const Tensor& t) { return sum_all(t); }, x, 1e-2), ValueError);
}

TEST(Autograd, GradcheckReportsNonFiniteComponent) {
  auto x = Tensor::vector({1.0, 1e-7});
  try {
    (void)gradcheck([](const Tensor& t) { return sum_all(log(t)); }, x, 1e-5);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("component 1"), std::string::npos);
  }
}

// Every primitive composed with a reduction passes gradcheck at 1e-5.
struct PrimitiveCase {
  const char* name;
  std::function<Tensor(const Tensor&)> f;
  Shape shape;
  double lo, hi;
};

class PrimitiveGradcheck : public ::testing::TestWithParam<PrimitiveCase> {};

TEST_P(PrimitiveGradcheck, CentralDifferences) {
  const auto& c = GetParam();
  auto w = random_tensor(c.shape, 99, -1, 1);  // fixed weights make sum non-trivial
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto x = random_tensor(c.shape, seed + 7, c.lo, c.hi);
    auto f = [&](const Tensor& t) {
      auto y = c.f(t);
      auto wy = y.size() == w.size() ? mul(reshape(y, w.shape()), w) : y;
      return sum_all(wy);
    };
    EXPECT_LE(gradcheck(f, x, 1e-5), 1e-5) << c.name << " seed " << seed;
  }
}

namespace {
const Tensor kOther = random_tensor({3, 4}, 1234, 0.5, 1.5);
const Tensor kRow = random_tensor({4}, 4321, 0.5, 1.5);
const Tensor kMat = random_tensor({4, 5}, 77);
const Tensor kGamma = random_tensor({4}, 55, 0.5, 1.5);
const Tensor kBeta = random_tensor({4}, 56);
}  // namespace

INSTANTIATE_TEST_SUITE_P(
    Primitives, PrimitiveGradcheck,
    ::testing::Values(
        PrimitiveCase{"add", [](const Tensor& x) { return add(x, kOther); }, {3, 4}, -1, 1},
        PrimitiveCase{"add_broadcast_lhs", [](const Tensor& x) { return add(kOther, x); }, {4}, -1, 1},
        PrimitiveCase{"subtract", [](const Tensor& x) { return sub(kOther, x); }, {3, 4}, -1, 1},
        PrimitiveCase{"multiply", [](const Tensor& x) { return mul(x, kRow); }, {3, 4}, -1, 1},
        PrimitiveCase{"multiply_broadcast", [](const Tensor& x) { return mul(kOther, x); }, {3, 1}, -1, 1},
        PrimitiveCase{"divide_num", [](const Tensor& x) { return div(x, kOther); }, {3, 4}, -1, 1},
        PrimitiveCase{"divide_den", [](const Tensor& x) { return div(kOther, x); }, {4}, 0.5, 2},
        PrimitiveCase{"matmul_lhs", [](const Tensor& x) { return matmul(x, kMat); }, {2, 3, 4}, -1, 1},
        PrimitiveCase{"matmul_rhs", [](const Tensor& x) { return matmul(kOther, x); }, {4, 2}, -1, 1},
        PrimitiveCase{"matmul_batched", [](const Tensor& x) { return matmul(x, transpose(x)); }, {2, 3, 4}, -1, 1},
        PrimitiveCase{"matmul_shared_lhs", [](const Tensor& x) { return matmul(kOther, x); }, {2, 4, 3}, -1, 1},
        PrimitiveCase{"transpose", [](const Tensor& x) { return transpose(x); }, {3, 4}, -1, 1},
        PrimitiveCase{"permute", [](const Tensor& x) { return permute(x, {2, 0, 1}); }, {2, 3, 4}, -1, 1},
        PrimitiveCase{"reshape", [](const Tensor& x) { return reshape(x, {4, 3}); }, {3, 4}, -1, 1},
        PrimitiveCase{"concat", [](const Tensor& x) { return concat({x, kOther, x}, 1); }, {3, 4}, -1, 1},
        PrimitiveCase{"split", [](const Tensor& x) { return split(x, 1, {1, 3})[1]; }, {3, 4}, -1, 1},
        PrimitiveCase{"relu", [](const Tensor& x) { return relu(x); }, {3, 4}, -1, 1},
        PrimitiveCase{"gelu", [](const Tensor& x) { return gelu(x); }, {3, 4}, -2, 2},
        PrimitiveCase{"exp", [](const Tensor& x) { return exp(x); }, {3, 4}, -1, 1},
        PrimitiveCase{"log", [](const Tensor& x) { return log(x); }, {3, 4}, 0.5, 2},
        PrimitiveCase{"power", [](const Tensor& x) { return pow(x, 2.5); }, {3, 4}, 0.5, 2},
        PrimitiveCase{"sqrt", [](const Tensor& x) { return sqrt(x); }, {3, 4}, 0.5, 2},
        PrimitiveCase{"sum_axis0", [](const Tensor& x) { return sum(x, 0); }, {3, 4}, -1, 1},
        PrimitiveCase{"mean_axis1", [](const Tensor& x) { return mean(x, 1, true); }, {2, 3, 4}, -1, 1},
        PrimitiveCase{"broadcast", [](const Tensor& x) { return broadcast_to(x, {3, 4}); }, {4}, -1, 1},
        PrimitiveCase{"softmax_last", [](const Tensor& x) { return softmax(x, 1); }, {3, 4}, -2, 2},
        PrimitiveCase{"softmax_first", [](const Tensor& x) { return softmax(x, 0); }, {3, 4}, -2, 2},
        PrimitiveCase{"log_softmax", [](const Tensor& x) { return log_softmax(x, 1); }, {3, 4}, -2, 2},
        PrimitiveCase{"logsumexp", [](const Tensor& x) { return logsumexp(x, 0); }, {3, 4}, -2, 2},
        PrimitiveCase{"layer_norm", [](const Tensor& x) { return layer_norm(x, kGamma, kBeta); }, {3, 4}, -2, 2},
        PrimitiveCase{"gather_rows", [](const Tensor& x) { return gather_rows(x, {2, 0, 2}); }, {3, 4}, -1, 1},
        PrimitiveCase{"clamp_min", [](const Tensor& x) { return clamp_min(x, 0.05); }, {3, 4}, 0.1, 1}),
    [](const ::testing::TestParamInfo<PrimitiveCase>& info) { return std::string(info.param.name); });

TEST(Autograd, LayerNormAffineParamsGradcheck) {
  auto x = random_tensor({3, 4}, 3, -2, 2);
  auto g = random_tensor({4}, 4, 0.5, 1.5);
  auto b = random_tensor({4}, 5);
  auto rep = gradcheck([&] { return sum_all(square(layer_norm(x, g, b))); }, {x, g, b}, 1e-5);
  EXPECT_LE(rep.max_rel_error, 1e-5);
}

TEST(Autograd, LinearityOfGradients) {
  const double a = 2.5, b = -0.75;
  auto f = [](const Tensor& x) { return sum_all(exp(x)); };
  auto g = [](const Tensor& x) { return sum_all(mul(x, mul(x, x))); };
  auto x = random_tensor({6}, 11);

  auto xf = x.clone().set_requires_grad(true);
  backprop(f(xf));
  auto xg = x.clone().set_requires_grad(true);
  backprop(g(xg));
  auto xc = x.clone().set_requires_grad(true);
  backprop(add(scale(f(xc), a), scale(g(xc), b)));
  for (std::size_t i = 0; i < 6; ++i)
    EXPECT_NEAR(xc.grad()[i], a * xf.grad()[i] + b * xg.grad()[i], 1e-12);
}

TEST(Autograd, FanOutAccumulation) {
  auto x = random_tensor({5}, 12);
  auto viaf = x.clone().set_requires_grad(true);
  backprop(sum_all(exp(viaf)));
  auto viag = x.clone().set_requires_grad(true);
  backprop(sum_all(square(viag)));
  auto both = x.clone().set_requires_grad(true);
  backprop(add(sum_all(exp(both)), sum_all(square(both))));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(both.grad()[i], viaf.grad()[i] + viag.grad()[i], 1e-12);
}

TEST(Autograd, DiamondGraphVisitsEachNodeOnce) {
  auto x = Tensor::vector({0.3, -0.2}, true);
  auto h = exp(x);
  auto y = sum_all(add(mul(h, h), h));
  backprop(y);
  for (std::size_t i = 0; i < 2; ++i) {
    const double e = std::exp(x[i]);
    EXPECT_NEAR(x.grad()[i], 2 * e * e + e, 1e-12);
  }
}
