#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "aim/autodiff.hpp"

using namespace aim;

namespace {

Tensor<double> random_tensor(Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(std::move(s));
  for (double& v : t.data()) v = d(rng);
  return t;
}

// Central differences computed here, independently of grad_check.
Tensor<double> numeric_grad(const ScalarGraph<double>& f, const Tensor<double>& x, double eps = 1e-6) {
  Tensor<double> g(x.shape());
  Tensor<double> probe = x;
  auto eval = [&] {
    Tape<double> t(false);
    return f(t, t.constant(probe)).value().item();
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double o = probe[i];
    probe[i] = o + eps;
    const double up = eval();
    probe[i] = o - eps;
    const double down = eval();
    probe[i] = o;
    g[i] = (up - down) / (2 * eps);
  }
  return g;
}

Tensor<double> analytic_grad(const ScalarGraph<double>& f, const Tensor<double>& x) {
  Tape<double> t;
  Var<double> v = t.variable(x);
  t.backward(f(t, v));
  return t.grad(v);
}

double max_rel(const Tensor<double>& a, const Tensor<double>& n) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - n[i]) / std::max(1.0, std::abs(a[i])));
  return worst;
}

// Direct nested-loop convolution.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, std::size_t stride,
                          std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), o = w.dim(0), k = w.dim(2);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor<double> y({n, o, oh, ow});
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t io = 0; io < o; ++io)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double s = b[io];
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t bb = 0; bb < k; ++bb) {
                const long r = static_cast<long>(i * stride + a) - static_cast<long>(pad);
                const long q = static_cast<long>(j * stride + bb) - static_cast<long>(pad);
                if (r < 0 || q < 0 || r >= static_cast<long>(h) || q >= static_cast<long>(wd)) continue;
                s += x.at(in, ic, static_cast<std::size_t>(r), static_cast<std::size_t>(q)) * w.at(io, ic, a, bb);
              }
          y.at(in, io, i, j) = s;
        }
  return y;
}

// Scatter form of the transposed convolution.
Tensor<double> naive_conv_t(const Tensor<double>& x, const Tensor<double>& w, std::size_t stride, std::size_t pad,
                            std::size_t out_pad) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(1), k = w.dim(2);
  const std::size_t oh = (h - 1) * stride - 2 * pad + k + out_pad, ow = (wd - 1) * stride - 2 * pad + k + out_pad;
  Tensor<double> y({n, co, oh, ow});
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t c = 0; c < ci; ++c)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < wd; ++j)
          for (std::size_t o = 0; o < co; ++o)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t b = 0; b < k; ++b) {
                const long r = static_cast<long>(i * stride + a) - static_cast<long>(pad);
                const long q = static_cast<long>(j * stride + b) - static_cast<long>(pad);
                if (r < 0 || q < 0 || r >= static_cast<long>(oh) || q >= static_cast<long>(ow)) continue;
                y.at(in, o, static_cast<std::size_t>(r), static_cast<std::size_t>(q)) += x.at(in, c, i, j) * w.at(c, o, a, b);
              }
  return y;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<double>({2, 3}, std::vector<double>(5)), DimensionError);
  Tensor<double> s = Tensor<double>::scalar(3.0);
  EXPECT_EQ(s.rank(), 0u);
  EXPECT_EQ(s.size(), 1u);
}

TEST(Forward, ReluOnSmallVector) {
  Tape<double> t;
  auto y = relu(t.constant(Tensor<double>::vector({-1, 0, 2})));
  EXPECT_EQ(y.value().storage(), (std::vector<double>{0, 0, 2}));
}

TEST(Forward, ScaledSigmoidAtZero) {
  Tape<double> t;
  EXPECT_EQ(scaled_sigmoid(t.constant(Tensor<double>::vector({0}))).value()[0], 0.0);
}

TEST(Forward, UnitKernelConvIsIdentity) {
  Tape<double> t;
  auto x = random_tensor({2, 1, 5, 4}, 1);
  auto w = t.constant(Tensor<double>({1, 1, 1, 1}, 1.0));
  auto y = conv2d<double>(t.constant(x), w, nullptr, {});
  EXPECT_EQ(y.value(), x);
}

TEST(Forward, ConvMatchesNestedLoops) {
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      auto x = random_tensor({2, 3, 7, 6}, 10 + stride + pad);
      auto w = random_tensor({4, 3, 3, 3}, 20 + stride);
      auto b = random_tensor({4}, 30);
      Tape<double> t;
      Var<double> bv = t.constant(b);
      auto y = conv2d<double>(t.constant(x), t.constant(w), &bv, {stride, pad});
      auto ref = naive_conv(x, w, b, stride, pad);
      ASSERT_EQ(y.value().shape(), ref.shape());
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.value()[i], ref[i], 1e-12);
    }
  }
}

TEST(Forward, ConvTransposeMatchesScatter) {
  auto x = random_tensor({2, 3, 4, 4}, 3);
  auto w = random_tensor({3, 2, 3, 3}, 4);
  Tape<double> t;
  auto y = conv_transpose2d<double>(t.constant(x), t.constant(w), nullptr, {2, 1, 1});
  auto ref = naive_conv_t(x, w, 2, 1, 1);
  ASSERT_EQ(y.value().shape(), (Shape{2, 2, 8, 8}));
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.value()[i], ref[i], 1e-12);
}

TEST(Forward, ShapeMismatchNamesPrimitive) {
  Tape<double> t;
  auto a = t.constant(Tensor<double>({2, 3}));
  auto b = t.constant(Tensor<double>({4, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected a dimension error";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
  }
}

TEST(Forward, NonFiniteDetected) {
  Tape<double> t(true);
  auto x = t.constant(Tensor<double>::vector({1.0, 0.0}));
  EXPECT_THROW(div(x, t.constant(Tensor<double>::vector({0.0, 0.0}))), NumericError);
}

TEST(Backward, SumOfSquares) {
  Tape<double> t;
  auto x = t.variable(Tensor<double>::vector({1, 2}));
  t.backward(sum(square(x)));
  EXPECT_EQ(t.grad(x).storage(), (std::vector<double>{2, 4}));
}

TEST(Backward, MeanSpreadsEvenly) {
  Tape<double> t;
  auto x = t.variable(Tensor<double>::vector({3, -1, 4, 1}));
  t.backward(mean(x));
  EXPECT_EQ(t.grad(x).storage(), (std::vector<double>(4, 0.25)));
}

TEST(Backward, FanOutAccumulates) {
  Tape<double> t;
  auto x = t.variable(Tensor<double>::vector({5}));
  t.backward(sum(add(x, x)));
  EXPECT_EQ(t.grad(x)[0], 2.0);
}

TEST(Backward, EmptyTapeIsUsageError) {
  Tape<double> t;
  Var<double> none{&t, 0};
  EXPECT_THROW(t.backward(none), UsageError);
}

TEST(Backward, SoftmaxLogMatchesFiniteDifferences) {
  ScalarGraph<double> f = [](Tape<double>&, Var<double> x) {
    auto r = reshape(x, {1, 7});
    return sum(mul(log(softmax(r)), r));
  };
  auto x = random_tensor({7}, 5, -2, 2);
  EXPECT_LT(max_rel(analytic_grad(f, x), numeric_grad(f, x, 1e-5)), 1e-6);
}

// Every primitive on 100 random inputs against the test's own finite differences.
TEST(Backward, PrimitivesAgreeWithFiniteDifferences) {
  const std::vector<std::pair<std::string, ScalarGraph<double>>> graphs{
      {"add", [](Tape<double>& t, Var<double> x) { return sum(mul(add(x, t.constant(Tensor<double>::vector({1, 2, 3}))), x)); }},
      {"sub", [](Tape<double>&, Var<double> x) { return sum(square(sub(x, scale(x, 0.3)))); }},
      {"div", [](Tape<double>& t, Var<double> x) { return sum(div(x, add_scalar(square(x), 1.5))); }},
      {"leaky_relu", [](Tape<double>&, Var<double> x) { return sum(mul(leaky_relu(x, 0.2), x)); }},
      {"sigmoid", [](Tape<double>&, Var<double> x) { return sum(sigmoid(x)); }},
      {"tanh", [](Tape<double>&, Var<double> x) { return sum(aim::tanh(x)); }},
      {"scaled_sigmoid", [](Tape<double>&, Var<double> x) { return sum(mul(scaled_sigmoid(x), x)); }},
      {"log", [](Tape<double>&, Var<double> x) { return sum(log(add_scalar(square(x), 0.5))); }},
      {"softmax", [](Tape<double>& t, Var<double> x) {
         return sum(mul(softmax(reshape(x, {1, 3})), t.constant(Tensor<double>({1, 3}, std::vector<double>{1, -2, 0.5}))));
       }},
      {"mean_axis", [](Tape<double>&, Var<double> x) { return sum(square(mean_axis(reshape(x, {3, 1}), 0))); }},
      {"concat_slice", [](Tape<double>&, Var<double> x) {
         auto c = concat<double>({x, square(x)}, 0);
         return sum(mul(slice(c, 0, 2, 5), slice(c, 0, 1, 4)));
       }},
  };
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> d(-1.5, 1.5);
  for (const auto& [name, f] : graphs) {
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
      Tensor<double> x({3});
      for (double& v : x.data()) {
        do {
          v = d(rng);
        } while (std::abs(v) < 1e-3);  // keep away from the ReLU kink
      }
      worst = std::max(worst, max_rel(analytic_grad(f, x), numeric_grad(f, x)));
    }
    EXPECT_LT(worst, 1e-6) << name;
  }
}

TEST(Backward, ConvAndTransposeAgreeWithFiniteDifferences) {
  auto w = random_tensor({2, 2, 3, 3}, 8);
  ScalarGraph<double> conv = [&](Tape<double>& t, Var<double> x) {
    return sum(square(conv2d<double>(x, t.constant(w), nullptr, {2, 1})));
  };
  ScalarGraph<double> convt = [&](Tape<double>& t, Var<double> x) {
    return sum(square(conv_transpose2d<double>(x, t.constant(w), nullptr, {2, 1, 1})));
  };
  auto x = random_tensor({1, 2, 4, 4}, 9);
  EXPECT_LT(max_rel(analytic_grad(conv, x), numeric_grad(conv, x)), 1e-6);
  EXPECT_LT(max_rel(analytic_grad(convt, x), numeric_grad(convt, x)), 1e-6);
}

TEST(BatchNorm, TrainingOutputIsStandardized) {
  auto x = random_tensor({8, 3, 2, 2}, 12, -4, 7);
  Tape<double> t;
  BatchNormStats<double> st{Tensor<double>({3}), Tensor<double>({3}, 1.0)};
  auto y = batch_norm(t.constant(x), t.constant(Tensor<double>({3}, 1.0)), t.constant(Tensor<double>({3})), st, true);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t k = 0; k < 4; ++k, ++n) m += y.value()[(i * 3 + c) * 4 + k];
    m /= static_cast<double>(n);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t k = 0; k < 4; ++k) v += std::pow(y.value()[(i * 3 + c) * 4 + k] - m, 2);
    v /= static_cast<double>(n);
    EXPECT_LT(std::abs(m), 1e-5);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(Dropout, InvertedScalingAndEvalIdentity) {
  std::mt19937_64 rng(3);
  Tape<double> t;
  const Tensor<double> ones({1000}, 1.0);
  auto x = t.constant(ones);
  const Tensor<double> y = dropout(x, 0.7, rng, true).value();
  std::size_t kept = 0;
  for (double v : y.data()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1 / 0.7) < 1e-12);
    kept += v != 0.0;
  }
  EXPECT_NEAR(static_cast<double>(kept) / 1000.0, 0.7, 0.05);
  const Tensor<double> eval = dropout(x, 0.7, rng, false).value();
  EXPECT_EQ(eval, ones);
}

TEST(GradCheck, TanhSumIsAccurate) {
  ScalarGraph<double> f = [](Tape<double>&, Var<double> x) { return sum(aim::tanh(x)); };
  EXPECT_LT(grad_check<double>(f, random_tensor({6}, 2), 1e-6), 1e-6);
}

TEST(GradCheck, ConstantGraphHasZeroError) {
  ScalarGraph<double> f = [](Tape<double>& t, Var<double>) { return t.constant(Tensor<double>::scalar(4.0)); };
  EXPECT_EQ(grad_check<double>(f, random_tensor({3}, 2), 1e-6), 0.0);
}

TEST(GradCheck, RefusesSinglePrecision) {
  ScalarGraph<float> f = [](Tape<float>&, Var<float> x) { return sum(x); };
  EXPECT_THROW(grad_check<float>(f, Tensor<float>({2}), 1e-4f), PrecisionError);
}

TEST(GradCheck, RejectsStepOutsideRange) {
  ScalarGraph<double> f = [](Tape<double>&, Var<double> x) { return sum(x); };
  EXPECT_THROW(grad_check<double>(f, Tensor<double>({2}), 1e-2), UsageError);
}

TEST(Determinism, RepeatedPassesAreBitIdentical) {
  auto run = [] {
    auto x = random_tensor({2, 3, 6, 6}, 4);
    auto w = random_tensor({4, 3, 3, 3}, 5);
    Tape<double> t;
    auto xv = t.variable(x);
    auto y = sum(aim::tanh(conv2d<double>(xv, t.constant(w), nullptr, {2, 1})));
    t.backward(y);
    return std::make_pair(y.value().item(), t.grad(xv));
  };
  auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}
