#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "aim/losses.hpp"

using namespace aim;

namespace {

Tensor<double> random_tensor(Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(std::move(s));
  for (double& v : t.data()) v = d(rng);
  return t;
}

Tensor<double> full(Shape s, double v) { return Tensor<double>(std::move(s), v); }

double eval(const std::function<Var<double>(Tape<double>&)>& f) {
  Tape<double> t;
  return f(t).value().item();
}

Tensor<double> numeric_grad(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& x, double eps = 1e-6) {
  Tensor<double> g(x.shape());
  Tensor<double> p = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double o = p[i];
    p[i] = o + eps;
    const double up = f(p);
    p[i] = o - eps;
    const double down = f(p);
    p[i] = o;
    g[i] = (up - down) / (2 * eps);
  }
  return g;
}

// Row-normalized random probabilities.
Tensor<double> random_probs(std::size_t n, std::size_t k, std::uint64_t seed) {
  auto t = random_tensor({n, k}, seed, 0.1, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) s += t[i * k + j];
    for (std::size_t j = 0; j < k; ++j) t[i * k + j] /= s;
  }
  return t;
}

}  // namespace

TEST(LossWeights, Defaults) {
  LossWeights w;
  const std::array<double, 14> expected{0.1, 0.1, 0.01, 1.0, 0.01, 0.05, 0.1, 1e-5, 0.03, 0.01, 0.05, 0.1, 1e-5, 0.03};
  EXPECT_EQ(w.lambda, expected);
  w(3) = -1;
  EXPECT_THROW(w.validate(), ConfigError);
}

TEST(LossCad, PerfectAndUniformClassifiers) {
  const std::vector<int> labels{0, 3, 6};
  Tensor<double> onehot({3, 7});
  for (std::size_t i = 0; i < 3; ++i) onehot[i * 7 + static_cast<std::size_t>(labels[i])] = 1;
  EXPECT_NEAR(eval([&](Tape<double>& t) { return loss_cad(t.constant(onehot), std::span<const int>(labels)); }), 0.0, 1e-12);
  EXPECT_NEAR(eval([&](Tape<double>& t) { return loss_cad(t.constant(full({3, 7}, 1.0 / 7)), std::span<const int>(labels)); }),
              std::log(7.0), 1e-12);
}

TEST(LossCad, ZeroProbabilityIsClamped) {
  const std::vector<int> labels{1};
  Tensor<double> p({1, 7});
  p[0] = 1;
  const double v = eval([&](Tape<double>& t) { return loss_cad(t.constant(p), std::span<const int>(labels)); });
  EXPECT_NEAR(v, -std::log(1e-12), 1e-9);
}

TEST(LossCer, UniformOutputMatchesDirectEvaluation) {
  const double p = 1.0 / 7;
  const double direct = 7 * (-p * std::log(p) - (1 - p) * std::log(1 - p));
  EXPECT_NEAR(eval([](Tape<double>& t) { return loss_cer(t.constant(full({4, 7}, 1.0 / 7))); }), direct, 1e-12);
}

TEST(LossCer, StationaryAtSmoothedTarget) {
  Tape<double> t;
  auto p = t.variable(full({2, 7}, 1.0 / 7));
  t.backward(loss_cer(p));
  const auto gp = t.grad(p);
  for (double g : gp.data()) EXPECT_NEAR(g, 0.0, 1e-12);
}

TEST(LossCer, MinimizedAtSmoothedTarget) {
  const double at_target = eval([](Tape<double>& t) { return loss_cer(t.constant(full({1, 7}, 1.0 / 7))); });
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto q = random_probs(1, 7, s);
    EXPECT_GT(eval([&](Tape<double>& t) { return loss_cer(t.constant(q)); }), at_target);
  }
}

TEST(LossCer, SaturatedOutputStaysFinite) {
  Tensor<double> p({1, 7});
  p[2] = 1.0;
  const double v = eval([&](Tape<double>& t) { return loss_cer(t.constant(p)); });
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_GT(v, 3.0);
}

TEST(LossAdv1, HalfScoresAndPerfectDiscriminator) {
  auto half = [](Tape<double>& t) { return loss_adv1(t.constant(full({4, 1}, 0.5)), t.constant(full({4, 1}, 0.5))).d_loss; };
  EXPECT_NEAR(eval(half), 2 * std::log(2.0), 1e-12);
  auto perfect = [](Tape<double>& t) { return loss_adv1(t.constant(full({4, 1}, 1.0)), t.constant(full({4, 1}, 0.0))).d_loss; };
  EXPECT_NEAR(eval(perfect), 0.0, 1e-12);
}

TEST(LossIp, UniformAndPeakedLogits) {
  const std::vector<int> labels{0, 9, 4};
  EXPECT_NEAR(eval([&](Tape<double>& t) { return loss_ip(t.constant(full({3, 10}, 0.3)), std::span<const int>(labels)); }),
              std::log(10.0), 1e-12);
  Tensor<double> peaked({3, 10});
  for (std::size_t i = 0; i < 3; ++i) peaked[i * 10 + static_cast<std::size_t>(labels[i])] = 50;
  EXPECT_LT(eval([&](Tape<double>& t) { return loss_ip(t.constant(peaked), std::span<const int>(labels)); }), 1e-15);
}

TEST(LossIp, LabelOutOfRangeIsUsageError) {
  const std::vector<int> labels{10};
  Tape<double> t;
  EXPECT_THROW(loss_ip(t.constant(full({1, 10}, 0.0)), std::span<const int>(labels)), UsageError);
}

TEST(LossAdv2, HalfScoresAndMismatch) {
  EXPECT_NEAR(eval([](Tape<double>& t) { return loss_adv2(t.constant(full({16, 2}, 0.5)), t.constant(full({16, 2}, 0.5))).d_loss; }),
              2 * std::log(2.0), 1e-12);
  Tape<double> t;
  EXPECT_THROW(loss_adv2(t.constant(full({16, 2}, 0.5)), t.constant(full({4, 2}, 0.5))), UsageError);
}

TEST(LossAdv2, PatchesWeighUniformly) {
  // Moving one patch score changes the loss by the same amount whichever patch it is.
  auto with = [](std::size_t patch) {
    Tensor<double> fake = full({16, 1}, 0.5);
    fake[patch] = 0.9;
    return eval([&](Tape<double>& t) { return loss_adv2(t.constant(fake), t.constant(full({16, 1}, 0.5))).d_loss; });
  };
  for (std::size_t p = 1; p < 16; ++p) EXPECT_EQ(with(p), with(0));
}

TEST(LossAe, SquaredNormCases) {
  Tensor<double> c = full({1, 7}, -1.0);
  c[0] = 1;
  Tensor<double> off = c;
  off[3] += 0.1;
  Tensor<double> neg = c;
  neg[3] -= 0.1;
  EXPECT_EQ(eval([&](Tape<double>& t) { return loss_ae(t.constant(c), t.constant(c), t.constant(c)); }), 0.0);
  const double plus = eval([&](Tape<double>& t) { return loss_ae(t.constant(off), t.constant(c), t.constant(c)); });
  const double minus = eval([&](Tape<double>& t) { return loss_ae(t.constant(neg), t.constant(c), t.constant(c)); });
  EXPECT_NEAR(plus, 0.01, 1e-15);
  EXPECT_NEAR(plus, minus, 1e-15);
}

TEST(LossMc, ValuesAndGradient) {
  auto x = random_tensor({2, 3, 4, 4}, 3);
  Tensor<double> shifted = x;
  for (double& v : shifted.data()) v += 1;
  EXPECT_EQ(eval([&](Tape<double>& t) { return loss_mc(t.constant(x), t.constant(x)); }), 0.0);
  EXPECT_NEAR(eval([&](Tape<double>& t) { return loss_mc(t.constant(shifted), t.constant(x)); }), 1.0, 1e-12);
  auto y = random_tensor({2, 3, 4, 4}, 4);
  Tape<double> t;
  auto yv = t.variable(y);
  t.backward(loss_mc(yv, t.constant(x)));
  const auto g = t.grad(yv);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(g[i], 2 * (y[i] - x[i]) / static_cast<double>(y.size()), 1e-15);
  EXPECT_THROW(loss_mc(t.constant(x), t.constant(Tensor<double>({2, 3, 4, 3}))), DimensionError);
}

TEST(LossTv, FixtureAndConstantImage) {
  Tensor<double> img({1, 1, 2, 2}, std::vector<double>{0, 1, 0, 1});
  EXPECT_EQ(eval([&](Tape<double>& t) { return loss_tv(t.constant(img)); }), 2.0);
  Tape<double> t;
  auto c = t.variable(full({1, 3, 5, 5}, 0.4));
  auto v = loss_tv(c);
  EXPECT_EQ(v.value().item(), 0.0);
  t.backward(v);
  const auto gc = t.grad(c);
  for (double g : gc.data()) EXPECT_EQ(g, 0.0);
}

TEST(LossTv, TranslationInvariant) {
  auto img = random_tensor({2, 3, 5, 4}, 8);
  Tensor<double> moved = img;
  for (double& v : moved.data()) v += 0.25;
  EXPECT_NEAR(eval([&](Tape<double>& t) { return loss_tv(t.constant(img)); }),
              eval([&](Tape<double>& t) { return loss_tv(t.constant(moved)); }), 1e-12);
}

TEST(LossAtt, ZeroOnesAndCheckerboard) {
  EXPECT_EQ(eval([](Tape<double>& t) { return loss_att(t.constant(Tensor<double>({1, 1, 6, 5}))); }), 0.0);
  EXPECT_EQ(eval([](Tape<double>& t) { return loss_att(t.constant(full({1, 1, 6, 5}, 1.0))); }), 30.0);
  Tensor<double> checker({1, 1, 4, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) checker[i * 4 + j] = (i + j) % 2 ? 1.0 : 0.0;
  EXPECT_GT(eval([&](Tape<double>& t) { return loss_att(t.constant(checker)); }),
            eval([](Tape<double>& t) { return loss_att(t.constant(full({1, 1, 4, 4}, 0.5))); }));
}

TEST(Composite, UnitPartsWithDefaultWeights) {
  const LossWeights w;
  const double enc = -0.1 + 0.1 - 0.01 + 1.0 - 0.01 + 0.05 + 0.1 + 1e-5 + 0.03;
  const double dec = -0.01 + 0.05 + 0.1 + 1e-5 + 0.03;
  EXPECT_NEAR(composite_encoder_loss(LossParts::all(1.0), w), enc, 1e-12);
  EXPECT_NEAR(composite_decoder_loss(LossParts::all(1.0), w), dec, 1e-12);
  EXPECT_EQ(composite_encoder_loss(LossParts::all(0.0), w), 0.0);
  EXPECT_EQ(overall_loss(LossParts::all(1.0), w), composite_encoder_loss(LossParts::all(1.0), w));
}

TEST(Composite, MissingPartIsUsageError) {
  LossParts p = LossParts::all(1.0);
  p[LossTerm::mc].reset();
  EXPECT_THROW(composite_encoder_loss(p, LossWeights{}), UsageError);
  LossWeights w;
  w(7) = 0;
  EXPECT_NO_THROW(composite_encoder_loss(p, w));
}

TEST(Composite, WeightScalingIsLinear) {
  LossParts p;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> d(0, 3);
  for (auto& v : p.values) v = d(rng);
  for (std::size_t k = 1; k <= 9; ++k) {
    LossWeights base, doubled, zero;
    doubled(k) = 2 * base(k);
    zero(k) = 0;
    const double contribution = composite_encoder_loss(p, base) - composite_encoder_loss(p, zero);
    EXPECT_NEAR(composite_encoder_loss(p, doubled) - composite_encoder_loss(p, zero), 2 * contribution, 1e-12) << k;
  }
}

TEST(Losses, NonNegativeOnRandomInputs) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto probs = random_probs(3, 7, s);
    const std::vector<int> labels{0, 2, 5};
    auto scores = random_tensor({4, 3}, s + 50, 0.01, 0.99);
    auto img = random_tensor({2, 3, 4, 4}, s + 100);
    auto mask = random_tensor({2, 1, 4, 4}, s + 150, 0, 1);
    Tape<double> t;
    EXPECT_GE(loss_cad(t.constant(probs), std::span<const int>(labels)).value().item(), 0);
    EXPECT_GE(loss_cer(t.constant(probs)).value().item(), 0);
    EXPECT_GE(loss_adv1(t.constant(scores), t.constant(scores)).d_loss.value().item(), 0);
    EXPECT_GE(loss_ip(t.constant(probs), std::span<const int>(labels)).value().item(), 0);
    EXPECT_GE(loss_adv2(t.constant(scores), t.constant(scores)).d_loss.value().item(), 0);
    EXPECT_GE(loss_ae(t.constant(probs), t.constant(probs), t.constant(probs)).value().item(), 0);
    EXPECT_GE(loss_mc(t.constant(img), t.constant(img)).value().item(), 0);
    EXPECT_GE(loss_tv(t.constant(img)).value().item(), 0);
    EXPECT_GE(loss_att(t.constant(mask)).value().item(), 0);
  }
}

// Each loss against central differences computed here.
TEST(Losses, GradientsMatchFiniteDifferences) {
  const std::vector<int> labels{1, 4};
  auto code = random_tensor({2, 7}, 1);
  auto other = random_tensor({2, 3, 4, 4}, 2);
  const std::vector<std::pair<std::string, std::function<Var<double>(Tape<double>&, Var<double>)>>> cases{
      {"L_cad", [&](Tape<double>&, Var<double> z) { return loss_cad(softmax(z), std::span<const int>(labels)); }},
      {"L_cer", [&](Tape<double>&, Var<double> z) { return loss_cer(softmax(z)); }},
      {"L_adv1", [&](Tape<double>&, Var<double> z) { return loss_adv1(sigmoid(z), sigmoid(scale(z, -0.5))).d_loss; }},
      {"L_ip", [&](Tape<double>&, Var<double> z) { return loss_ip(z, std::span<const int>(labels)); }},
      {"L_adv2", [&](Tape<double>&, Var<double> z) { return loss_adv2(sigmoid(z), sigmoid(square(z))).d_loss; }},
      {"L_ae", [&](Tape<double>& t, Var<double> z) { return loss_ae(aim::tanh(z), aim::tanh(scale(z, 2.0)), t.constant(code)); }},
  };
  for (const auto& [name, f] : cases) {
    auto z = random_tensor({2, 7}, 7);
    Tape<double> t;
    auto zv = t.variable(z);
    t.backward(f(t, zv));
    auto analytic = t.grad(zv);
    auto numeric = numeric_grad(
        [&](const Tensor<double>& at) {
          Tape<double> u;
          return f(u, u.constant(at)).value().item();
        },
        z);
    for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(analytic[i], numeric[i], 1e-5 * std::max(1.0, std::abs(analytic[i]))) << name;
  }
  const std::vector<std::pair<std::string, std::function<Var<double>(Tape<double>&, Var<double>)>>> image_cases{
      {"L_mc", [&](Tape<double>& t, Var<double> x) { return loss_mc(x, t.constant(other)); }},
      {"L_tv", [&](Tape<double>&, Var<double> x) { return loss_tv(x); }},
      {"L_att", [&](Tape<double>&, Var<double> x) { return loss_att(sigmoid(slice(x, 1, 0, 1))); }},
  };
  for (const auto& [name, f] : image_cases) {
    auto x = random_tensor({2, 3, 4, 4}, 9);
    Tape<double> t;
    auto xv = t.variable(x);
    t.backward(f(t, xv));
    auto analytic = t.grad(xv);
    auto numeric = numeric_grad(
        [&](const Tensor<double>& at) {
          Tape<double> u;
          return f(u, u.constant(at)).value().item();
        },
        x);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(analytic[i], numeric[i], 1e-5 * std::max(1.0, std::abs(analytic[i]))) << name;
  }
}

TEST(LossReport, CsvRowCarriesEveryTerm) {
  LossReport r;
  r.step = 3;
  r.parts = LossParts::all(0.5);
  r.encoder = 1;
  EXPECT_EQ(LossReport::csv_header(), "step,L_cad,L_cer,L_adv1,L_ip,L_adv2,L_ae,L_mc,L_tv,L_att,L_enc,L_dec,L_disc");
  EXPECT_EQ(r.csv_row(), "3,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,1,0,0");
  EXPECT_EQ(r.progress_line().rfind("step=3 L_enc=", 0), 0u);
}
