#include <gtest/gtest.h>

#include <filesystem>

#include "aim/trainer.hpp"

using namespace aim;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.feature_dim = 16;
  c.mlp_hidden = 16;
  c.encoder_widths = {4, 8, 8};
  c.decoder_widths = {8, 4, 4};
  c.patch_widths = {4, 8};
  return c;
}

const Dataset& small_data() {
  static const Dataset ds = [] {
    RenderOptions opt;
    opt.image_size = 16;
    return make_dataset(20, 6, 2, opt);
  }();
  return ds;
}

TrainConfig quick(std::uint64_t seed = 1) {
  TrainConfig t;
  t.batch_size = 8;
  t.steps = 4;
  t.seed = seed;
  return t;
}

std::vector<std::size_t> all_samples() {
  std::vector<std::size_t> v(small_data().samples.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

std::vector<Tensor<float>> snapshot(AIMModel<float>& m) {
  std::vector<Tensor<float>> out;
  for (auto& [name, t] : m.state()) out.push_back(*t);
  return out;
}

}  // namespace

TEST(Schedule, StepDecayAtConfiguredEpoch) {
  TrainConfig c;
  EXPECT_EQ(lr_schedule(0, c), 2e-4);
  EXPECT_EQ(lr_schedule(19, c), 2e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(20, c), 2e-5);
  EXPECT_DOUBLE_EQ(lr_schedule(59, c), 2e-5);
}

TEST(TrainConfig, InvalidValuesRejected) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.adam_beta1 = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstGradientSign) {
  Parameter<double> p("w", Tensor<double>({3}));
  p.grad = Tensor<double>({3}, std::vector<double>{0.5, -3.0, 1e-3});
  AdamState<double> s;
  adam_update<double>({&p}, s, {.lr = 0.1, .beta1 = 0.5, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0});
  EXPECT_NEAR(p.value[0], -0.1, 1e-6);
  EXPECT_NEAR(p.value[1], 0.1, 1e-6);
  EXPECT_NEAR(p.value[2], -0.1, 1e-4);
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Parameter<double> p("w", Tensor<double>({2}, std::vector<double>{0.3, -0.7}));
  AdamState<double> s;
  for (int i = 0; i < 3; ++i) adam_update<double>({&p}, s, {.lr = 0.1, .weight_decay = 0});
  EXPECT_EQ(p.value[0], 0.3);
  EXPECT_EQ(p.value[1], -0.7);
}

TEST(Adam, DecoupledWeightDecayShrinksValues) {
  Parameter<double> p("w", Tensor<double>({1}, std::vector<double>{2.0}));
  AdamState<double> s;
  adam_update<double>({&p}, s, {.lr = 0.1, .weight_decay = 0.5});
  EXPECT_DOUBLE_EQ(p.value[0], 2.0 * (1 - 0.05));
}

TEST(ClipGradNorm, ScalesToCap) {
  Parameter<double> a("a", Tensor<double>({1})), b("b", Tensor<double>({1}));
  a.grad[0] = 3;
  b.grad[0] = 4;
  EXPECT_DOUBLE_EQ(clip_grad_norm<double>({&a, &b}, 1.0), 5.0);
  EXPECT_DOUBLE_EQ(a.grad[0], 0.6);
  EXPECT_DOUBLE_EQ(b.grad[0], 0.8);
  EXPECT_DOUBLE_EQ(clip_grad_norm<double>({&a, &b}, 0.0), 1.0);
}

TEST(Variants, EveryTableNameParses) {
  for (const auto& n : variant_names()) EXPECT_EQ(parse_variant(n).name, n);
  EXPECT_EQ(parse_variant("w/o-L_ip").name, "w/o L_ip");
  EXPECT_EQ(parse_variant("w/o C_phi").name, "w/o C_φ");
  EXPECT_TRUE(parse_variant("baseline").encoder_only);
  EXPECT_THROW(parse_variant("w/o everything"), UsageError);
}

TEST(Variants, WeightsZeroedPerComponent) {
  const LossWeights base;
  const auto att = variant_weights(parse_variant("w/o Att."), base);
  EXPECT_EQ(att(9), 0);
  EXPECT_EQ(att(14), 0);
  EXPECT_EQ(att(7), base(7));
  const auto mc = variant_weights(parse_variant("w/o L_mc"), base);
  EXPECT_EQ(mc(7), 0);
  EXPECT_EQ(mc(12), 0);
  const auto enc = variant_weights(parse_variant("encoder-only baseline"), base);
  for (std::size_t k = 1; k <= 14; ++k) EXPECT_EQ(enc(k), k == 4 ? base(4) : 0.0) << k;
}

TEST(Checkpoint, EncodeDecodeRoundTrip) {
  Trainer<float> t(small_data(), all_samples(), tiny(), {}, quick());
  t.train_step();
  const auto bytes = encode_checkpoint(t.checkpoint());
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_EQ(back.scalar("meta/step"), 1.0);
  EXPECT_EQ(back.get_string("config/train/variant"), "full");
}

TEST(Checkpoint, TruncatedFileRejected) {
  Trainer<float> t(small_data(), all_samples(), tiny(), {}, quick());
  auto bytes = encode_checkpoint(t.checkpoint());
  bytes.resize(bytes.size() / 2);
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
  EXPECT_THROW(decode_checkpoint({}), FormatError);
}

TEST(Checkpoint, IncompleteBundleLeavesTrainerUntouched) {
  Trainer<float> source(small_data(), all_samples(), tiny(), {}, quick(1));
  source.train_step();
  auto bundle = source.checkpoint();
  bundle.records.pop_back();  // drop the data cursor
  Trainer<float> target(small_data(), all_samples(), tiny(), {}, quick(2));
  const auto before = snapshot(target.model());
  EXPECT_THROW(target.restore(bundle), FormatError);
  EXPECT_EQ(target.step(), 0u);
  EXPECT_EQ(snapshot(target.model()), before);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  const auto dir = fs::temp_directory_path() / "aim_trainer_resume";
  fs::create_directories(dir);
  Trainer<float> straight(small_data(), all_samples(), tiny(), {}, quick());
  straight.train_step();
  straight.train_step();
  save_checkpoint(straight.checkpoint(), dir / "c.aimc");
  const auto expected = straight.train_step();

  Trainer<float> resumed(small_data(), all_samples(), tiny(), {}, quick());
  resumed.restore(load_checkpoint(dir / "c.aimc"));
  EXPECT_EQ(resumed.step(), 2u);
  const auto got = resumed.train_step();
  EXPECT_EQ(got.step, 3u);
  EXPECT_EQ(got.csv_row(), expected.csv_row());
  EXPECT_EQ(snapshot(resumed.model()), snapshot(straight.model()));
}

TEST(Trainer, SameSeedSameTrajectory) {
  Trainer<float> a(small_data(), all_samples(), tiny(), {}, quick(5));
  Trainer<float> b(small_data(), all_samples(), tiny(), {}, quick(5));
  for (int i = 0; i < 3; ++i) EXPECT_EQ(a.train_step().csv_row(), b.train_step().csv_row());
  Trainer<float> c(small_data(), all_samples(), tiny(), {}, quick(6));
  EXPECT_NE(snapshot(c.model()), snapshot(a.model()));
}

TEST(Trainer, BaselineTouchesOnlyEncoderAndLatentDiscriminator) {
  TrainConfig cfg = quick();
  cfg.variant = parse_variant("baseline");
  Trainer<float> t(small_data(), all_samples(), tiny(), {}, cfg);
  std::map<std::string, std::vector<Tensor<float>>> before;
  for (auto& g : t.model().groups())
    for (auto* p : g.params) before[g.name].push_back(p->value);
  t.train_step();
  for (auto& g : t.model().groups()) {
    bool changed = false;
    for (std::size_t i = 0; i < g.params.size(); ++i) changed |= !(g.params[i]->value == before[g.name][i]);
    const bool expected = g.name == "encoder" || g.name == "d_latent";
    EXPECT_EQ(changed, expected) << g.name;
  }
}

TEST(Trainer, DecoderGradientScalesLinearlyWithWeight) {
  AIMModel<double> m(tiny(), {}, 3);
  const auto& ds = small_data();
  Tensor<double> x({2, 3, 16, 16});
  const std::size_t per = 3 * 16 * 16;
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = ds.samples[i / per].image[i % per];
  auto decoder_grads = [&](double lambda) {
    std::vector<Parameter<double>*> params;
    for (auto& g : m.groups())
      if (g.name == "decoder") params = g.params;
    for (auto* p : params) p->zero_grad();
    Tape<double> t;
    ForwardContext<double> ctx;
    auto xv = t.constant(x);
    auto f = m.encode(t, xv, ctx);
    auto syn = m.decode(t, f, t.constant(code_batch<double>(std::vector<AgeCode>{age_code(1), age_code(5)})), xv, ctx);
    t.backward(scale(loss_mc(syn.image, xv), lambda));
    std::vector<double> out;
    for (auto* p : params) out.insert(out.end(), p->grad.data().begin(), p->grad.data().end());
    return out;
  };
  const auto one = decoder_grads(0.1);
  const auto two = decoder_grads(0.2);
  ASSERT_FALSE(one.empty());
  for (std::size_t i = 0; i < one.size(); ++i) EXPECT_EQ(two[i], 2 * one[i]);
}

// Manifold consistency alone (its encoder and decoder weights) drives the generator toward reconstruction.
TEST(Trainer, ManifoldTermAloneReducesReconstructionError) {
  LossWeights w;
  w.lambda.fill(0);
  w(7) = 1;
  w(12) = 1;
  TrainConfig cfg = quick();
  cfg.steps = 500;
  cfg.batch_size = 16;
  cfg.adam_alpha = 2e-3;
  cfg.lr_decay_epoch = 1000;  // 500 steps are ~67 epochs of this small set
  Trainer<float> t(small_data(), all_samples(), tiny(), w, cfg);
  double first = -1, last = 0;
  t.train([&](const LossReport& r) {
    const double v = *r.parts[LossTerm::mc];
    if (first < 0) first = v;
    last = v;
  });
  EXPECT_LT(last, 0.1 * first) << "initial " << first << " final " << last;
}
