#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "aim/layers.hpp"
#include "aim/losses.hpp"
#include "aim/networks.hpp"

namespace aim {

struct GradCheckResult {
  std::string component;
  std::string category;  // primitive, layer, network or loss
  double max_rel_error = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double eps = 1e-6;
  double tolerance = 1e-5;
  std::uint64_t seed = 0;
  std::string corrupt;  // name of a check whose graph gets a faulty backward rule
};

/// Identity in the forward pass whose backward rule is deliberately wrong
/// (scales the gradient by 1.5). Used to show the checker catches bad rules.
template <typename T>
Var<T> faulty_identity(Var<T> x) {
  return x.tape->record("faulty_identity", {x.id}, x.value(), [xi = x.id](Tape<T>& t, std::size_t self) {
    auto g = t.upstream(self);
    auto gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += T(1.5) * g[i];
  });
}

namespace detail {

using D = double;

inline Tensor<D> random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0, double min_abs = 0.0) {
  Tensor<D> t(s);
  for (D& v : t.data()) {
    do {
      v = lo + (hi - lo) * uniform01(rng);
    } while (std::abs(v) < min_abs);
  }
  return t;
}

// Reduces any output to a scalar with fixed random weights so every output
// coordinate contributes to the checked gradient.
inline Var<D> project(Var<D> v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(v, v.tape->constant(random_tensor(v.shape(), rng))));
}

class Suite {
 public:
  explicit Suite(const GradCheckOptions& o) : opt_(o), rng_(o.seed) {}

  void input(const std::string& name, const std::string& category, const Tensor<D>& x,
             const std::function<Var<D>(Tape<D>&, Var<D>)>& f, double numeric_scale = 1.0) {
    const bool corrupt = name == opt_.corrupt;
    const std::uint64_t pseed = rng_();
    ScalarGraph<D> g = [&, corrupt, pseed](Tape<D>& t, Var<D> v) {
      Var<D> out = f(t, corrupt ? faulty_identity(v) : v);
      return out.value().size() == 1 ? out : project(out, pseed);
    };
    push(name, category, grad_check<D>(g, x, opt_.eps, numeric_scale));
  }

  void params(const std::string& name, const std::string& category, const std::vector<Parameter<D>*>& ps,
              const std::function<Var<D>(Tape<D>&)>& f) {
    const bool corrupt = name == opt_.corrupt;
    const std::uint64_t pseed = rng_();
    auto g = [&, corrupt, pseed](Tape<D>& t) {
      Var<D> out = f(t);
      if (corrupt) out = faulty_identity(out);
      return out.value().size() == 1 ? out : project(out, pseed);
    };
    push(name, category, grad_check_params<D>(g, ps, opt_.eps));
  }

  std::mt19937_64& rng() { return rng_; }
  std::vector<GradCheckResult>& results() { return results_; }

 private:
  void push(const std::string& name, const std::string& category, double err) {
    results_.push_back({name, category, err, err < opt_.tolerance});
  }

  GradCheckOptions opt_;
  std::mt19937_64 rng_;
  std::vector<GradCheckResult> results_;
};

inline void check_primitives(Suite& s) {
  auto& rng = s.rng();
  const Tensor<D> a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), row = random_tensor({1, 4}, rng);
  const Tensor<D> pos = random_tensor({3, 4}, rng, 0.2, 2.0);
  const Tensor<D> away = random_tensor({3, 4}, rng, -1.0, 1.0, 0.05);
  s.input("add", "primitive", a, [&](Tape<D>& t, Var<D> x) { return add(x, t.constant(b)); });
  s.input("add (broadcast)", "primitive", row, [&](Tape<D>& t, Var<D> x) { return add(t.constant(a), x); });
  s.input("sub", "primitive", a, [&](Tape<D>& t, Var<D> x) { return sub(t.constant(b), x); });
  s.input("mul", "primitive", a, [&](Tape<D>& t, Var<D> x) { return mul(x, mul(x, t.constant(b))); });
  s.input("div", "primitive", pos, [&](Tape<D>& t, Var<D> x) { return div(t.constant(a), x); });
  s.input("scale", "primitive", a, [](Tape<D>&, Var<D> x) { return scale(x, -2.5); });
  s.input("add_scalar", "primitive", a, [](Tape<D>&, Var<D> x) { return square(add_scalar(x, 0.3)); });
  s.input("rsub_scalar", "primitive", a, [](Tape<D>&, Var<D> x) { return square(rsub_scalar(1.0, x)); });
  s.input("relu", "primitive", away, [](Tape<D>&, Var<D> x) { return relu(x); });
  s.input("leaky_relu", "primitive", away, [](Tape<D>&, Var<D> x) { return leaky_relu(x, 0.2); });
  s.input("sigmoid", "primitive", a, [](Tape<D>&, Var<D> x) { return sigmoid(x); });
  s.input("tanh", "primitive", a, [](Tape<D>&, Var<D> x) { return tanh(x); });
  s.input("scaled_sigmoid", "primitive", a, [](Tape<D>&, Var<D> x) { return scaled_sigmoid(x); });
  s.input("softmax", "primitive", a, [](Tape<D>&, Var<D> x) { return softmax(x); });
  s.input("log", "primitive", pos, [](Tape<D>&, Var<D> x) { return log(x, 1e-12); });
  s.input("square", "primitive", a, [](Tape<D>&, Var<D> x) { return square(x); });
  // Reversal: the backward rule is -coeff times the forward derivative.
  s.input("gradient_reversal", "primitive", a, [](Tape<D>&, Var<D> x) { return gradient_reversal(x, 0.1); }, -0.1);
  s.input("sum", "primitive", a, [](Tape<D>&, Var<D> x) { return sum(square(x)); });
  s.input("mean", "primitive", a, [](Tape<D>&, Var<D> x) { return mean(square(x)); });
  s.input("sum_axis", "primitive", a, [](Tape<D>&, Var<D> x) { return sum_axis(x, 1); });
  s.input("mean_axis", "primitive", a, [](Tape<D>&, Var<D> x) { return mean_axis(x, 0); });
  s.input("reshape", "primitive", a, [](Tape<D>&, Var<D> x) { return reshape(x, {2, 6}); });
  s.input("concat", "primitive", a, [&](Tape<D>& t, Var<D> x) { return concat<D>({x, t.constant(b), x}, 1); });
  s.input("slice", "primitive", a, [](Tape<D>&, Var<D> x) { return slice(x, 1, 1, 3); });
  const Tensor<D> m = random_tensor({4, 5}, rng);
  s.input("matmul (left)", "primitive", a, [&](Tape<D>& t, Var<D> x) { return matmul(x, t.constant(m)); });
  s.input("matmul (right)", "primitive", m, [&](Tape<D>& t, Var<D> x) { return matmul(t.constant(a), x); });

  const Tensor<D> img = random_tensor({2, 3, 5, 5}, rng);
  const Tensor<D> w = random_tensor({4, 3, 3, 3}, rng), bias = random_tensor({4}, rng);
  s.input("conv2d (input)", "primitive", img, [&](Tape<D>& t, Var<D> x) {
    Var<D> bv = t.constant(bias);
    return conv2d(x, t.constant(w), &bv, {2, 1});
  });
  s.input("conv2d (weight)", "primitive", w, [&](Tape<D>& t, Var<D> x) { return conv2d<D>(t.constant(img), x, nullptr, {1, 1}); });
  s.input("conv2d (bias)", "primitive", bias, [&](Tape<D>& t, Var<D> x) { return conv2d(t.constant(img), t.constant(w), &x, {2, 0}); });
  const Tensor<D> small = random_tensor({2, 3, 3, 3}, rng);
  const Tensor<D> wt = random_tensor({3, 2, 3, 3}, rng), bt = random_tensor({2}, rng);
  s.input("conv_transpose2d (input)", "primitive", small, [&](Tape<D>& t, Var<D> x) {
    Var<D> bv = t.constant(bt);
    return conv_transpose2d(x, t.constant(wt), &bv, {2, 1, 1});
  });
  s.input("conv_transpose2d (weight)", "primitive", wt,
          [&](Tape<D>& t, Var<D> x) { return conv_transpose2d<D>(t.constant(small), x, nullptr, {2, 1, 1}); });
  s.input("conv_transpose2d (bias)", "primitive", bt,
          [&](Tape<D>& t, Var<D> x) { return conv_transpose2d(t.constant(small), t.constant(wt), &x, {1, 0, 0}); });

  const Tensor<D> gamma = random_tensor({3}, rng, 0.5, 1.5), beta = random_tensor({3}, rng);
  s.input("batch_norm (train, NCHW)", "primitive", img, [&](Tape<D>& t, Var<D> x) {
    BatchNormStats<D> st{Tensor<D>({3}), Tensor<D>({3}, 1.0)};
    return batch_norm(x, t.constant(gamma), t.constant(beta), st, true);
  });
  s.input("batch_norm (gamma)", "primitive", gamma, [&](Tape<D>& t, Var<D> x) {
    BatchNormStats<D> st{Tensor<D>({3}), Tensor<D>({3}, 1.0)};
    return batch_norm(t.constant(img), x, t.constant(beta), st, true);
  });
  const Tensor<D> flat = random_tensor({6, 3}, rng);
  s.input("batch_norm (train, NC)", "primitive", flat, [&](Tape<D>& t, Var<D> x) {
    BatchNormStats<D> st{Tensor<D>({3}), Tensor<D>({3}, 1.0)};
    return batch_norm(x, t.constant(gamma), t.constant(beta), st, true);
  });
  const Tensor<D> running_mean = random_tensor({3}, rng);
  s.input("batch_norm (inference)", "primitive", img, [&](Tape<D>& t, Var<D> x) {
    BatchNormStats<D> st{running_mean, Tensor<D>({3}, 0.7)};
    return batch_norm(x, t.constant(gamma), t.constant(beta), st, false);
  });
  s.input("dropout", "primitive", a, [](Tape<D>&, Var<D> x) {
    std::mt19937_64 r(7);  // same mask for every evaluation
    return dropout(x, 0.7, r, true);
  });
}

inline void check_layers(Suite& s) {
  auto& rng = s.rng();
  struct Case {
    std::string name;
    std::vector<LayerSpec> specs;
    Shape input;
    bool needs_condition = false;
    double min_abs = 0.0;
    double numeric_scale = 1.0;
  };
  const std::vector<Case> cases{
      {"Dense", {LayerSpec::dense(5, 4)}, {3, 5}},
      {"Conv2d", {LayerSpec::conv(3, 4, 3, 2, 1)}, {2, 3, 6, 6}},
      {"ConvTranspose2d", {LayerSpec::conv_transpose(3, 2, 3, 2)}, {2, 3, 3, 3}},
      {"BatchNorm", {LayerSpec::batch_norm(3)}, {4, 3, 2, 2}},
      {"Dropout", {LayerSpec::dropout(0.7)}, {3, 5}},
      {"Activation relu", {LayerSpec::act(Activation::relu)}, {3, 5}, false, 0.05},
      {"Activation leaky_relu", {LayerSpec::act(Activation::leaky_relu, 0.2)}, {3, 5}, false, 0.05},
      {"Activation sigmoid", {LayerSpec::act(Activation::sigmoid)}, {3, 5}},
      {"Activation tanh", {LayerSpec::act(Activation::tanh)}, {3, 5}},
      {"Activation scaled_sigmoid", {LayerSpec::act(Activation::scaled_sigmoid)}, {3, 5}},
      {"Activation softmax", {LayerSpec::act(Activation::softmax)}, {3, 5}},
      {"GradientReversal", {LayerSpec::grl(0.1), LayerSpec::dense(5, 2)}, {3, 5}, false, 0.0, -0.1},
      {"Flatten", {LayerSpec::flatten(), LayerSpec::dense(12, 2)}, {2, 3, 2, 2}},
      {"ConcatCondition", {LayerSpec::concat(1), LayerSpec::dense(12, 3)}, {2, 5}, true},
  };
  for (const auto& c : cases) {
    std::mt19937_64 init(rng());
    auto seq = std::make_shared<Sequential<D>>("gc", c.specs, init, 0.5);
    const Tensor<D> cond = random_tensor({c.input[0], 7}, rng);
    const std::uint64_t drop_seed = rng();
    auto run = [seq, cond, drop_seed, needs = c.needs_condition](Tape<D>& t, Var<D> x) {
      std::mt19937_64 r(drop_seed);
      ForwardContext<D> ctx{true, false, &r, nullptr};
      Var<D> cv = t.constant(cond);
      if (needs) ctx.condition = &cv;
      return seq->forward(t, x, ctx);
    };
    const Tensor<D> x = random_tensor(c.input, rng, -1.0, 1.0, c.min_abs);
    s.input(c.name + " (input)", "layer", x, run, c.numeric_scale);
    auto ps = seq->parameters();
    if (!ps.empty()) s.params(c.name + " (params)", "layer", ps, [run, x](Tape<D>& t) { return run(t, t.constant(x)); });
  }
}

inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.feature_dim = 6;
  c.num_identities = 3;
  c.encoder_widths = {2, 3};
  c.decoder_widths = {3, 2};
  c.patch_widths = {2};
  c.mlp_hidden = 5;
  c.init_std = 0.3;
  return c;
}

inline void check_networks_and_losses(Suite& s) {
  auto& rng = s.rng();
  const ModelConfig cfg = tiny_model_config();
  auto model = std::make_shared<AIMModel<D>>(cfg, LossWeights{}, rng());
  const std::size_t n = 3;
  const Tensor<D> x = random_tensor({n, 3, cfg.image_size, cfg.image_size}, rng);
  const Tensor<D> f = random_tensor({n, cfg.feature_dim}, rng, -0.9, 0.9);
  const Tensor<D> prior = random_tensor({n, cfg.feature_dim}, rng);
  std::vector<AgeCode> codes{age_code(0), age_code(3), code_at(4.5)};
  const Tensor<D> code = code_batch<D>(codes);
  const std::uint64_t drop_seed = rng();
  auto ctx_for = [](std::mt19937_64& r) { return ForwardContext<D>{true, false, &r, nullptr}; };

  s.params("Encoder", "network", model->encoder().net().parameters(), [=](Tape<D>& t) {
    std::mt19937_64 r(drop_seed);
    return model->encode(t, t.constant(x), ctx_for(r));
  });
  s.input("Encoder (input)", "network", x, [=](Tape<D>& t, Var<D> v) {
    std::mt19937_64 r(drop_seed);
    return model->encode(t, v, ctx_for(r));
  });
  s.params("Decoder", "network", model->decoder().parameters(), [=](Tape<D>& t) {
    std::mt19937_64 r(drop_seed);
    return model->decode(t, t.constant(f), t.constant(code), t.constant(x), ctx_for(r)).image;
  });
  s.input("Decoder (feature input)", "network", f, [=](Tape<D>& t, Var<D> v) {
    std::mt19937_64 r(drop_seed);
    return model->decode(t, v, t.constant(code), t.constant(x), ctx_for(r)).image;
  });
  s.params("LatentDiscriminator", "network", model->latent_discriminator().parameters(), [=](Tape<D>& t) {
    std::mt19937_64 r(drop_seed);
    auto j = model->discriminate_latent(t, t.constant(f), ctx_for(r));
    return concat<D>({j.realness, j.identity_logits}, 1);
  });
  s.params("PatchDiscriminator", "network", model->patch_discriminator().parameters(), [=](Tape<D>& t) {
    std::mt19937_64 r(drop_seed);
    auto j = model->discriminate_patches(t, t.constant(x), code, ctx_for(r));
    return add(sum(j.patch_scores), project(j.age_estimate, 11));
  });
  s.input("PatchDiscriminator (image input)", "network", x, [=](Tape<D>& t, Var<D> v) {
    std::mt19937_64 r(drop_seed);
    auto j = model->discriminate_patches(t, v, code, ctx_for(r));
    return add(sum(j.patch_scores), project(j.age_estimate, 11));
  });
  s.params("DomainClassifier", "network", model->domain_classifier().parameters(), [=](Tape<D>& t) {
    std::mt19937_64 r(drop_seed);
    return model->classify_domain(t, t.constant(f), ctx_for(r));
  });
  s.input(
      "DomainClassifier (input, reversed)", "network", f,
      [=](Tape<D>& t, Var<D> v) {
        std::mt19937_64 r(drop_seed);
        return model->classify_domain(t, v, ctx_for(r));
      },
      -cfg.grl_coeff);
  s.params("Regularizer", "network", model->regularizer().parameters(), [=](Tape<D>& t) {
    std::mt19937_64 r(drop_seed);
    return model->regularize_domain(t, t.constant(f), ctx_for(r));
  });

  // The nine losses, each differentiated w.r.t. the tensor the generator controls.
  const std::vector<int> phases{0, 3, 6}, ids{0, 2, 1};
  const Tensor<D> logits = random_tensor({n, 7}, rng, -2.0, 2.0);
  const Tensor<D> probs_in = random_tensor({n, 7}, rng, 0.05, 0.95);
  const Tensor<D> scores = random_tensor({4, n}, rng, 0.05, 0.95), scores2 = random_tensor({4, n}, rng, 0.05, 0.95);
  const Tensor<D> est = random_tensor({n, 7}, rng), est2 = random_tensor({n, 7}, rng);
  const Tensor<D> mask = random_tensor({n, 1, 4, 4}, rng, 0.0, 1.0);
  const Tensor<D> id_logits = random_tensor({n, 3}, rng, -2.0, 2.0);
  s.input("L_cad", "loss", logits, [&](Tape<D>&, Var<D> v) { return loss_cad(softmax(v), phases); });
  s.input("L_cer", "loss", probs_in, [](Tape<D>&, Var<D> v) { return loss_cer(v); });
  s.input("L_adv1", "loss", scores, [&](Tape<D>& t, Var<D> v) { return loss_adv1(t.constant(scores2), v).g_term; });
  s.input("L_ip", "loss", id_logits, [&](Tape<D>&, Var<D> v) { return loss_ip(v, ids); });
  s.input("L_adv2", "loss", scores, [&](Tape<D>& t, Var<D> v) { return loss_adv2(v, t.constant(scores2)).g_term; });
  s.input("L_ae", "loss", est, [&](Tape<D>& t, Var<D> v) { return loss_ae(v, t.constant(est2), t.constant(code)); });
  s.input("L_mc", "loss", x, [&](Tape<D>& t, Var<D> v) { return loss_mc(scaled_sigmoid(v), t.constant(x)); });
  s.input("L_tv", "loss", x, [](Tape<D>&, Var<D> v) { return loss_tv(v); });
  s.input("L_att", "loss", mask, [](Tape<D>&, Var<D> v) { return loss_att(v); });
}

}  // namespace detail

/// Central finite-difference checks over every primitive, layer, network and
/// loss, in 64-bit precision.
inline std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& opt = {}) {
  detail::Suite s(opt);
  detail::check_primitives(s);
  detail::check_layers(s);
  detail::check_networks_and_losses(s);
  if (!opt.corrupt.empty()) {
    bool found = false;
    for (const auto& r : s.results()) found = found || r.component == opt.corrupt;
    if (!found) throw UsageError("gradcheck: no check named '" + opt.corrupt + "'");
  }
  return s.results();
}

}  // namespace aim
