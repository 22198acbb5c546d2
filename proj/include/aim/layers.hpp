#pragma once

#include <cstddef>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "aim/autodiff.hpp"

namespace aim {

enum class LayerKind { dense, conv, conv_transpose, batch_norm, dropout, activation, grl, flatten, concat };

enum class Activation { relu, leaky_relu, sigmoid, tanh, scaled_sigmoid, softmax, identity };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv: return "conv";
    case LayerKind::conv_transpose: return "conv-transpose";
    case LayerKind::batch_norm: return "batch-norm";
    case LayerKind::dropout: return "dropout";
    case LayerKind::activation: return "activation";
    case LayerKind::grl: return "grl";
    case LayerKind::flatten: return "flatten";
    case LayerKind::concat: return "concat";
  }
  return "?";
}

/// Declarative description of one building block. Only the fields relevant
/// to `kind` are read.
struct LayerSpec {
  LayerKind kind = LayerKind::activation;
  std::size_t in = 0;   // features or channels
  std::size_t out = 0;  // features or channels
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t output_padding = 0;
  Activation activation = Activation::identity;
  double slope = 0.2;
  double grl_coeff = 0.1;
  double keep_prob = 0.7;
  std::size_t axis = 1;

  static LayerSpec dense(std::size_t in, std::size_t out) {
    LayerSpec s;
    s.kind = LayerKind::dense;
    s.in = in;
    s.out = out;
    return s;
  }
  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding) {
    LayerSpec s;
    s.kind = LayerKind::conv;
    s.in = in;
    s.out = out;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    return s;
  }
  // Padding and output padding are chosen so the spatial size is multiplied
  // by `stride` exactly.
  static LayerSpec conv_transpose(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride) {
    LayerSpec s;
    s.kind = LayerKind::conv_transpose;
    s.in = in;
    s.out = out;
    s.kernel = kernel;
    s.stride = stride;
    const long excess = static_cast<long>(kernel) - static_cast<long>(stride);
    s.padding = excess > 0 ? static_cast<std::size_t>((excess + 1) / 2) : 0;
    s.output_padding = static_cast<std::size_t>(2 * static_cast<long>(s.padding) - excess);
    return s;
  }
  static LayerSpec batch_norm(std::size_t channels) {
    LayerSpec s;
    s.kind = LayerKind::batch_norm;
    s.in = s.out = channels;
    return s;
  }
  static LayerSpec dropout(double keep) {
    LayerSpec s;
    s.kind = LayerKind::dropout;
    s.keep_prob = keep;
    return s;
  }
  static LayerSpec act(Activation a, double slope = 0.2) {
    LayerSpec s;
    s.kind = LayerKind::activation;
    s.activation = a;
    s.slope = slope;
    return s;
  }
  static LayerSpec grl(double coeff) {
    LayerSpec s;
    s.kind = LayerKind::grl;
    s.grl_coeff = coeff;
    return s;
  }
  static LayerSpec flatten() {
    LayerSpec s;
    s.kind = LayerKind::flatten;
    return s;
  }
  // Concatenates the forward context's condition tensor along `axis`.
  static LayerSpec concat(std::size_t axis) {
    LayerSpec s;
    s.kind = LayerKind::concat;
    s.axis = axis;
    return s;
  }

  void validate() const {
    auto fail = [&](const std::string& why) { throw ConfigError(std::string(to_string(kind)) + " layer: " + why); };
    switch (kind) {
      case LayerKind::dense:
      case LayerKind::batch_norm:
        if (in == 0 || out == 0) fail("feature/channel counts must be positive");
        break;
      case LayerKind::conv:
      case LayerKind::conv_transpose:
        if (in == 0 || out == 0) fail("channel counts must be positive");
        if (kernel == 0) fail("kernel size must be positive");
        if (stride == 0) fail("stride must be positive");
        break;
      case LayerKind::grl:
        if (!(grl_coeff >= 0)) fail("coefficient must be >= 0");
        break;
      case LayerKind::dropout:
        if (!(keep_prob > 0 && keep_prob <= 1)) fail("keep probability must be in (0, 1]");
        break;
      default:
        break;
    }
  }
};

/// Per-call state threaded through a network's forward pass.
template <typename T>
struct ForwardContext {
  bool training = false;
  // Discriminator-side parameters are bound read-only during generator updates.
  bool frozen = false;
  std::mt19937_64* rng = nullptr;
  const Var<T>* condition = nullptr;

  Var<T> bind(Tape<T>& tape, Parameter<T>& p) const { return frozen ? tape.frozen(p) : tape.param(p); }
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Var<T> forward(Tape<T>& tape, Var<T> x, const ForwardContext<T>& ctx) = 0;
  virtual std::vector<Parameter<T>*> parameters() { return {}; }
  // Non-trainable state that must survive a checkpoint (batch-norm statistics).
  virtual std::vector<std::pair<std::string, Tensor<T>*>> buffers() { return {}; }
};

template <typename T>
Tensor<T> gaussian(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
class Dense final : public Layer<T> {
 public:
  Dense(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng, double init_std)
      : weight_(name + "/weight", gaussian<T>({in, out}, init_std, rng)), bias_(name + "/bias", Tensor<T>({1, out})) {}

  Var<T> forward(Tape<T>& tape, Var<T> x, const ForwardContext<T>& ctx) override {
    return add(matmul(x, ctx.bind(tape, weight_)), ctx.bind(tape, bias_));
  }
  std::vector<Parameter<T>*> parameters() override { return {&weight_, &bias_}; }

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }

 private:
  Parameter<T> weight_;
  Parameter<T> bias_;
};

template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(const std::string& name, const LayerSpec& s, std::mt19937_64& rng, double init_std)
      : weight_(name + "/weight", gaussian<T>({s.out, s.in, s.kernel, s.kernel}, init_std, rng)),
        bias_(name + "/bias", Tensor<T>({s.out})),
        opt_{s.stride, s.padding} {}

  Var<T> forward(Tape<T>& tape, Var<T> x, const ForwardContext<T>& ctx) override {
    Var<T> b = ctx.bind(tape, bias_);
    return conv2d(x, ctx.bind(tape, weight_), &b, opt_);
  }
  std::vector<Parameter<T>*> parameters() override { return {&weight_, &bias_}; }

 private:
  Parameter<T> weight_;
  Parameter<T> bias_;
  Conv2dOptions opt_;
};

template <typename T>
class ConvTranspose2d final : public Layer<T> {
 public:
  ConvTranspose2d(const std::string& name, const LayerSpec& s, std::mt19937_64& rng, double init_std)
      : weight_(name + "/weight", gaussian<T>({s.in, s.out, s.kernel, s.kernel}, init_std, rng)),
        bias_(name + "/bias", Tensor<T>({s.out})),
        opt_{s.stride, s.padding, s.output_padding} {}

  Var<T> forward(Tape<T>& tape, Var<T> x, const ForwardContext<T>& ctx) override {
    Var<T> b = ctx.bind(tape, bias_);
    return conv_transpose2d(x, ctx.bind(tape, weight_), &b, opt_);
  }
  std::vector<Parameter<T>*> parameters() override { return {&weight_, &bias_}; }

 private:
  Parameter<T> weight_;
  Parameter<T> bias_;
  ConvTranspose2dOptions opt_;
};

template <typename T>
class BatchNorm final : public Layer<T> {
 public:
  BatchNorm(const std::string& name, std::size_t channels)
      : gamma_(name + "/gamma", Tensor<T>({channels}, T{1})), beta_(name + "/beta", Tensor<T>({channels})), name_(name) {
    stats_.running_mean = Tensor<T>({channels});
    stats_.running_var = Tensor<T>({channels}, T{1});
  }

  Var<T> forward(Tape<T>& tape, Var<T> x, const ForwardContext<T>& ctx) override {
    return batch_norm(x, ctx.bind(tape, gamma_), ctx.bind(tape, beta_), stats_, ctx.training);
  }
  std::vector<Parameter<T>*> parameters() override { return {&gamma_, &beta_}; }
  std::vector<std::pair<std::string, Tensor<T>*>> buffers() override {
    return {{name_ + "/running_mean", &stats_.running_mean}, {name_ + "/running_var", &stats_.running_var}};
  }

 private:
  Parameter<T> gamma_;
  Parameter<T> beta_;
  BatchNormStats<T> stats_;
  std::string name_;
};

template <typename T>
class Dropout final : public Layer<T> {
 public:
  explicit Dropout(double keep) : keep_(static_cast<T>(keep)) {}

  Var<T> forward(Tape<T>&, Var<T> x, const ForwardContext<T>& ctx) override {
    if (ctx.training && !ctx.rng) throw UsageError("dropout: training mode requires an rng");
    std::mt19937_64 unused;
    return dropout(x, keep_, ctx.rng ? *ctx.rng : unused, ctx.training);
  }

 private:
  T keep_;
};

template <typename T>
Var<T> apply_activation(Var<T> x, Activation a, T slope) {
  switch (a) {
    case Activation::relu: return relu(x);
    case Activation::leaky_relu: return leaky_relu(x, slope);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::tanh: return aim::tanh(x);
    case Activation::scaled_sigmoid: return scaled_sigmoid(x);
    case Activation::softmax: return softmax(x);
    case Activation::identity: return x;
  }
  return x;
}

template <typename T>
class ActivationLayer final : public Layer<T> {
 public:
  ActivationLayer(Activation a, double slope) : act_(a), slope_(static_cast<T>(slope)) {}

  Var<T> forward(Tape<T>&, Var<T> x, const ForwardContext<T>&) override { return apply_activation(x, act_, slope_); }

 private:
  Activation act_;
  T slope_;
};

template <typename T>
class GradientReversal final : public Layer<T> {
 public:
  explicit GradientReversal(double coeff) : coeff_(static_cast<T>(coeff)) {}

  Var<T> forward(Tape<T>&, Var<T> x, const ForwardContext<T>&) override { return gradient_reversal(x, coeff_); }

  T coeff() const { return coeff_; }

 private:
  T coeff_;
};

template <typename T>
class Flatten final : public Layer<T> {
 public:
  Var<T> forward(Tape<T>&, Var<T> x, const ForwardContext<T>&) override {
    const std::size_t n = x.value().dim(0);
    return reshape(x, {n, x.value().size() / n});
  }
};

// Concatenates the context's condition tensor onto the input.
template <typename T>
class ConcatCondition final : public Layer<T> {
 public:
  explicit ConcatCondition(std::size_t axis) : axis_(axis) {}

  Var<T> forward(Tape<T>&, Var<T> x, const ForwardContext<T>& ctx) override {
    if (!ctx.condition) throw UsageError("concat layer: no condition tensor supplied");
    return concat<T>({x, *ctx.condition}, axis_);
  }

 private:
  std::size_t axis_;
};

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const std::string& name, const LayerSpec& s, std::mt19937_64& rng,
                                     double init_std = 0.01) {
  s.validate();
  switch (s.kind) {
    case LayerKind::dense: return std::make_unique<Dense<T>>(name, s.in, s.out, rng, init_std);
    case LayerKind::conv: return std::make_unique<Conv2d<T>>(name, s, rng, init_std);
    case LayerKind::conv_transpose: return std::make_unique<ConvTranspose2d<T>>(name, s, rng, init_std);
    case LayerKind::batch_norm: return std::make_unique<BatchNorm<T>>(name, s.out);
    case LayerKind::dropout: return std::make_unique<Dropout<T>>(s.keep_prob);
    case LayerKind::activation: return std::make_unique<ActivationLayer<T>>(s.activation, s.slope);
    case LayerKind::grl: return std::make_unique<GradientReversal<T>>(s.grl_coeff);
    case LayerKind::flatten: return std::make_unique<Flatten<T>>();
    case LayerKind::concat: return std::make_unique<ConcatCondition<T>>(s.axis);
  }
  throw ConfigError("unknown layer kind");
}

/// A chain of layers built from specs.
template <typename T>
class Sequential {
 public:
  Sequential() = default;
  Sequential(const std::string& name, const std::vector<LayerSpec>& specs, std::mt19937_64& rng, double init_std = 0.01) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      layers_.push_back(make_layer<T>(name + "/" + std::to_string(i) + "_" + to_string(specs[i].kind), specs[i], rng, init_std));
    }
    specs_ = specs;
  }

  Var<T> forward(Tape<T>& tape, Var<T> x, const ForwardContext<T>& ctx) {
    for (auto& l : layers_) x = l->forward(tape, x, ctx);
    return x;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& l : layers_)
      for (auto* p : l->parameters()) out.push_back(p);
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> buffers() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto& l : layers_)
      for (auto& b : l->buffers()) out.push_back(b);
    return out;
  }

  std::size_t size() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_[i]; }
  const std::vector<LayerSpec>& specs() const { return specs_; }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  std::vector<LayerSpec> specs_;
};

}  // namespace aim
