#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aim/layers.hpp"
#include "aim/losses.hpp"

namespace aim {

/// Target age for synthesis: 7 values in [-1, 1]. A pure code has +1 at one
/// phase and -1 elsewhere.
struct AgeCode {
  std::array<double, kNumPhases> values{};

  bool is_pure() const { return pure_phase() >= 0; }

  int pure_phase() const {
    int phase = -1;
    for (std::size_t i = 0; i < kNumPhases; ++i) {
      if (values[i] == 1.0) {
        if (phase >= 0) return -1;
        phase = static_cast<int>(i);
      } else if (values[i] != -1.0) {
        return -1;
      }
    }
    return phase;
  }

  friend bool operator==(const AgeCode&, const AgeCode&) = default;
};

inline AgeCode age_code(int phase) {
  if (phase < 0 || phase >= static_cast<int>(kNumPhases)) {
    throw UsageError("age_code: phase " + std::to_string(phase) + " outside 0..6");
  }
  AgeCode c;
  c.values.fill(-1.0);
  c.values[static_cast<std::size_t>(phase)] = 1.0;
  return c;
}

/// (1 - t) * c1 + t * c2 between pure codes of adjacent phases.
inline AgeCode interpolate_codes(const AgeCode& c1, const AgeCode& c2, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw UsageError("interpolate_codes: t must lie in [0, 1]");
  const int p1 = c1.pure_phase(), p2 = c2.pure_phase();
  if (p1 < 0 || p2 < 0 || std::abs(p1 - p2) > 1) {
    throw UsageError("interpolate_codes: endpoints must be pure codes of adjacent phases");
  }
  if (t == 0.0) return c1;
  if (t == 1.0) return c2;
  AgeCode out;
  for (std::size_t i = 0; i < kNumPhases; ++i) out.values[i] = (1.0 - t) * c1.values[i] + t * c2.values[i];
  return out;
}

/// Code at fractional position u in [0, 6] along the phase axis.
inline AgeCode code_at(double u) {
  if (!(u >= 0.0 && u <= static_cast<double>(kNumPhases - 1))) throw UsageError("code_at: position outside [0, 6]");
  const int lo = static_cast<int>(std::floor(u));
  const int hi = std::min(lo + 1, static_cast<int>(kNumPhases - 1));
  return interpolate_codes(age_code(lo), age_code(hi), u - lo);
}

/// N x 7 tensor of codes.
template <typename T>
Tensor<T> code_batch(std::span<const AgeCode> codes) {
  Tensor<T> t({codes.size(), kNumPhases});
  for (std::size_t i = 0; i < codes.size(); ++i)
    for (std::size_t k = 0; k < kNumPhases; ++k) t[i * kNumPhases + k] = static_cast<T>(codes[i].values[k]);
  return t;
}

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t feature_dim = 256;
  std::size_t patch_size = 8;
  std::size_t num_identities = 10;
  std::vector<std::size_t> encoder_widths{32, 64, 128, 256};
  // First entry is the width of the seed feature map; each further entry is
  // one stride-2 fractionally-strided layer.
  std::vector<std::size_t> decoder_widths{128, 64, 32, 16};
  std::vector<std::size_t> patch_widths{32, 64, 128};
  std::size_t mlp_hidden = 256;
  double leaky_slope = 0.2;
  double dropout_keep = 0.7;
  double grl_coeff = 0.1;
  double init_std = 0.01;
  bool attention = true;

  void validate() const {
    if (image_size == 0 || channels == 0 || feature_dim == 0 || patch_size == 0 || num_identities == 0) {
      throw ConfigError("model: sizes must be positive");
    }
    if (image_size % patch_size != 0) {
      throw ConfigError("model: image size " + std::to_string(image_size) + " not divisible by patch size " +
                        std::to_string(patch_size));
    }
    if (encoder_widths.empty() || patch_widths.empty() || decoder_widths.size() < 2) {
      throw ConfigError("model: encoder, patch and decoder widths must be non-empty");
    }
    const std::size_t enc_div = std::size_t{1} << encoder_widths.size();
    if (image_size % enc_div != 0) throw ConfigError("model: image size must be divisible by 2^encoder depth");
    const std::size_t dec_div = std::size_t{1} << (decoder_widths.size() - 1);
    if (image_size % dec_div != 0) throw ConfigError("model: image size must be divisible by 2^decoder depth");
    const std::size_t patch_div = std::size_t{1} << patch_widths.size();
    if (patch_size % patch_div != 0) throw ConfigError("model: patch size must be divisible by 2^patch depth");
    if (!(grl_coeff >= 0)) throw ConfigError("model: GRL coefficient must be >= 0");
  }

  std::size_t patches_per_image() const { return (image_size / patch_size) * (image_size / patch_size); }
};

namespace detail {
inline void require_image(const Shape& s, std::size_t channels, std::size_t size, const char* op) {
  if (s.size() != 4 || s[1] != channels || s[2] != size || s[3] != size) {
    throw DimensionError(std::string(op) + ": expected N x " + std::to_string(channels) + " x " + std::to_string(size) +
                         " x " + std::to_string(size) + ", got " + shape_str(s));
  }
}

inline void require_features(const Shape& s, std::size_t dim, const char* op) {
  if (s.size() != 2 || s[1] != dim) {
    throw DimensionError(std::string(op) + ": expected N x " + std::to_string(dim) + " features, got " + shape_str(s));
  }
}
}  // namespace detail

/// Convolutional encoder: stride-2 conv blocks with batch norm and Leaky
/// ReLU, then a dense projection squashed by tanh.
template <typename T>
class Encoder {
 public:
  Encoder(const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    std::vector<LayerSpec> specs;
    std::size_t in = cfg.channels;
    for (std::size_t w : cfg.encoder_widths) {
      specs.push_back(LayerSpec::conv(in, w, 3, 2, 1));
      specs.push_back(LayerSpec::batch_norm(w));
      specs.push_back(LayerSpec::act(Activation::leaky_relu, cfg.leaky_slope));
      in = w;
    }
    const std::size_t side = cfg.image_size >> cfg.encoder_widths.size();
    specs.push_back(LayerSpec::flatten());
    specs.push_back(LayerSpec::dropout(cfg.dropout_keep));
    specs.push_back(LayerSpec::dense(in * side * side, cfg.feature_dim));
    specs.push_back(LayerSpec::act(Activation::tanh));
    net_ = Sequential<T>("encoder", specs, rng, cfg.init_std);
  }

  Var<T> forward(Tape<T>& tape, Var<T> x, const ForwardContext<T>& ctx) {
    detail::require_image(x.shape(), cfg_.channels, cfg_.image_size, "encode");
    return net_.forward(tape, x, ctx);
  }

  Sequential<T>& net() { return net_; }

 private:
  ModelConfig cfg_;
  Sequential<T> net_;
};

template <typename T>
struct Synthesis {
  Var<T> attention;  // N x 1 x H x W in [0, 1]
  Var<T> feature;    // N x 3 x H x W in [-1, 1]
  Var<T> image;      // blended output
};

/// x_hat = a * f + (1 - a) * x, with the single-channel mask broadcast over colour channels.
template <typename T>
Var<T> attention_blend(Var<T> attention, Var<T> feature, Var<T> input) {
  return add(mul(attention, feature), mul(rsub_scalar(T{1}, attention), input));
}

/// Decoder: (f, c) -> dense seed map -> stride-2 fractionally-strided blocks
/// -> attention (sigmoid) and feature (scaled sigmoid) heads.
template <typename T>
class Decoder {
 public:
  Decoder(const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    const std::size_t up = cfg.decoder_widths.size() - 1;
    seed_side_ = cfg.image_size >> up;
    seed_width_ = cfg.decoder_widths[0];
    seed_ = Sequential<T>("decoder/seed",
                          {LayerSpec::concat(1), LayerSpec::dense(cfg.feature_dim + kNumPhases, seed_width_ * seed_side_ * seed_side_),
                           LayerSpec::batch_norm(seed_width_ * seed_side_ * seed_side_), LayerSpec::act(Activation::relu)},
                          rng, cfg.init_std);
    std::vector<LayerSpec> specs;
    for (std::size_t i = 1; i < cfg.decoder_widths.size(); ++i) {
      specs.push_back(LayerSpec::conv_transpose(cfg.decoder_widths[i - 1], cfg.decoder_widths[i], 3, 2));
      specs.push_back(LayerSpec::batch_norm(cfg.decoder_widths[i]));
      specs.push_back(LayerSpec::act(Activation::relu));
    }
    trunk_ = Sequential<T>("decoder/trunk", specs, rng, cfg.init_std);
    const std::size_t last = cfg.decoder_widths.back();
    attention_head_ = Sequential<T>("decoder/attention",
                                    {LayerSpec::conv(last, 1, 1, 1, 0), LayerSpec::act(Activation::sigmoid)}, rng, cfg.init_std);
    feature_head_ = Sequential<T>("decoder/feature",
                                  {LayerSpec::conv(last, cfg.channels, 1, 1, 0), LayerSpec::act(Activation::scaled_sigmoid)},
                                  rng, cfg.init_std);
  }

  Synthesis<T> forward(Tape<T>& tape, Var<T> f, Var<T> code, Var<T> input, const ForwardContext<T>& ctx) {
    detail::require_features(f.shape(), cfg_.feature_dim, "decode");
    detail::require_features(code.shape(), kNumPhases, "decode (age code)");
    if (code.shape()[0] != f.shape()[0]) throw DimensionError("decode: feature/code batch sizes differ");
    detail::require_image(input.shape(), cfg_.channels, cfg_.image_size, "decode (input image)");
    ForwardContext<T> c = ctx;
    c.condition = &code;
    Var<T> h = seed_.forward(tape, f, c);
    h = reshape(h, {f.shape()[0], seed_width_, seed_side_, seed_side_});
    h = trunk_.forward(tape, h, ctx);
    Synthesis<T> out;
    out.attention = attention_head_.forward(tape, h, ctx);
    out.feature = feature_head_.forward(tape, h, ctx);
    out.image = cfg_.attention ? attention_blend(out.attention, out.feature, input) : out.feature;
    return out;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto* s : {&seed_, &trunk_, &attention_head_, &feature_head_})
      for (auto* p : s->parameters()) out.push_back(p);
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> buffers() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto* s : {&seed_, &trunk_})
      for (auto& b : s->buffers()) out.push_back(b);
    return out;
  }

 private:
  ModelConfig cfg_;
  std::size_t seed_side_ = 0;
  std::size_t seed_width_ = 0;
  Sequential<T> seed_;
  Sequential<T> trunk_;
  Sequential<T> attention_head_;
  Sequential<T> feature_head_;
};

template <typename T>
struct LatentJudgement {
  Var<T> realness;         // N x 1, sigmoid
  Var<T> identity_logits;  // N x n, unnormalized
};

/// Dual-agent MLP on the latent code: realness vs the prior, and identity.
template <typename T>
class LatentDiscriminator {
 public:
  LatentDiscriminator(const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    hidden_ = Sequential<T>("d_latent/hidden",
                            {LayerSpec::dense(cfg.feature_dim, cfg.mlp_hidden), LayerSpec::act(Activation::leaky_relu, cfg.leaky_slope)},
                            rng, cfg.init_std);
    real_head_ = Sequential<T>("d_latent/real", {LayerSpec::dense(cfg.mlp_hidden, 1), LayerSpec::act(Activation::sigmoid)}, rng,
                               cfg.init_std);
    id_head_ = Sequential<T>("d_latent/identity", {LayerSpec::dense(cfg.mlp_hidden, cfg.num_identities)}, rng, cfg.init_std);
  }

  LatentJudgement<T> forward(Tape<T>& tape, Var<T> f, const ForwardContext<T>& ctx) {
    detail::require_features(f.shape(), cfg_.feature_dim, "discriminate_latent");
    Var<T> h = hidden_.forward(tape, f, ctx);
    return {real_head_.forward(tape, h, ctx), id_head_.forward(tape, h, ctx)};
  }

  /// Realness head only (used for prior samples).
  Var<T> realness(Tape<T>& tape, Var<T> f, const ForwardContext<T>& ctx) {
    detail::require_features(f.shape(), cfg_.feature_dim, "discriminate_latent");
    return real_head_.forward(tape, hidden_.forward(tape, f, ctx), ctx);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto* s : {&hidden_, &real_head_, &id_head_})
      for (auto* p : s->parameters()) out.push_back(p);
    return out;
  }

 private:
  ModelConfig cfg_;
  Sequential<T> hidden_;
  Sequential<T> real_head_;
  Sequential<T> id_head_;
};

template <typename T>
struct PatchJudgement {
  Var<T> patch_scores;  // P x N, each in (0, 1)
  Var<T> age_estimate;  // N x 7, mean of per-patch tanh outputs
};

/// Conditional local-patch discriminator with a realness agent and an
/// age-estimation agent. The condition is broadcast as 7 constant channels.
/// The age agent sees the same backbone with those channels zeroed, so it
/// has to read the age off the image rather than copy the target code.
template <typename T>
class PatchDiscriminator {
 public:
  PatchDiscriminator(const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    std::vector<LayerSpec> specs;
    std::size_t in = cfg.channels + kNumPhases;
    for (std::size_t w : cfg.patch_widths) {
      specs.push_back(LayerSpec::conv(in, w, 3, 2, 1));
      specs.push_back(LayerSpec::act(Activation::leaky_relu, cfg.leaky_slope));
      in = w;
    }
    specs.push_back(LayerSpec::flatten());
    backbone_ = Sequential<T>("d_patch/backbone", specs, rng, cfg.init_std);
    const std::size_t side = cfg.patch_size >> cfg.patch_widths.size();
    const std::size_t flat = in * side * side;
    real_head_ = Sequential<T>("d_patch/real", {LayerSpec::dense(flat, 1), LayerSpec::act(Activation::sigmoid)}, rng, cfg.init_std);
    age_head_ = Sequential<T>("d_patch/age", {LayerSpec::dense(flat, kNumPhases), LayerSpec::act(Activation::tanh)}, rng,
                              cfg.init_std);
  }

  PatchJudgement<T> forward(Tape<T>& tape, Var<T> img, const Tensor<T>& codes, const ForwardContext<T>& ctx) {
    detail::require_image(img.shape(), cfg_.channels, cfg_.image_size, "discriminate_patches");
    const std::size_t n = img.shape()[0], size = cfg_.image_size, p = cfg_.patch_size;
    if (size % p != 0) throw ConfigError("discriminate_patches: image size not divisible by patch size");
    if (codes.shape() != Shape{n, kNumPhases}) throw DimensionError("discriminate_patches: codes must be N x 7");
    Tensor<T> planes({n, kNumPhases, size, size});
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t k = 0; k < kNumPhases; ++k) {
        T* dst = planes.data().data() + (b * kNumPhases + k) * size * size;
        std::fill(dst, dst + size * size, codes[b * kNumPhases + k]);
      }
    const std::size_t grid = size / p;
    auto patches_of = [&](Var<T> x) {
      std::vector<Var<T>> patches;
      for (std::size_t i = 0; i < grid; ++i) {
        Var<T> row = slice(x, 2, i * p, (i + 1) * p);
        for (std::size_t j = 0; j < grid; ++j) patches.push_back(slice(row, 3, j * p, (j + 1) * p));
      }
      return patches.size() == 1 ? patches[0] : concat(patches, 0);
    };
    const std::size_t count = grid * grid;
    Var<T> h = backbone_.forward(tape, patches_of(concat<T>({img, tape.constant(std::move(planes))}, 1)), ctx);
    Var<T> scores = reshape(real_head_.forward(tape, h, ctx), {count, n});
    Var<T> blank = tape.constant(Tensor<T>({n, kNumPhases, size, size}));
    Var<T> h0 = backbone_.forward(tape, patches_of(concat<T>({img, blank}, 1)), ctx);
    Var<T> ages = reshape(age_head_.forward(tape, h0, ctx), {count, n, kNumPhases});
    return {scores, mean_axis(ages, 0)};
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto* s : {&backbone_, &real_head_, &age_head_})
      for (auto* p : s->parameters()) out.push_back(p);
    return out;
  }

 private:
  ModelConfig cfg_;
  Sequential<T> backbone_;
  Sequential<T> real_head_;
  Sequential<T> age_head_;
};

/// 7-way MLP over the latent code. Used both as the domain classifier
/// (behind a gradient reversal layer) and as the regularizer.
template <typename T>
class DomainHead {
 public:
  DomainHead(const std::string& name, const ModelConfig& cfg, std::mt19937_64& rng, bool reverse_gradient)
      : cfg_(cfg), reverse_(reverse_gradient) {
    std::vector<LayerSpec> specs;
    if (reverse_gradient) specs.push_back(LayerSpec::grl(cfg.grl_coeff));
    specs.push_back(LayerSpec::dense(cfg.feature_dim, cfg.mlp_hidden));
    specs.push_back(LayerSpec::act(Activation::leaky_relu, cfg.leaky_slope));
    specs.push_back(LayerSpec::dense(cfg.mlp_hidden, kNumPhases));
    specs.push_back(LayerSpec::act(Activation::softmax));
    net_ = Sequential<T>(name, specs, rng, cfg.init_std);
  }

  Var<T> forward(Tape<T>& tape, Var<T> f, const ForwardContext<T>& ctx) {
    detail::require_features(f.shape(), cfg_.feature_dim, "domain head");
    return net_.forward(tape, f, ctx);
  }

  std::vector<Parameter<T>*> parameters() { return net_.parameters(); }
  bool reverses_gradient() const { return reverse_; }

 private:
  ModelConfig cfg_;
  bool reverse_;
  Sequential<T> net_;
};

/// The full set of networks plus the loss weights.
template <typename T>
class AIMModel {
 public:
  explicit AIMModel(const ModelConfig& cfg, const LossWeights& weights = {}, std::uint64_t seed = 0)
      : cfg_((cfg.validate(), cfg)),
        weights_((weights.validate(), weights)),
        rng_(seed),
        encoder_(cfg_, rng_),
        decoder_(cfg_, rng_),
        d_latent_(cfg_, rng_),
        d_patch_(cfg_, rng_),
        classifier_("domain_classifier", cfg_, rng_, true),
        regularizer_("regularizer", cfg_, rng_, false) {}

  AIMModel(const AIMModel&) = delete;
  AIMModel& operator=(const AIMModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const LossWeights& weights() const { return weights_; }
  std::mt19937_64& rng() { return rng_; }

  Encoder<T>& encoder() { return encoder_; }
  Decoder<T>& decoder() { return decoder_; }
  LatentDiscriminator<T>& latent_discriminator() { return d_latent_; }
  PatchDiscriminator<T>& patch_discriminator() { return d_patch_; }
  DomainHead<T>& domain_classifier() { return classifier_; }
  DomainHead<T>& regularizer() { return regularizer_; }

  Var<T> encode(Tape<T>& tape, Var<T> x, const ForwardContext<T>& ctx) { return encoder_.forward(tape, x, ctx); }
  Synthesis<T> decode(Tape<T>& tape, Var<T> f, Var<T> code, Var<T> x, const ForwardContext<T>& ctx) {
    return decoder_.forward(tape, f, code, x, ctx);
  }
  LatentJudgement<T> discriminate_latent(Tape<T>& tape, Var<T> f, const ForwardContext<T>& ctx) {
    return d_latent_.forward(tape, f, ctx);
  }
  PatchJudgement<T> discriminate_patches(Tape<T>& tape, Var<T> img, const Tensor<T>& codes, const ForwardContext<T>& ctx) {
    return d_patch_.forward(tape, img, codes, ctx);
  }
  Var<T> classify_domain(Tape<T>& tape, Var<T> f, const ForwardContext<T>& ctx) { return classifier_.forward(tape, f, ctx); }
  Var<T> regularize_domain(Tape<T>& tape, Var<T> f, const ForwardContext<T>& ctx) {
    return regularizer_.forward(tape, f, ctx);
  }

  /// Inference-mode features for a batch of images, processed in chunks.
  Tensor<T> features(const Tensor<T>& images, std::size_t chunk = 64) {
    const std::size_t n = images.dim(0);
    const std::size_t per = images.size() / n;
    Tensor<T> out({n, cfg_.feature_dim});
    ForwardContext<T> ctx;
    for (std::size_t start = 0; start < n; start += chunk) {
      const std::size_t m = std::min(chunk, n - start);
      Shape s = images.shape();
      s[0] = m;
      std::vector<T> part(images.data().begin() + static_cast<long>(start * per),
                          images.data().begin() + static_cast<long>((start + m) * per));
      Tape<T> tape(false);
      Var<T> f = encode(tape, tape.constant(Tensor<T>(s, std::move(part))), ctx);
      std::copy(f.value().data().begin(), f.value().data().end(), out.data().begin() + static_cast<long>(start * cfg_.feature_dim));
    }
    return out;
  }

  struct Group {
    std::string name;
    std::vector<Parameter<T>*> params;
  };

  std::vector<Group> groups() {
    return {{"encoder", encoder_.net().parameters()},
            {"decoder", decoder_.parameters()},
            {"d_latent", d_latent_.parameters()},
            {"d_patch", d_patch_.parameters()},
            {"domain_classifier", classifier_.parameters()},
            {"regularizer", regularizer_.parameters()}};
  }

  std::vector<Parameter<T>*> all_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& g : groups())
      for (auto* p : g.params) out.push_back(p);
    return out;
  }

  /// Every tensor that defines the model state: parameters and batch-norm statistics.
  std::vector<std::pair<std::string, Tensor<T>*>> state() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto* p : all_parameters()) out.emplace_back(p->name, &p->value);
    for (auto& b : encoder_.net().buffers()) out.push_back(b);
    for (auto& b : decoder_.buffers()) out.push_back(b);
    return out;
  }

  void zero_grad() {
    for (auto* p : all_parameters()) p->zero_grad();
  }

 private:
  ModelConfig cfg_;
  LossWeights weights_;
  std::mt19937_64 rng_;
  Encoder<T> encoder_;
  Decoder<T> decoder_;
  LatentDiscriminator<T> d_latent_;
  PatchDiscriminator<T> d_patch_;
  DomainHead<T> classifier_;
  DomainHead<T> regularizer_;
};

}  // namespace aim
