#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "aim/evaluator.hpp"
#include "aim/networks.hpp"
#include "aim/synthdata.hpp"
#include "aim/tensor_io.hpp"

namespace aim {

// ---------------------------------------------------------------------------
// Ablation variants

enum class Component { domain_classifier, regularizer, attention, identity, latent_adversarial, age_estimation, manifold, patch_adversarial };

struct Variant {
  std::string name = "full";
  std::set<Component> disabled;
  bool encoder_only = false;

  bool enabled(Component c) const { return !encoder_only && !disabled.contains(c); }
};

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"full",     "w/o C_φ",    "w/o R_ψ",  "w/o Att.", "w/o L_ip",
                                              "w/o L_adv1", "w/o L_ae", "w/o L_mc", "w/o L_adv2", "encoder-only baseline"};
  return names;
}

namespace detail {
// Lower-case, drop separators, spell out the Greek letters.
inline std::string normalize_variant(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.compare(i, 2, "φ") == 0) {
      out += "phi";
      ++i;
    } else if (s.compare(i, 2, "ψ") == 0) {
      out += "psi";
      ++i;
    } else if (s[i] == ' ' || s[i] == '-' || s[i] == '_' || s[i] == '.') {
      continue;
    } else {
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(s[i])));
    }
  }
  return out;
}
}  // namespace detail

/// Accepts the table spellings ("w/o C_φ") and ASCII forms ("w/o-C_phi").
inline Variant parse_variant(const std::string& name) {
  static const std::map<std::string, std::pair<std::string, std::optional<Component>>> table{
      {"full", {"full", std::nullopt}},
      {"w/ocphi", {"w/o C_φ", Component::domain_classifier}},
      {"w/orpsi", {"w/o R_ψ", Component::regularizer}},
      {"w/oatt", {"w/o Att.", Component::attention}},
      {"w/oattention", {"w/o Att.", Component::attention}},
      {"w/olip", {"w/o L_ip", Component::identity}},
      {"w/oladv1", {"w/o L_adv1", Component::latent_adversarial}},
      {"w/olae", {"w/o L_ae", Component::age_estimation}},
      {"w/olmc", {"w/o L_mc", Component::manifold}},
      {"w/oladv2", {"w/o L_adv2", Component::patch_adversarial}},
  };
  const std::string key = detail::normalize_variant(name);
  Variant v;
  if (key == "encoderonlybaseline" || key == "encoderonly" || key == "baseline") {
    v.name = "encoder-only baseline";
    v.encoder_only = true;
    return v;
  }
  auto it = table.find(key);
  if (it == table.end()) throw UsageError("unknown ablation variant '" + name + "'");
  v.name = it->second.first;
  if (it->second.second) v.disabled.insert(*it->second.second);
  return v;
}

/// Zeroes the loss weights of everything the variant removes.
inline LossWeights variant_weights(const Variant& v, LossWeights w) {
  auto off = [&](std::initializer_list<std::size_t> ks) {
    for (auto k : ks) w(k) = 0;
  };
  if (v.encoder_only) {
    for (std::size_t k = 1; k <= 14; ++k)
      if (k != 4) w(k) = 0;
    return w;
  }
  for (Component c : v.disabled) {
    switch (c) {
      case Component::domain_classifier: off({1}); break;
      case Component::regularizer: off({2}); break;
      case Component::attention: off({9, 14}); break;
      case Component::identity: off({4}); break;
      case Component::latent_adversarial: off({3}); break;
      case Component::age_estimation: off({6, 11}); break;
      case Component::manifold: off({7, 12}); break;
      case Component::patch_adversarial: off({5, 10}); break;
    }
  }
  return w;
}

// ---------------------------------------------------------------------------
// Configuration and optimizer

struct TrainConfig {
  std::size_t batch_size = 32;
  double adam_alpha = 2e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 5e-3;
  std::size_t epochs = 60;
  std::size_t lr_decay_epoch = 20;
  double lr_decay_factor = 0.1;
  double clip_norm = 10.0;  // per-network gradient norm cap, 0 disables
  std::size_t d_steps = 1;  // discriminator updates per generator update
  std::size_t steps = 0;    // 0 means epochs x steps-per-epoch
  std::uint64_t seed = 0;
  Variant variant;
  bool check_finite = true;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(adam_alpha > 0) || !(adam_beta1 > 0 && adam_beta1 < 1) || !(adam_beta2 > 0 && adam_beta2 < 1) || !(adam_eps > 0)) {
      throw ConfigError("Adam rates must be positive and betas in (0, 1)");
    }
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
    if (!(lr_decay_factor > 0 && lr_decay_factor <= 1)) throw ConfigError("lr_decay_factor must lie in (0, 1]");
    if (!(clip_norm >= 0)) throw ConfigError("clip_norm must be non-negative");
    if (d_steps == 0) throw ConfigError("d_steps must be positive");
    if (epochs == 0 && steps == 0) throw ConfigError("epochs or steps must be positive");
  }
};

inline double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  return epoch < cfg.lr_decay_epoch ? cfg.adam_alpha : cfg.adam_alpha * cfg.lr_decay_factor;
}

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::size_t step = 0;

  void init(const std::vector<Parameter<T>*>& params) {
    m.clear();
    v.clear();
    for (auto* p : params) {
      m.emplace_back(p->value.shape());
      v.emplace_back(p->value.shape());
    }
    step = 0;
  }
};

struct AdamOptions {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0;
};

/// Adam with bias correction and decoupled weight decay (applied first).
/// Gradients are read from each parameter's `grad`.
template <typename T>
void adam_update(const std::vector<Parameter<T>*>& params, AdamState<T>& state, const AdamOptions& o) {
  if (state.m.size() != params.size()) state.init(params);
  ++state.step;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(o.beta1), b2 = static_cast<T>(o.beta2);
  const T decay = static_cast<T>(o.lr * o.weight_decay);
  const T step_size = static_cast<T>(o.lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(o.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = *params[i];
    if (p.grad.shape() != p.value.shape() || state.m[i].shape() != p.value.shape()) {
      throw DimensionError("adam_update: shape mismatch for " + p.name);
    }
    T* w = p.value.data().data();
    const T* g = p.grad.data().data();
    T* m = state.m[i].data().data();
    T* v = state.v[i].data().data();
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      m[k] = b1 * m[k] + (T{1} - b1) * g[k];
      v[k] = b2 * v[k] + (T{1} - b2) * g[k] * g[k];
      w[k] -= decay * w[k];
      w[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_bc2) + eps);
    }
  }
}

/// Scales the gradients down so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<Parameter<T>*>& params, double max_norm) {
  double sq = 0;
  for (auto* p : params)
    for (T g : p->grad.data()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto* p : params)
      for (T& g : p->grad.data()) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Checkpoints: a sequence of (u32 name length, UTF-8 name, AIMT tensor) records.

struct CheckpointBundle {
  std::vector<std::pair<std::string, AnyTensor>> records;

  const AnyTensor* find(const std::string& name) const {
    for (const auto& [n, t] : records)
      if (n == name) return &t;
    return nullptr;
  }

  template <typename T>
  const Tensor<T>& get(const std::string& name) const {
    const AnyTensor* t = find(name);
    if (!t) throw FormatError("checkpoint: missing record '" + name + "'", 0);
    const auto* typed = std::get_if<Tensor<T>>(t);
    if (!typed) throw FormatError("checkpoint: record '" + name + "' has the wrong dtype", 0);
    return *typed;
  }

  double scalar(const std::string& name) const { return get<double>(name).item(); }

  template <typename T>
  void put(const std::string& name, Tensor<T> t) {
    records.emplace_back(name, AnyTensor(std::move(t)));
  }
  void put_scalar(const std::string& name, double v) { put(name, Tensor<double>::scalar(v)); }

  void put_string(const std::string& name, const std::string& s) {
    std::vector<double> chars;
    for (unsigned char ch : s) chars.push_back(ch);
    if (chars.empty()) chars.push_back(0);
    const std::size_t n = chars.size();
    put(name, Tensor<double>({n}, std::move(chars)));
  }
  std::string get_string(const std::string& name) const {
    std::string s;
    for (double c : get<double>(name).data())
      if (c != 0) s.push_back(static_cast<char>(static_cast<unsigned char>(c)));
    return s;
  }
};

inline std::vector<std::uint8_t> encode_checkpoint(const CheckpointBundle& b) {
  ByteWriter w;
  for (const auto& [name, tensor] : b.records) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    std::visit([&](const auto& t) { encode_tensor(w, t); }, tensor);
  }
  return w.buffer();
}

inline CheckpointBundle decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  CheckpointBundle b;
  std::set<std::string> seen;
  if (r.at_end()) throw FormatError("checkpoint: empty file", 0);
  while (!r.at_end()) {
    const std::size_t pos = r.offset();
    const auto len = r.le<std::uint32_t>("record name length");
    if (len == 0 || len > 4096) throw FormatError("checkpoint: implausible record name length " + std::to_string(len), pos);
    std::string name(len, '\0');
    r.bytes(name.data(), len, "record name");
    if (!seen.insert(name).second) throw FormatError("checkpoint: duplicate record '" + name + "'", pos);
    b.records.emplace_back(std::move(name), decode_tensor(r));
  }
  return b;
}

inline void save_checkpoint(const CheckpointBundle& b, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(b));
}

inline CheckpointBundle load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

namespace detail {
inline Tensor<double> sizes_tensor(const std::vector<std::size_t>& v) {
  std::vector<double> d(v.begin(), v.end());
  const std::size_t n = d.size();
  return Tensor<double>({n}, std::move(d));
}
inline std::vector<std::size_t> sizes_from(const Tensor<double>& t) {
  std::vector<std::size_t> v;
  for (double x : t.data()) v.push_back(static_cast<std::size_t>(x));
  return v;
}
}  // namespace detail

inline void put_model_config(CheckpointBundle& b, const ModelConfig& c) {
  b.put_scalar("config/model/image_size", static_cast<double>(c.image_size));
  b.put_scalar("config/model/channels", static_cast<double>(c.channels));
  b.put_scalar("config/model/feature_dim", static_cast<double>(c.feature_dim));
  b.put_scalar("config/model/patch_size", static_cast<double>(c.patch_size));
  b.put_scalar("config/model/num_identities", static_cast<double>(c.num_identities));
  b.put("config/model/encoder_widths", detail::sizes_tensor(c.encoder_widths));
  b.put("config/model/decoder_widths", detail::sizes_tensor(c.decoder_widths));
  b.put("config/model/patch_widths", detail::sizes_tensor(c.patch_widths));
  b.put_scalar("config/model/mlp_hidden", static_cast<double>(c.mlp_hidden));
  b.put_scalar("config/model/leaky_slope", c.leaky_slope);
  b.put_scalar("config/model/dropout_keep", c.dropout_keep);
  b.put_scalar("config/model/grl_coeff", c.grl_coeff);
  b.put_scalar("config/model/init_std", c.init_std);
  b.put_scalar("config/model/attention", c.attention ? 1.0 : 0.0);
}

inline ModelConfig model_config_from(const CheckpointBundle& b) {
  ModelConfig c;
  c.image_size = static_cast<std::size_t>(b.scalar("config/model/image_size"));
  c.channels = static_cast<std::size_t>(b.scalar("config/model/channels"));
  c.feature_dim = static_cast<std::size_t>(b.scalar("config/model/feature_dim"));
  c.patch_size = static_cast<std::size_t>(b.scalar("config/model/patch_size"));
  c.num_identities = static_cast<std::size_t>(b.scalar("config/model/num_identities"));
  c.encoder_widths = detail::sizes_from(b.get<double>("config/model/encoder_widths"));
  c.decoder_widths = detail::sizes_from(b.get<double>("config/model/decoder_widths"));
  c.patch_widths = detail::sizes_from(b.get<double>("config/model/patch_widths"));
  c.mlp_hidden = static_cast<std::size_t>(b.scalar("config/model/mlp_hidden"));
  c.leaky_slope = b.scalar("config/model/leaky_slope");
  c.dropout_keep = b.scalar("config/model/dropout_keep");
  c.grl_coeff = b.scalar("config/model/grl_coeff");
  c.init_std = b.scalar("config/model/init_std");
  c.attention = b.scalar("config/model/attention") != 0.0;
  c.validate();
  return c;
}

inline LossWeights loss_weights_from(const CheckpointBundle& b) {
  LossWeights w;
  const auto& t = b.get<double>("config/loss/lambda");
  if (t.size() != w.lambda.size()) throw FormatError("checkpoint: lambda record must hold 14 values", 0);
  for (std::size_t k = 0; k < w.lambda.size(); ++k) w.lambda[k] = t[k];
  return w;
}

template <typename T>
void put_model_state(CheckpointBundle& b, AIMModel<T>& model) {
  for (auto& [name, t] : model.state()) b.put("model/" + name, *t);
}

/// Copies parameters and buffers from the bundle. Every record is checked
/// before anything is written, so a bad bundle leaves the model untouched.
template <typename T>
void load_model_state(AIMModel<T>& model, const CheckpointBundle& b) {
  auto state = model.state();
  std::vector<const Tensor<T>*> sources;
  for (auto& [name, t] : state) {
    const Tensor<T>& src = b.get<T>("model/" + name);
    if (src.shape() != t->shape()) {
      throw ConfigError("checkpoint: '" + name + "' has shape " + shape_str(src.shape()) + ", model expects " +
                        shape_str(t->shape()));
    }
    sources.push_back(&src);
  }
  for (std::size_t i = 0; i < state.size(); ++i) *state[i].second = *sources[i];
}

// ---------------------------------------------------------------------------
// Training

template <typename T>
struct Batch {
  Tensor<T> images;                // N x 3 x H x W
  std::vector<int> identities;     // dense 0..n-1 training labels
  std::vector<int> phases;         // source age phase
  std::vector<int> target_phases;  // synthesis target phase
  Tensor<T> reference;             // x^R: real images of the target phases
  Tensor<T> prior;                 // f* ~ U[-1, 1]^d
};

/// Metrics CSV, one row per step; appends to an existing file.
class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& path) {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    out_.open(path, std::ios::app);
    if (!out_) throw IoError("cannot open metrics file " + path.string());
    if (fresh) out_ << LossReport::csv_header() << '\n';
  }
  void write(const LossReport& r) {
    out_ << r.csv_row() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

inline std::vector<std::size_t> samples_in_folds(const Dataset& ds, const std::set<int>& folds) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    if (folds.contains(ds.fold_of_sample(i))) out.push_back(i);
  return out;
}

/// Alternating optimization of all networks on a fixed set of training samples.
template <typename T = float>
class Trainer {
 public:
  Trainer(const Dataset& ds, std::vector<std::size_t> train_indices, ModelConfig model_cfg, const LossWeights& weights,
          const TrainConfig& cfg)
      : ds_(ds), indices_(std::move(train_indices)), cfg_((cfg.validate(), cfg)), rng_(mix_seed(cfg.seed, 0x7EA1)) {
    if (indices_.empty()) throw UsageError("trainer: no training samples");
    std::set<int> ids;
    for (auto i : indices_) ids.insert(ds_.samples.at(i).identity_id);
    for (int id : ids) label_of_[id] = static_cast<int>(label_of_.size());
    model_cfg.num_identities = std::max<std::size_t>(1, label_of_.size());
    if (!cfg_.variant.enabled(Component::attention)) model_cfg.attention = false;
    weights_ = variant_weights(cfg_.variant, weights);
    model_ = std::make_unique<AIMModel<T>>(model_cfg, weights_, cfg_.seed);
    for (auto i : indices_) by_phase_[static_cast<std::size_t>(ds_.samples[i].phase)].push_back(i);
    for (auto& g : model_->groups()) adam_[g.name].init(g.params);
    steps_per_epoch_ = (indices_.size() + cfg_.batch_size - 1) / cfg_.batch_size;
    reshuffle();
  }

  AIMModel<T>& model() { return *model_; }
  const LossWeights& weights() const { return weights_; }
  const TrainConfig& config() const { return cfg_; }
  std::size_t step() const { return step_; }
  std::size_t steps_per_epoch() const { return steps_per_epoch_; }
  std::size_t total_steps() const { return cfg_.steps ? cfg_.steps : cfg_.epochs * steps_per_epoch_; }
  double learning_rate() const { return lr_schedule(step_ / steps_per_epoch_, cfg_); }
  const std::map<std::string, AdamState<T>>& optimizer() const { return adam_; }

  /// Next batch from the epoch shuffle, with random target phases, reference
  /// images of those phases and prior samples.
  Batch<T> next_batch() {
    const std::size_t n = std::min(cfg_.batch_size, indices_.size());
    std::vector<std::size_t> chosen;
    for (std::size_t k = 0; k < n; ++k) {
      if (cursor_ == order_.size()) reshuffle();
      chosen.push_back(order_[cursor_++]);
    }
    Batch<T> b;
    b.images = stack_images<T>(ds_, chosen);
    std::vector<std::size_t> refs;
    for (auto i : chosen) {
      b.identities.push_back(label_of_.at(ds_.samples[i].identity_id));
      b.phases.push_back(ds_.samples[i].phase);
      const int t = static_cast<int>(rng_() % kNumPhases);
      b.target_phases.push_back(t);
      refs.push_back(pick_reference(t));
    }
    b.reference = stack_images<T>(ds_, refs);
    b.prior = Tensor<T>({n, model_->config().feature_dim});
    for (T& v : b.prior.data()) v = static_cast<T>(2.0 * uniform01(rng_) - 1.0);
    return b;
  }

  LossReport train_step() { return train_step(next_batch()); }

  LossReport train_step(const Batch<T>& b) {
    AIMModel<T>& M = *model_;
    const Variant& var = cfg_.variant;
    const LossWeights& w = weights_;
    const bool synth = !var.encoder_only;
    const bool use_cad = var.enabled(Component::domain_classifier);
    const bool use_cer = var.enabled(Component::regularizer);
    const bool use_adv1 = var.enabled(Component::latent_adversarial);
    const bool use_ip = var.encoder_only || var.enabled(Component::identity);
    const bool use_adv2 = var.enabled(Component::patch_adversarial);
    const bool use_ae = var.enabled(Component::age_estimation);
    const bool use_mc = var.enabled(Component::manifold);
    const bool use_att = synth && M.config().attention;
    const AdamOptions opt{learning_rate(), cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps, cfg_.weight_decay};

    LossReport rep;
    rep.step = step_ + 1;
    ForwardContext<T> train{true, false, &M.rng(), nullptr};
    ForwardContext<T> frozen{true, true, &M.rng(), nullptr};

    // Generator forward pass, shared by the discriminator and generator phases.
    Tape<T> g(cfg_.check_finite);
    Var<T> x = g.constant(b.images);
    Var<T> f = M.encode(g, x, train);
    std::vector<AgeCode> codes;
    for (int t : b.target_phases) codes.push_back(age_code(t));
    const Tensor<T> code_t = code_batch<T>(codes);
    Var<T> code = g.constant(code_t);
    std::optional<Synthesis<T>> syn;
    if (synth) syn = M.decode(g, f, code, x, train);

    for (std::size_t d = 0; d < cfg_.d_steps; ++d) {
      // (1) latent discriminator: realness against the prior plus identity.
      if (use_adv1 || (use_ip && w(4) > 0)) {
        Tape<T> t(cfg_.check_finite);
        LatentJudgement<T> judge = M.discriminate_latent(t, t.constant(f.value()), train);
        std::vector<Var<T>> terms;
        if (use_adv1) terms.push_back(loss_adv1(M.latent_discriminator().realness(t, t.constant(b.prior), train), judge.realness).d_loss);
        if (use_ip && w(4) > 0) terms.push_back(scale(loss_ip(judge.identity_logits, b.identities), T(w(4))));
        rep.discriminator += update(t, sum_terms(terms), "d_latent", opt);
      }
      // (2) patch discriminator: realness of x^R vs x_hat plus age estimation.
      if (synth && (use_adv2 || (use_ae && w(11) > 0))) {
        Tape<T> t(cfg_.check_finite);
        PatchJudgement<T> fake = M.discriminate_patches(t, t.constant(syn->image.value()), code_t, train);
        PatchJudgement<T> real = M.discriminate_patches(t, t.constant(b.reference), code_t, train);
        std::vector<Var<T>> terms;
        if (use_adv2) terms.push_back(loss_adv2(fake.patch_scores, real.patch_scores).d_loss);
        if (use_ae && w(11) > 0) {
          terms.push_back(scale(loss_ae(fake.age_estimate, real.age_estimate, t.constant(code_t)), T(w(11))));
        }
        rep.discriminator += update(t, sum_terms(terms), "d_patch", opt);
      }
      // (3) domain classifier and regularizer learn the source phase.
      if (use_cad) {
        Tape<T> t(cfg_.check_finite);
        rep.discriminator +=
            update(t, loss_cad(M.classify_domain(t, t.constant(f.value()), train), b.phases), "domain_classifier", opt);
      }
      if (use_cer) {
        Tape<T> t(cfg_.check_finite);
        rep.discriminator +=
            update(t, loss_cad(M.regularize_domain(t, t.constant(f.value()), train), b.phases), "regularizer", opt);
      }
    }

    // (4)/(5) generator objectives with every discriminator-side network frozen.
    std::vector<std::pair<Var<T>, double>> enc, dec;
    auto record = [&](LossTerm term, Var<T> v) {
      const double value = static_cast<double>(v.value().item());
      if (!std::isfinite(value)) {
        throw NumericError(std::string("non-finite ") + kLossNames[static_cast<std::size_t>(term)] + " at step " +
                           std::to_string(rep.step));
      }
      rep.parts[term] = value;
    };
    if (use_cad) {
      Var<T> cad = loss_cad(M.classify_domain(g, f, frozen), b.phases);
      record(LossTerm::cad, cad);
      // The reversal layer already contributes -grl_coeff; rescale to lambda_1.
      const double gc = M.config().grl_coeff;
      if (gc > 0) enc.emplace_back(cad, w(1) / gc);
    }
    if (use_cer) {
      Var<T> cer = loss_cer(M.regularize_domain(g, f, frozen));
      record(LossTerm::cer, cer);
      enc.emplace_back(cer, w(2));
    }
    if (use_adv1 || use_ip) {
      LatentJudgement<T> judge = M.discriminate_latent(g, f, frozen);
      if (use_adv1) {
        Var<T> adv1 = loss_adv1(M.latent_discriminator().realness(g, g.constant(b.prior), frozen), judge.realness).g_term;
        record(LossTerm::adv1, adv1);
        enc.emplace_back(adv1, -w(3));
      }
      if (use_ip) {
        Var<T> ip = loss_ip(judge.identity_logits, b.identities);
        record(LossTerm::ip, ip);
        enc.emplace_back(ip, w(4));
      }
    }
    if (synth) {
      if (use_adv2 || use_ae) {
        PatchJudgement<T> fake = M.discriminate_patches(g, syn->image, code_t, frozen);
        PatchJudgement<T> real = M.discriminate_patches(g, g.constant(b.reference), code_t, frozen);
        if (use_adv2) {
          Var<T> adv2 = loss_adv2(fake.patch_scores, real.patch_scores).g_term;
          record(LossTerm::adv2, adv2);
          enc.emplace_back(adv2, -w(5));
          dec.emplace_back(adv2, -w(10));
        }
        if (use_ae) {
          Var<T> ae = loss_ae(fake.age_estimate, real.age_estimate, code);
          record(LossTerm::ae, ae);
          enc.emplace_back(ae, w(6));
          dec.emplace_back(ae, w(11));
        }
      }
      if (use_mc) {
        Var<T> mc = loss_mc(syn->image, x);
        record(LossTerm::mc, mc);
        enc.emplace_back(mc, w(7));
        dec.emplace_back(mc, w(12));
      }
      Var<T> tv = loss_tv(syn->image);
      record(LossTerm::tv, tv);
      enc.emplace_back(tv, w(8));
      dec.emplace_back(tv, w(13));
      if (use_att) {
        Var<T> att = loss_att(syn->attention);
        record(LossTerm::att, att);
        enc.emplace_back(att, w(9));
        dec.emplace_back(att, w(14));
      }
    }
    if (auto obj = weighted_sum(enc)) update(g, *obj, "encoder", opt);
    if (synth) {
      // Nothing recorded before the decoder's input can reach decoder parameters.
      if (auto obj = weighted_sum(dec)) update(g, *obj, "decoder", opt, f.id + 1);
    }

    rep.encoder = composite_encoder_loss(rep.parts, w);
    rep.decoder = composite_decoder_loss(rep.parts, w);
    if (!std::isfinite(rep.discriminator)) {
      throw NumericError("non-finite discriminator loss at step " + std::to_string(rep.step));
    }
    ++step_;
    return rep;
  }

  /// Runs until `total_steps()`; `on_step` sees every report.
  void train(const std::function<void(const LossReport&)>& on_step = {}) {
    while (step_ < total_steps()) {
      LossReport r = train_step();
      if (on_step) on_step(r);
    }
  }

  CheckpointBundle checkpoint() {
    CheckpointBundle b;
    b.put_scalar("meta/step", static_cast<double>(step_));
    put_model_config(b, model_->config());
    b.put("config/loss/lambda", Tensor<double>({14}, std::vector<double>(weights_.lambda.begin(), weights_.lambda.end())));
    b.put_scalar("config/train/seed", static_cast<double>(cfg_.seed));
    b.put_scalar("config/train/batch_size", static_cast<double>(cfg_.batch_size));
    b.put_string("config/train/variant", cfg_.variant.name);
    put_model_state(b, *model_);
    for (auto& g : model_->groups()) {
      const AdamState<T>& s = adam_.at(g.name);
      b.put_scalar("adam/" + g.name + "/step", static_cast<double>(s.step));
      for (std::size_t i = 0; i < g.params.size(); ++i) {
        b.put("adam/" + g.name + "/m/" + g.params[i]->name, s.m[i]);
        b.put("adam/" + g.name + "/v/" + g.params[i]->name, s.v[i]);
      }
    }
    std::ostringstream mr, tr;
    mr << model_->rng();
    tr << rng_;
    b.put_string("rng/model", mr.str());
    b.put_string("rng/trainer", tr.str());
    b.put("data/order", detail::sizes_tensor(order_));
    b.put_scalar("data/cursor", static_cast<double>(cursor_));
    return b;
  }

  /// Restores a bundle written by `checkpoint()`. Nothing changes unless
  /// the whole bundle validates.
  void restore(const CheckpointBundle& b) {
    if (model_config_from(b).image_size != model_->config().image_size) {
      throw ConfigError("checkpoint image size differs from the configured one");
    }
    // Stage everything first.
    std::map<std::string, AdamState<T>> adam;
    for (auto& g : model_->groups()) {
      AdamState<T> s;
      s.step = static_cast<std::size_t>(b.scalar("adam/" + g.name + "/step"));
      for (auto* p : g.params) {
        const auto& m = b.get<T>("adam/" + g.name + "/m/" + p->name);
        const auto& v = b.get<T>("adam/" + g.name + "/v/" + p->name);
        if (m.shape() != p->value.shape() || v.shape() != p->value.shape()) {
          throw FormatError("checkpoint: Adam moments for " + p->name + " have the wrong shape", 0);
        }
        s.m.push_back(m);
        s.v.push_back(v);
      }
      adam[g.name] = std::move(s);
    }
    std::mt19937_64 model_rng, trainer_rng;
    std::istringstream(b.get_string("rng/model")) >> model_rng;
    std::istringstream(b.get_string("rng/trainer")) >> trainer_rng;
    std::vector<std::size_t> order = detail::sizes_from(b.get<double>("data/order"));
    const auto cursor = static_cast<std::size_t>(b.scalar("data/cursor"));
    const auto step = static_cast<std::size_t>(b.scalar("meta/step"));
    if (cursor > order.size()) throw FormatError("checkpoint: data cursor out of range", 0);
    load_model_state(*model_, b);  // validates before writing
    adam_ = std::move(adam);
    model_->rng() = model_rng;
    rng_ = trainer_rng;
    order_ = std::move(order);
    cursor_ = cursor;
    step_ = step;
  }

 private:
  static Var<T> sum_terms(const std::vector<Var<T>>& terms) {
    Var<T> total = terms.at(0);
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    return total;
  }

  static std::optional<Var<T>> weighted_sum(const std::vector<std::pair<Var<T>, double>>& terms) {
    std::optional<Var<T>> total;
    for (const auto& [v, wt] : terms) {
      if (wt == 0) continue;
      Var<T> s = scale(v, static_cast<T>(wt));
      total = total ? add(*total, s) : s;
    }
    return total;
  }

  double update(Tape<T>& tape, Var<T> objective, const std::string& group, const AdamOptions& opt,
                std::size_t stop_below = 0) {
    const double value = static_cast<double>(objective.value().item());
    if (!std::isfinite(value)) throw NumericError("non-finite " + group + " objective at step " + std::to_string(step_ + 1));
    std::vector<Parameter<T>*> params;
    for (auto& gr : model_->groups())
      if (gr.name == group) params = gr.params;
    for (auto* p : params) p->zero_grad();
    tape.backward(objective, stop_below);
    clip_grad_norm(params, cfg_.clip_norm);
    adam_update(params, adam_.at(group), opt);
    return value;
  }

  void reshuffle() {
    order_ = indices_;
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_() % i]);
    cursor_ = 0;
  }

  std::size_t pick_reference(int phase) {
    for (int delta = 0; delta < static_cast<int>(kNumPhases); ++delta) {
      for (int p : {phase - delta, phase + delta}) {
        if (p < 0 || p >= static_cast<int>(kNumPhases)) continue;
        const auto& pool = by_phase_[static_cast<std::size_t>(p)];
        if (!pool.empty()) return pool[rng_() % pool.size()];
      }
    }
    throw UsageError("trainer: no reference images");
  }

  const Dataset& ds_;
  std::vector<std::size_t> indices_;
  TrainConfig cfg_;
  LossWeights weights_;
  std::unique_ptr<AIMModel<T>> model_;
  std::mt19937_64 rng_;
  std::map<int, int> label_of_;
  std::array<std::vector<std::size_t>, kNumPhases> by_phase_;
  std::map<std::string, AdamState<T>> adam_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t step_ = 0;
  std::size_t steps_per_epoch_ = 1;
};

// ---------------------------------------------------------------------------
// Ablation harness

struct AblationConfig {
  ModelConfig model;
  LossWeights weights;
  TrainConfig train;
  std::size_t holdout_folds = 2;  // the last folds are held out for evaluation
  std::uint64_t pair_seed = 0;
  Similarity similarity = Similarity::cosine;
};

inline std::pair<std::set<int>, std::vector<int>> split_folds(std::size_t holdout) {
  if (holdout < 2 || holdout >= kNumFolds) throw ConfigError("holdout_folds must lie in [2, 9]");
  std::set<int> train;
  std::vector<int> test;
  for (int f = 0; f < static_cast<int>(kNumFolds); ++f) {
    if (f < static_cast<int>(kNumFolds - holdout)) {
      train.insert(f);
    } else {
      test.push_back(f);
    }
  }
  return {train, test};
}

/// Trains one variant on the training folds and evaluates the held-out
/// folds. `inspect` sees the trained model before it is discarded.
template <typename T = float>
EvalReport run_ablation(const std::string& variant_name, const Dataset& ds, AblationConfig cfg,
                        const std::function<void(Trainer<T>&)>& inspect = {}) {
  cfg.train.variant = parse_variant(variant_name);
  const auto [train_folds, test_folds] = split_folds(cfg.holdout_folds);
  Trainer<T> trainer(ds, samples_in_folds(ds, train_folds), cfg.model, cfg.weights, cfg.train);
  trainer.train();
  std::vector<PairList> pairs;
  for (int f : test_folds) pairs.push_back(make_pairs(ds, f, cfg.pair_seed));
  EvalReport report = evaluate_folds(trainer.model(), ds, pairs, cfg.similarity);
  if (inspect) inspect(trainer);
  return report;
}

}  // namespace aim
