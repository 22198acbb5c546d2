#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "aim/autodiff.hpp"

namespace aim {

inline constexpr std::size_t kNumPhases = 7;
inline constexpr double kLogFloor = 1e-12;

/// The fourteen constraint factors. 1..9 weight the encoder objective,
/// 10..14 the decoder objective.
struct LossWeights {
  std::array<double, 14> lambda{0.1, 0.1, 0.01, 1.0, 0.01, 0.05, 0.1, 1e-5, 0.03, 0.01, 0.05, 0.1, 1e-5, 0.03};

  /// 1-based access matching the usual lambda_k numbering.
  double& operator()(std::size_t k) { return lambda.at(k - 1); }
  double operator()(std::size_t k) const { return lambda.at(k - 1); }

  void validate() const {
    for (std::size_t k = 0; k < lambda.size(); ++k) {
      if (!(lambda[k] >= 0) || !std::isfinite(lambda[k])) {
        throw ConfigError("loss weight lambda_" + std::to_string(k + 1) + " must be finite and non-negative");
      }
    }
  }
};

enum class LossTerm : std::size_t { cad, cer, adv1, ip, adv2, ae, mc, tv, att };
inline constexpr std::size_t kNumLossTerms = 9;
inline constexpr std::array<const char*, kNumLossTerms> kLossNames{"L_cad", "L_cer", "L_adv1", "L_ip", "L_adv2",
                                                                   "L_ae",  "L_mc",  "L_tv",   "L_att"};

/// Values of the nine losses measured on one batch. A term may be absent
/// when the corresponding component is disabled.
struct LossParts {
  std::array<std::optional<double>, kNumLossTerms> values{};

  std::optional<double>& operator[](LossTerm t) { return values[static_cast<std::size_t>(t)]; }
  const std::optional<double>& operator[](LossTerm t) const { return values[static_cast<std::size_t>(t)]; }

  static LossParts all(double v) {
    LossParts p;
    for (auto& x : p.values) x = v;
    return p;
  }
};

namespace detail {
inline double weighted_term(const LossParts& parts, LossTerm t, double sign, double weight) {
  const auto& v = parts[t];
  if (!v) {
    if (weight == 0) return 0;
    throw UsageError(std::string("composite loss: missing part ") + kLossNames[static_cast<std::size_t>(t)]);
  }
  return sign * weight * *v;
}
}  // namespace detail

/// Encoder objective: adversarial terms enter with negative sign.
inline double composite_encoder_loss(const LossParts& p, const LossWeights& w) {
  using detail::weighted_term;
  return weighted_term(p, LossTerm::cad, -1, w(1)) + weighted_term(p, LossTerm::cer, 1, w(2)) +
         weighted_term(p, LossTerm::adv1, -1, w(3)) + weighted_term(p, LossTerm::ip, 1, w(4)) +
         weighted_term(p, LossTerm::adv2, -1, w(5)) + weighted_term(p, LossTerm::ae, 1, w(6)) +
         weighted_term(p, LossTerm::mc, 1, w(7)) + weighted_term(p, LossTerm::tv, 1, w(8)) +
         weighted_term(p, LossTerm::att, 1, w(9));
}

inline double composite_decoder_loss(const LossParts& p, const LossWeights& w) {
  using detail::weighted_term;
  return weighted_term(p, LossTerm::adv2, -1, w(10)) + weighted_term(p, LossTerm::ae, 1, w(11)) +
         weighted_term(p, LossTerm::mc, 1, w(12)) + weighted_term(p, LossTerm::tv, 1, w(13)) +
         weighted_term(p, LossTerm::att, 1, w(14));
}

/// Overall objective; carries the same weights as the encoder objective.
inline double overall_loss(const LossParts& p, const LossWeights& w) { return composite_encoder_loss(p, w); }

/// Per-step record of every loss value plus the three composites.
struct LossReport {
  std::size_t step = 0;
  LossParts parts;
  double encoder = 0;
  double decoder = 0;
  double discriminator = 0;

  static std::string csv_header() {
    std::string h = "step";
    for (const char* n : kLossNames) h += std::string(",") + n;
    return h + ",L_enc,L_dec,L_disc";
  }

  std::string csv_row() const {
    std::ostringstream os;
    os.precision(9);
    os << step;
    for (const auto& v : parts.values) {
      os << ',';
      if (v) os << *v;
    }
    os << ',' << encoder << ',' << decoder << ',' << discriminator;
    return os.str();
  }

  std::string progress_line() const {
    std::ostringstream os;
    os.precision(6);
    os << "step=" << step << " L_enc=" << encoder << " L_dec=" << decoder << " L_disc=" << discriminator;
    for (std::size_t i = 0; i < kNumLossTerms; ++i) {
      if (parts.values[i]) os << ' ' << kLossNames[i] << '=' << *parts.values[i];
    }
    return os.str();
  }

  bool all_finite() const {
    for (const auto& v : parts.values)
      if (v && !std::isfinite(*v)) return false;
    return std::isfinite(encoder) && std::isfinite(decoder) && std::isfinite(discriminator);
  }
};

// ---------------------------------------------------------------------------
// Differentiable losses

namespace detail {
template <typename T>
Tensor<T> one_hot(std::span<const int> labels, std::size_t classes, const char* op) {
  Tensor<T> t({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw UsageError(std::string(op) + ": label " + std::to_string(labels[i]) + " outside 0.." +
                       std::to_string(classes - 1));
    }
    t[i * classes + static_cast<std::size_t>(labels[i])] = T{1};
  }
  return t;
}

template <typename T>
void require_rows(Var<T> v, std::size_t rows, std::size_t cols, const char* op) {
  const Shape& s = v.shape();
  if (s.size() != 2 || s[0] != rows || (cols && s[1] != cols)) {
    throw DimensionError(std::string(op) + ": expected [" + std::to_string(rows) + "x" +
                         (cols ? std::to_string(cols) : std::string("*")) + "], got " + shape_str(s));
  }
}

// Mean over the batch of -log p[label].
template <typename T>
Var<T> picked_nll(Var<T> probs, std::span<const int> labels, const char* op) {
  require_rows(probs, labels.size(), 0, op);
  Tape<T>& tape = *probs.tape;
  Var<T> mask = tape.constant(one_hot<T>(labels, probs.shape()[1], op));
  return scale(sum(mul(log(probs, T(kLogFloor)), mask)), T(-1) / static_cast<T>(labels.size()));
}

// -mean(log real) - mean(log(1 - fake)); prior/real samples are the positives.
template <typename T>
Var<T> bce_real_fake(Var<T> real, Var<T> fake) {
  Var<T> real_term = scale(mean(log(real, T(kLogFloor))), T(-1));
  Var<T> fake_term = scale(mean(log(rsub_scalar(T{1}, fake), T(kLogFloor))), T(-1));
  return add(real_term, fake_term);
}
}  // namespace detail

/// Cross-age domain loss: mean 7-way cross-entropy of domain probabilities
/// (computed downstream of the gradient reversal layer).
template <typename T>
Var<T> loss_cad(Var<T> domain_probs, std::span<const int> domain_labels) {
  detail::require_rows(domain_probs, domain_labels.size(), kNumPhases, "loss_cad");
  return detail::picked_nll(domain_probs, domain_labels, "loss_cad");
}

/// Cross-entropy regularization against the smoothed indicator 1/K, summed
/// over the K outputs and averaged over the batch.
template <typename T>
Var<T> loss_cer(Var<T> reg_probs) {
  const Shape s = reg_probs.shape();
  if (s.size() != 2) throw DimensionError("loss_cer: expected N x K probabilities, got " + shape_str(s));
  const T target = T{1} / static_cast<T>(s[1]);
  Var<T> pos = scale(log(reg_probs, T(kLogFloor)), target);
  Var<T> neg = scale(log(rsub_scalar(T{1}, reg_probs), T(kLogFloor)), T{1} - target);
  return scale(sum(add(pos, neg)), T(-1) / static_cast<T>(s[0]));
}

template <typename T>
struct AdversarialLoss {
  Var<T> d_loss;  // minimized by the discriminator
  Var<T> g_term;  // the same expression; enters generator objectives with a negative weight
};

/// Latent adversarial loss: prior samples f* are "real", encoded f are "fake".
template <typename T>
AdversarialLoss<T> loss_adv1(Var<T> real_scores, Var<T> fake_scores) {
  Var<T> d = detail::bce_real_fake(real_scores, fake_scores);
  return {d, d};
}

/// Identity preserving loss: mean n-way softmax cross-entropy.
template <typename T>
Var<T> loss_ip(Var<T> identity_logits, std::span<const int> identity_labels) {
  detail::require_rows(identity_logits, identity_labels.size(), 0, "loss_ip");
  return detail::picked_nll(softmax(identity_logits), identity_labels, "loss_ip");
}

/// Patch adversarial loss averaged uniformly over all patches and the batch.
template <typename T>
AdversarialLoss<T> loss_adv2(Var<T> fake_patch_scores, Var<T> real_patch_scores) {
  if (fake_patch_scores.shape() != real_patch_scores.shape()) {
    throw UsageError("loss_adv2: patch-score shapes differ, fake " + shape_str(fake_patch_scores.shape()) + " vs real " +
                     shape_str(real_patch_scores.shape()));
  }
  Var<T> d = detail::bce_real_fake(real_patch_scores, fake_patch_scores);
  return {d, d};
}

/// Age estimation loss: mean over the batch of |c_hat - c|^2 + |c_real - c|^2.
template <typename T>
Var<T> loss_ae(Var<T> age_est_fake, Var<T> age_est_real, Var<T> target_code) {
  if (age_est_fake.shape() != target_code.shape() || age_est_real.shape() != target_code.shape()) {
    throw DimensionError("loss_ae: estimate/target shapes differ");
  }
  const T n = static_cast<T>(target_code.shape()[0]);
  Var<T> a = sum(square(sub(age_est_fake, target_code)));
  Var<T> b = sum(square(sub(age_est_real, target_code)));
  return scale(add(a, b), T{1} / n);
}

/// Manifold consistency: mean squared pixel difference.
template <typename T>
Var<T> loss_mc(Var<T> synthesized, Var<T> input) {
  if (synthesized.shape() != input.shape()) {
    throw DimensionError("loss_mc: shape mismatch " + shape_str(synthesized.shape()) + " vs " + shape_str(input.shape()));
  }
  return mean(square(sub(synthesized, input)));
}

namespace detail {
// Sum of squared forward differences along H and W, averaged over the batch.
template <typename T>
Var<T> squared_variation(Var<T> img) {
  const Shape s = img.shape();
  if (s.size() != 4) throw DimensionError("total variation: expected N x C x H x W, got " + shape_str(s));
  const std::size_t h = s[2], w = s[3];
  std::vector<Var<T>> terms;
  if (w > 1) terms.push_back(sum(square(sub(slice(img, 3, 1, w), slice(img, 3, 0, w - 1)))));
  if (h > 1) terms.push_back(sum(square(sub(slice(img, 2, 1, h), slice(img, 2, 0, h - 1)))));
  Var<T> total = terms.empty() ? img.tape->constant(Tensor<T>::scalar(T{0})) : terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return scale(total, T{1} / static_cast<T>(s[0]));
}
}  // namespace detail

template <typename T>
Var<T> loss_tv(Var<T> img) {
  return detail::squared_variation(img);
}

/// Attention loss: smoothness of the mask plus its squared norm.
template <typename T>
Var<T> loss_att(Var<T> attention) {
  const T n = static_cast<T>(attention.shape().at(0));
  return add(detail::squared_variation(attention), scale(sum(square(attention)), T{1} / n));
}

}  // namespace aim
