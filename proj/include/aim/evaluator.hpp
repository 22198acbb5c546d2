#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "aim/networks.hpp"
#include "aim/synthdata.hpp"

namespace aim {

struct ScoredPair {
  double similarity = 0;
  bool is_genuine = false;
  double age_gap = 0;
};

enum class Similarity { cosine, l2 };

inline Similarity parse_similarity(const std::string& s) {
  if (s == "cosine") return Similarity::cosine;
  if (s == "l2") return Similarity::l2;
  throw ConfigError("similarity must be 'cosine' or 'l2', got '" + s + "'");
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine_similarity: lengths differ");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) throw UsageError("cosine_similarity: zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

/// Negated Euclidean distance, so that larger still means more similar.
inline double l2_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("l2_similarity: lengths differ");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return -std::sqrt(s);
}

inline double similarity(std::span<const double> a, std::span<const double> b, Similarity kind) {
  return kind == Similarity::cosine ? cosine_similarity(a, b) : l2_similarity(a, b);
}

struct RocPoint {
  double threshold = 0;  // accept when score >= threshold
  double far = 0;
  double tar = 0;
};

namespace detail {

struct PairCounts {
  std::size_t genuine = 0;
  std::size_t imposter = 0;
};

inline PairCounts count_classes(std::span<const ScoredPair> pairs, const char* op) {
  PairCounts c;
  for (const auto& p : pairs) {
    if (!std::isfinite(p.similarity)) throw NumericError(std::string(op) + ": non-finite similarity");
    (p.is_genuine ? c.genuine : c.imposter)++;
  }
  if (c.genuine == 0 || c.imposter == 0) {
    throw UsageError(std::string(op) + ": need at least one genuine and one imposter pair");
  }
  return c;
}

// Cumulative (accepted genuine, accepted imposter) counts as the threshold
// sweeps down over the distinct scores; the first entry is "accept nothing".
struct Sweep {
  std::vector<double> thresholds;
  std::vector<std::size_t> gen;
  std::vector<std::size_t> imp;
  PairCounts total;
};

inline Sweep sweep(std::span<const ScoredPair> pairs, const char* op) {
  Sweep s;
  s.total = count_classes(pairs, op);
  std::vector<ScoredPair> sorted(pairs.begin(), pairs.end());
  std::sort(sorted.begin(), sorted.end(), [](const ScoredPair& a, const ScoredPair& b) { return a.similarity > b.similarity; });
  s.thresholds.push_back(std::numeric_limits<double>::infinity());
  s.gen.push_back(0);
  s.imp.push_back(0);
  std::size_t g = 0, i = 0;
  for (std::size_t k = 0; k < sorted.size();) {
    const double t = sorted[k].similarity;
    while (k < sorted.size() && sorted[k].similarity == t) {
      (sorted[k].is_genuine ? g : i)++;
      ++k;
    }
    s.thresholds.push_back(t);
    s.gen.push_back(g);
    s.imp.push_back(i);
  }
  return s;
}

}  // namespace detail

inline std::vector<RocPoint> roc_curve(std::span<const ScoredPair> pairs) {
  const auto s = detail::sweep(pairs, "roc_curve");
  std::vector<RocPoint> roc;
  roc.reserve(s.thresholds.size());
  for (std::size_t k = 0; k < s.thresholds.size(); ++k) {
    roc.push_back({s.thresholds[k], static_cast<double>(s.imp[k]) / static_cast<double>(s.total.imposter),
                   static_cast<double>(s.gen[k]) / static_cast<double>(s.total.genuine)});
  }
  return roc;
}

/// Trapezoidal area under the ROC, accumulated in integer counts so the
/// result equals the Mann-Whitney statistic with ties scored 1/2.
inline double auc(std::span<const ScoredPair> pairs) {
  const auto s = detail::sweep(pairs, "auc");
  unsigned __int128 twice_area = 0;
  for (std::size_t k = 1; k < s.thresholds.size(); ++k) {
    twice_area += static_cast<unsigned __int128>(s.imp[k] - s.imp[k - 1]) * (s.gen[k] + s.gen[k - 1]);
  }
  const double denom = 2.0 * static_cast<double>(s.total.genuine) * static_cast<double>(s.total.imposter);
  return static_cast<double>(twice_area) / denom;
}

/// Point where FAR = FRR, linearly interpolated between the bracketing thresholds.
inline double eer(std::span<const ScoredPair> pairs) {
  const auto roc = roc_curve(pairs);
  double prev_far = roc[0].far, prev_d = roc[0].far - (1.0 - roc[0].tar);
  if (prev_d >= 0) return prev_far;
  for (std::size_t k = 1; k < roc.size(); ++k) {
    const double far = roc[k].far, d = far - (1.0 - roc[k].tar);
    if (d == 0) return far;
    if (d > 0) {
      const double t = -prev_d / (d - prev_d);
      return prev_far + t * (far - prev_far);
    }
    prev_far = far;
    prev_d = d;
  }
  return roc.back().far;
}

/// Best fraction of correctly decided pairs over all thresholds.
inline double accuracy(std::span<const ScoredPair> pairs) {
  const auto s = detail::sweep(pairs, "accuracy");
  std::size_t best = 0;
  for (std::size_t k = 0; k < s.thresholds.size(); ++k) {
    best = std::max(best, s.gen[k] + (s.total.imposter - s.imp[k]));
  }
  return static_cast<double>(best) / static_cast<double>(s.total.genuine + s.total.imposter);
}

struct TarAtFar {
  double tar = 0;
  double far = 0;  // achieved FAR at the chosen threshold
  bool warning = false;
  std::string message;
};

/// Highest TAR among thresholds whose FAR does not exceed `far_target`.
inline TarAtFar tar_at_far(std::span<const ScoredPair> pairs, double far_target) {
  if (!(far_target > 0 && far_target < 1)) throw UsageError("tar_at_far: target must lie in (0, 1)");
  const auto s = detail::sweep(pairs, "tar_at_far");
  TarAtFar out;
  for (std::size_t k = 0; k < s.thresholds.size(); ++k) {
    const double far = static_cast<double>(s.imp[k]) / static_cast<double>(s.total.imposter);
    if (far > far_target) break;  // FAR only grows as the threshold drops
    out.tar = static_cast<double>(s.gen[k]) / static_cast<double>(s.total.genuine);
    out.far = far;
  }
  if (far_target < 1.0 / static_cast<double>(s.total.imposter)) {
    out.warning = true;
    out.message = "FAR target below the resolution of " + std::to_string(s.total.imposter) + " imposter pairs";
  }
  if (out.tar == 0) {
    out.warning = true;
    if (!out.message.empty()) out.message += "; ";
    out.message += "no threshold reaches TAR > 0 within the FAR target";
  }
  return out;
}

/// Fraction of probes whose most similar gallery entry has their label.
/// Ties go to the lowest gallery index.
inline double rank1_identification(const std::vector<std::vector<double>>& probes, std::span<const int> probe_labels,
                                   const std::vector<std::vector<double>>& gallery, std::span<const int> gallery_labels,
                                   Similarity kind = Similarity::cosine) {
  if (gallery.empty()) throw UsageError("rank1_identification: empty gallery");
  if (probes.empty()) throw UsageError("rank1_identification: no probes");
  if (probes.size() != probe_labels.size() || gallery.size() != gallery_labels.size()) {
    throw DimensionError("rank1_identification: feature/label counts differ");
  }
  std::size_t hits = 0;
  for (std::size_t p = 0; p < probes.size(); ++p) {
    std::size_t best = 0;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < gallery.size(); ++g) {
      const double sim = similarity(probes[p], gallery[g], kind);
      if (sim > best_sim) {
        best_sim = sim;
        best = g;
      }
    }
    if (gallery_labels[best] == probe_labels[p]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(probes.size());
}

inline constexpr std::array<double, 4> kFarTargets{1e-5, 1e-4, 1e-3, 1e-2};

struct FoldMetrics {
  int fold = 0;
  double accuracy = 0;
  double eer = 0;
  double auc = 0;
  double rank1 = 0;
  std::map<double, TarAtFar> tar_at_far;
  std::vector<RocPoint> roc;
  std::size_t num_pairs = 0;
};

struct MetricSummary {
  double mean = 0;
  double std = 0;

  std::string format(int precision = 4) const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << mean << "±" << std;
    return os.str();
  }
};

inline MetricSummary summarize(std::span<const double> values) {
  if (values.empty()) throw UsageError("summarize: no values");
  MetricSummary s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

struct EvalReport {
  std::vector<FoldMetrics> folds;
  MetricSummary accuracy, eer, auc, rank1;
  std::map<double, MetricSummary> tar_at_far;
  std::vector<RocPoint> roc;  // over the pooled pairs of all folds
  bool tar_warning = false;
};

inline FoldMetrics fold_metrics(std::span<const ScoredPair> pairs, double rank1, int fold = 0) {
  FoldMetrics m;
  m.fold = fold;
  m.accuracy = accuracy(pairs);
  m.eer = eer(pairs);
  m.auc = auc(pairs);
  m.rank1 = rank1;
  m.roc = roc_curve(pairs);
  m.num_pairs = pairs.size();
  for (double t : kFarTargets) m.tar_at_far[t] = tar_at_far(pairs, t);
  return m;
}

/// Mean and sample standard deviation of every metric over the folds.
inline EvalReport kfold_aggregate(const std::vector<FoldMetrics>& folds) {
  if (folds.size() < 2) throw UsageError("kfold_aggregate: need at least 2 folds");
  EvalReport r;
  r.folds = folds;
  auto collect = [&](auto get) {
    std::vector<double> v;
    for (const auto& f : folds) v.push_back(get(f));
    return summarize(v);
  };
  r.accuracy = collect([](const FoldMetrics& f) { return f.accuracy; });
  r.eer = collect([](const FoldMetrics& f) { return f.eer; });
  r.auc = collect([](const FoldMetrics& f) { return f.auc; });
  r.rank1 = collect([](const FoldMetrics& f) { return f.rank1; });
  for (double t : kFarTargets) {
    r.tar_at_far[t] = collect([t](const FoldMetrics& f) { return f.tar_at_far.at(t).tar; });
    for (const auto& f : folds) r.tar_warning = r.tar_warning || f.tar_at_far.at(t).warning;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Model evaluation on the pair protocol

template <typename T>
Tensor<T> stack_images(const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw UsageError("stack_images: no samples");
  const Shape& s0 = ds.samples[indices[0]].image.shape();
  const std::size_t per = shape_size(s0);
  Tensor<T> out({indices.size(), s0[0], s0[1], s0[2]});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& img = ds.samples[indices[i]].image;
    for (std::size_t k = 0; k < per; ++k) out[i * per + k] = static_cast<T>(img[k]);
  }
  return out;
}

template <typename T>
std::map<std::size_t, std::vector<double>> extract_features(AIMModel<T>& model, const Dataset& ds,
                                                            const std::vector<std::size_t>& indices) {
  const Tensor<T> feats = model.features(stack_images<T>(ds, indices));
  const std::size_t d = feats.dim(1);
  std::map<std::size_t, std::vector<double>> out;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::vector<double> f(d);
    for (std::size_t k = 0; k < d; ++k) f[k] = static_cast<double>(feats[i * d + k]);
    out[indices[i]] = std::move(f);
  }
  return out;
}

/// Scores the fold's pairs and runs youngest-gallery / oldest-probe rank-1.
template <typename T>
FoldMetrics evaluate_fold(AIMModel<T>& model, const Dataset& ds, const PairList& pairs, Similarity kind = Similarity::cosine,
                          std::vector<ScoredPair>* scored_out = nullptr) {
  std::vector<std::size_t> needed;
  for (const auto& p : pairs.pairs) {
    needed.push_back(p.sample_a);
    needed.push_back(p.sample_b);
  }
  std::vector<int> probe_labels, gallery_labels;
  std::vector<std::size_t> probe_idx, gallery_idx;
  for (int s : ds.subjects_in_fold(pairs.fold_id)) {
    const auto& mine = ds.samples_of_subject.at(static_cast<std::size_t>(s));
    if (mine.size() < 2) continue;
    auto by_age = [&](std::size_t a, std::size_t b) { return ds.samples[a].age < ds.samples[b].age; };
    gallery_idx.push_back(*std::min_element(mine.begin(), mine.end(), by_age));
    probe_idx.push_back(*std::max_element(mine.begin(), mine.end(), by_age));
    gallery_labels.push_back(s);
    probe_labels.push_back(s);
  }
  needed.insert(needed.end(), probe_idx.begin(), probe_idx.end());
  needed.insert(needed.end(), gallery_idx.begin(), gallery_idx.end());
  std::sort(needed.begin(), needed.end());
  needed.erase(std::unique(needed.begin(), needed.end()), needed.end());
  const auto feats = extract_features(model, ds, needed);

  std::vector<ScoredPair> scored;
  for (const auto& p : pairs.pairs) {
    scored.push_back({similarity(feats.at(p.sample_a), feats.at(p.sample_b), kind), p.is_genuine, p.age_gap});
  }
  std::vector<std::vector<double>> probes, gallery;
  for (auto i : probe_idx) probes.push_back(feats.at(i));
  for (auto i : gallery_idx) gallery.push_back(feats.at(i));
  const double r1 = rank1_identification(probes, probe_labels, gallery, gallery_labels, kind);
  if (scored_out) scored_out->insert(scored_out->end(), scored.begin(), scored.end());
  return fold_metrics(scored, r1, pairs.fold_id);
}

template <typename T>
EvalReport evaluate_folds(AIMModel<T>& model, const Dataset& ds, const std::vector<PairList>& fold_pairs,
                          Similarity kind = Similarity::cosine) {
  std::vector<FoldMetrics> folds;
  std::vector<ScoredPair> pooled;
  for (const auto& pl : fold_pairs) folds.push_back(evaluate_fold(model, ds, pl, kind, &pooled));
  EvalReport r = kfold_aggregate(folds);
  r.roc = roc_curve(pooled);
  return r;
}

// ---------------------------------------------------------------------------
// Report files

inline void write_report_csv(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << std::setprecision(10);
  out << "metric";
  for (const auto& f : r.folds) out << ",fold_" << f.fold;
  out << ",mean,std\n";
  auto row = [&](const std::string& name, auto get, const MetricSummary& s) {
    out << name;
    for (const auto& f : r.folds) out << ',' << get(f);
    out << ',' << s.mean << ',' << s.std << '\n';
  };
  row("accuracy", [](const FoldMetrics& f) { return f.accuracy; }, r.accuracy);
  row("eer", [](const FoldMetrics& f) { return f.eer; }, r.eer);
  row("auc", [](const FoldMetrics& f) { return f.auc; }, r.auc);
  row("rank1", [](const FoldMetrics& f) { return f.rank1; }, r.rank1);
  for (const auto& [t, s] : r.tar_at_far) {
    std::ostringstream name;
    name << "tar@far=" << t;
    row(name.str(), [t](const FoldMetrics& f) { return f.tar_at_far.at(t).tar; }, s);
  }
}

inline std::string report_summary(const EvalReport& r) {
  std::ostringstream os;
  os << "folds: " << r.folds.size() << '\n';
  os << "Acc  " << r.accuracy.format() << '\n';
  os << "EER  " << r.eer.format() << '\n';
  os << "AUC  " << r.auc.format() << '\n';
  os << "Rank-1 " << r.rank1.format() << '\n';
  for (const auto& [t, s] : r.tar_at_far) os << "TAR@FAR=" << t << "  " << s.format() << '\n';
  if (r.tar_warning) os << "warning: some TAR@FAR targets are below the pair-count resolution\n";
  return os.str();
}

inline void write_roc_csv(const std::filesystem::path& path, const std::vector<RocPoint>& roc) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << std::setprecision(10) << "far,tar\n";
  for (const auto& p : roc) out << p.far << ',' << p.tar << '\n';
}

// ---------------------------------------------------------------------------
// Manifold interpolation grid

template <typename T>
struct ImageGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Tensor<T> cells;      // rows*cols x 3 x H x W, row-major over the grid
  Tensor<T> attention;  // rows*cols x 1 x H x W

  /// Cells tiled into one 3 x (rows*H) x (cols*W) image.
  Tensor<T> composite() const { return tile(cells); }
  Tensor<T> attention_composite() const { return tile(attention); }

 private:
  Tensor<T> tile(const Tensor<T>& t) const {
    const std::size_t c = t.dim(1), h = t.dim(2), w = t.dim(3);
    Tensor<T> out({c, rows * h, cols * w});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t q = 0; q < cols; ++q)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
              out[(ch * rows * h + r * h + i) * cols * w + q * w + j] = t[(((r * cols + q) * c + ch) * h + i) * w + j];
    return out;
  }
};

namespace detail {
template <typename T>
Tensor<T> batch_of(const Tensor<T>& image) {
  if (image.rank() == 4 && image.dim(0) == 1) return image;
  if (image.rank() != 3) throw DimensionError("expected a C x H x W image, got " + shape_str(image.shape()));
  return image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
}

template <typename T>
ImageGrid<T> decode_cells(AIMModel<T>& model, const Tensor<T>& f, const Tensor<T>& x, const std::vector<AgeCode>& codes,
                          std::size_t rows, std::size_t cols) {
  Tape<T> tape(false);
  ForwardContext<T> ctx;
  Var<T> fv = tape.constant(f);
  Var<T> xv = tape.constant(x);
  Var<T> cv = tape.constant(code_batch<T>(codes));
  Synthesis<T> s = model.decode(tape, fv, cv, xv, ctx);
  return {rows, cols, s.image.value(), s.attention.value()};
}
}  // namespace detail

/// Rows interpolate the encoded representation from sample a to sample b;
/// columns sweep the age code across all seven phases.
template <typename T>
ImageGrid<T> manifold_grid(AIMModel<T>& model, const Tensor<T>& image_a, const Tensor<T>& image_b, std::size_t steps_identity,
                           std::size_t steps_age) {
  if (steps_identity < 2 || steps_age < 2) throw UsageError("manifold_grid: steps must be at least 2");
  const Tensor<T> xa = detail::batch_of(image_a), xb = detail::batch_of(image_b);
  if (xa.shape() != xb.shape()) throw DimensionError("manifold_grid: images differ in shape");
  const Tensor<T> fa = model.features(xa), fb = model.features(xb);
  const std::size_t d = fa.size(), px = xa.size();
  const std::size_t n = steps_identity * steps_age;
  Shape fshape{n, d}, xshape = xa.shape();
  xshape[0] = n;
  Tensor<T> f(fshape), x(xshape);
  std::vector<AgeCode> codes;
  for (std::size_t r = 0; r < steps_identity; ++r) {
    const T s = static_cast<T>(r) / static_cast<T>(steps_identity - 1);
    for (std::size_t q = 0; q < steps_age; ++q) {
      const std::size_t cell = r * steps_age + q;
      for (std::size_t k = 0; k < d; ++k) f[cell * d + k] = (T{1} - s) * fa[k] + s * fb[k];
      for (std::size_t k = 0; k < px; ++k) x[cell * px + k] = (T{1} - s) * xa[k] + s * xb[k];
      codes.push_back(code_at(static_cast<double>(kNumPhases - 1) * static_cast<double>(q) / static_cast<double>(steps_age - 1)));
    }
  }
  return detail::decode_cells(model, f, x, codes, steps_identity, steps_age);
}

/// One image rendered at every phase and every midpoint between adjacent phases (13 cells).
template <typename T>
ImageGrid<T> age_sweep(AIMModel<T>& model, const Tensor<T>& image) {
  const Tensor<T> x1 = detail::batch_of(image);
  const Tensor<T> f1 = model.features(x1);
  const std::size_t n = 2 * kNumPhases - 1, d = f1.size(), px = x1.size();
  Shape xshape = x1.shape();
  xshape[0] = n;
  Tensor<T> f({n, d}), x(xshape);
  std::vector<AgeCode> codes;
  for (std::size_t k = 0; k < n; ++k) {
    std::copy(f1.data().begin(), f1.data().end(), f.data().begin() + static_cast<long>(k * d));
    std::copy(x1.data().begin(), x1.data().end(), x.data().begin() + static_cast<long>(k * px));
    codes.push_back(code_at(0.5 * static_cast<double>(k)));
  }
  return detail::decode_cells(model, f, x, codes, 1, n);
}

/// Binary PPM of a 3 x H x W (or 1 x H x W) image in [-1, 1].
template <typename T>
void write_ppm(const std::filesystem::path& path, const Tensor<T>& image) {
  if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1)) throw DimensionError("write_ppm: expected 3 x H x W or 1 x H x W");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<std::uint8_t> bytes;
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  bytes.insert(bytes.end(), header.begin(), header.end());
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = static_cast<double>(image[((c == 3 ? ch : 0) * h + i) * w + j]);
        const double scaled = c == 3 ? (v + 1.0) * 127.5 : v * 255.0;
        bytes.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(scaled, 0.0, 255.0))));
      }
  write_file_atomic(path, bytes);
}

}  // namespace aim
