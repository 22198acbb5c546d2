#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "aim/losses.hpp"
#include "aim/tensor_io.hpp"

namespace aim {

inline constexpr std::size_t kNumFolds = 10;

/// One synthetic face: 3 x H x W pixels in [-1, 1] plus its labels.
template <typename T>
struct FaceSample {
  Tensor<T> image;
  int identity_id = 0;
  double age = 0;
  int phase = 0;
};

inline int phase_of_age(double age) {
  return std::min(static_cast<int>(kNumPhases) - 1, static_cast<int>(std::floor(age * static_cast<double>(kNumPhases))));
}

/// SplitMix64 finalizer; derives independent seeds from (seed, index).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct RenderOptions {
  std::size_t image_size = 32;
  double max_shrink = 0.10;      // radial shrink of the face at age 1
  double wrinkle_amplitude = 0.16;
  double max_darkening = 0.20;   // drop of mean brightness at age 1
  double jitter_px = 3.0;
  double noise_std = 0.02;
};

namespace detail {

struct IdentityTraits {
  double rx, ry, cx, cy, eye_sep, eye_y, eye_r, mouth_w;  // shape
  std::array<double, 3> skin;
  std::array<std::array<double, 4>, 3> texture;  // (fu, fv, phase, amp) per component
  std::array<double, 3> tint;
  double wrinkle_phase;
};

inline IdentityTraits identity_traits(std::uint64_t identity_seed) {
  std::mt19937_64 rng(mix_seed(identity_seed, 0xFACE));
  auto u = [&](double lo, double hi) { return lo + (hi - lo) * uniform01(rng); };
  IdentityTraits t{};
  t.rx = u(0.50, 0.70);
  t.ry = u(0.62, 0.82);
  t.cx = u(-0.08, 0.08);
  t.cy = u(-0.06, 0.06);
  t.eye_sep = u(0.18, 0.36);
  t.eye_y = u(-0.32, -0.10);
  t.eye_r = u(0.07, 0.13);
  t.mouth_w = u(0.12, 0.36);
  for (auto& s : t.skin) s = u(-0.3, 0.7);
  for (auto& c : t.texture) c = {u(0.3, 1.2), u(0.3, 1.2), u(0.0, 2.0 * std::numbers::pi), u(0.1, 0.25)};
  for (auto& c : t.tint) c = u(0.5, 1.0);
  t.wrinkle_phase = u(0.0, 2.0 * std::numbers::pi);
  return t;
}

// Renders the face without darkening or pixel noise; `offset_*` in pixels.
inline std::vector<double> render_base(const IdentityTraits& id, double age, double wrinkle_amp, double shrink, std::size_t size,
                                       double offset_x, double offset_y) {
  constexpr double kBackground = -0.35;
  const double scale = 1.0 - shrink * age;
  const double px = 2.0 / static_cast<double>(size);
  const double period = std::max(3.0, static_cast<double>(size) / 10.0);
  std::vector<double> img(3 * size * size);
  for (std::size_t i = 0; i < size; ++i) {
    for (std::size_t j = 0; j < size; ++j) {
      const double v = -1.0 + (static_cast<double>(i) + 0.5) * px - offset_y * px;
      const double uu = -1.0 + (static_cast<double>(j) + 0.5) * px - offset_x * px;
      const double du = (uu - id.cx) / (id.rx * scale);
      const double dv = (v - id.cy) / (id.ry * scale);
      const double r = std::sqrt(du * du + dv * dv);
      const double face_mask = 1.0 / (1.0 + std::exp(-(1.0 - r) / 0.1));
      // Facial features live in face-normalized coordinates.
      const double fu = du * id.rx, fv = dv * id.ry;
      double feature = 0;
      for (double side : {-1.0, 1.0}) {
        const double ex = fu - side * id.eye_sep, ey = fv - id.eye_y;
        const double e = std::sqrt(ex * ex + ey * ey) / id.eye_r;
        feature += 0.6 / (1.0 + std::exp((e - 1.0) / 0.3));
      }
      const double my = (fv - 0.35 * id.ry) / 0.04, mx = fu / id.mouth_w;
      feature += 0.45 * std::exp(-my * my) * (std::abs(mx) < 1.0 ? 1.0 - mx * mx : 0.0);
      double texture = 0;
      for (const auto& c : id.texture) texture += c[3] * std::cos(std::numbers::pi * (c[0] * fu + c[1] * fv) + c[2]);
      const double wrinkle =
          wrinkle_amp * age * std::sin(2.0 * std::numbers::pi * static_cast<double>(i) / period + id.wrinkle_phase);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double face = id.skin[ch] + id.tint[ch] * texture - feature + wrinkle;
        img[(ch * size + i) * size + j] = face_mask * face + (1.0 - face_mask) * kBackground;
      }
    }
  }
  return img;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

/// Deterministic synthetic face. The identity seed fixes shape, colour and
/// texture; age shrinks the face, adds wrinkle stripes and lowers the mean
/// brightness; the noise seed adds pose jitter and pixel noise.
template <typename T = float>
FaceSample<T> render_face(std::uint64_t identity_seed, double age, std::uint64_t noise_seed, const RenderOptions& opt = {}) {
  if (!(age >= 0.0 && age <= 1.0)) throw UsageError("render_face: age must lie in [0, 1]");
  if (opt.image_size < 8) throw UsageError("render_face: image size must be at least 8");
  const auto id = detail::identity_traits(identity_seed);
  std::mt19937_64 noise(mix_seed(noise_seed, 0x0153));
  const double jx = std::round((2.0 * uniform01(noise) - 1.0) * opt.jitter_px);
  const double jy = std::round((2.0 * uniform01(noise) - 1.0) * opt.jitter_px);
  auto img = detail::render_base(id, age, opt.wrinkle_amplitude, opt.max_shrink, opt.image_size, jx, jy);
  // Pin the mean brightness to the unaged reference minus the darkening.
  const auto reference = detail::render_base(id, 0.0, 0.0, 0.0, opt.image_size, jx, jy);
  const double shift = detail::mean_of(reference) - detail::mean_of(img) - opt.max_darkening * age;
  std::normal_distribution<double> gauss(0.0, opt.noise_std);
  FaceSample<T> s;
  s.image = Tensor<T>({3, opt.image_size, opt.image_size});
  for (std::size_t k = 0; k < img.size(); ++k) {
    s.image[k] = static_cast<T>(std::clamp(img[k] + shift + gauss(noise), -1.0, 1.0));
  }
  s.identity_id = 0;
  s.age = age;
  s.phase = phase_of_age(age);
  return s;
}

/// Mean squared response of a 3x3 Laplacian over the channel-mean image
/// (interior pixels); tracks the wrinkle texture.
template <typename T>
double wrinkle_energy(const Tensor<T>& image) {
  const bool batched = image.rank() == 4;
  if (!batched && image.rank() != 3) throw DimensionError("wrinkle_energy: expected C x H x W image");
  const std::size_t c = image.dim(batched ? 1 : 0), h = image.dim(batched ? 2 : 1), w = image.dim(batched ? 3 : 2);
  const std::size_t n = batched ? image.dim(0) : 1;
  if (h < 3 || w < 3) throw DimensionError("wrinkle_energy: image too small");
  double total = 0;
  for (std::size_t b = 0; b < n; ++b) {
    std::vector<double> gray(h * w, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < h * w; ++k) gray[k] += image[(b * c + ch) * h * w + k] / static_cast<double>(c);
    double acc = 0;
    for (std::size_t i = 1; i + 1 < h; ++i)
      for (std::size_t j = 1; j + 1 < w; ++j) {
        const double lap = gray[(i - 1) * w + j] + gray[(i + 1) * w + j] + gray[i * w + j - 1] + gray[i * w + j + 1] -
                           4.0 * gray[i * w + j];
        acc += lap * lap;
      }
    total += acc / static_cast<double>((h - 2) * (w - 2));
  }
  return total / static_cast<double>(n);
}

struct SampleRecord {
  int identity_id = 0;
  double age = 0;
  int phase = 0;
  std::uint64_t identity_seed = 0;
  std::uint64_t noise_seed = 0;
};

/// Collection of samples with subject-disjoint folds.
struct Dataset {
  std::size_t image_size = 32;
  std::size_t num_subjects = 0;
  std::vector<SampleRecord> records;
  std::vector<FaceSample<float>> samples;
  std::vector<int> fold_of_subject;
  std::vector<std::vector<std::size_t>> samples_of_subject;

  std::vector<int> subjects_in_fold(int fold) const {
    std::vector<int> out;
    for (std::size_t s = 0; s < fold_of_subject.size(); ++s)
      if (fold_of_subject[s] == fold) out.push_back(static_cast<int>(s));
    return out;
  }

  int fold_of_sample(std::size_t i) const { return fold_of_subject[static_cast<std::size_t>(samples[i].identity_id)]; }

  void index() {
    samples_of_subject.assign(num_subjects, {});
    for (std::size_t i = 0; i < samples.size(); ++i) {
      samples_of_subject.at(static_cast<std::size_t>(samples[i].identity_id)).push_back(i);
    }
  }
};

/// Assigns subjects to `folds` folds: a seeded permutation cut into equal
/// blocks, the remainder dealt round-robin.
inline std::vector<int> assign_folds(std::size_t num_subjects, std::uint64_t seed, std::size_t folds = kNumFolds) {
  std::vector<std::size_t> order(num_subjects);
  for (std::size_t i = 0; i < num_subjects; ++i) order[i] = i;
  std::mt19937_64 rng(mix_seed(seed, 0xF01D));
  for (std::size_t i = num_subjects; i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);
  }
  std::vector<int> fold(num_subjects, 0);
  const std::size_t per = num_subjects / folds;
  for (std::size_t k = 0; k < num_subjects; ++k) {
    fold[order[k]] = k < per * folds ? static_cast<int>(k / per) : static_cast<int>((k - per * folds) % folds);
  }
  return fold;
}

/// Renders `num_subjects` x `samples_per_subject` faces. Output order and
/// content depend only on the arguments, not on `workers`.
inline Dataset make_dataset(std::size_t num_subjects, std::size_t samples_per_subject, std::uint64_t seed,
                            const RenderOptions& opt = {}, std::size_t workers = 1) {
  if (num_subjects < 20) throw UsageError("make_dataset: need at least 20 subjects");
  if (samples_per_subject < 2) throw UsageError("make_dataset: need at least 2 samples per subject for genuine pairs");
  Dataset ds;
  ds.image_size = opt.image_size;
  ds.num_subjects = num_subjects;
  std::mt19937_64 rng(mix_seed(seed, 0xDA7A));
  for (std::size_t s = 0; s < num_subjects; ++s) {
    const std::uint64_t identity_seed = mix_seed(seed, s);
    for (std::size_t k = 0; k < samples_per_subject; ++k) {
      SampleRecord r;
      r.identity_id = static_cast<int>(s);
      r.age = uniform01(rng);
      r.phase = phase_of_age(r.age);
      r.identity_seed = identity_seed;
      r.noise_seed = rng();
      ds.records.push_back(r);
    }
  }
  ds.samples.resize(ds.records.size());
  auto render = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < ds.records.size(); i += stride) {
      const auto& r = ds.records[i];
      ds.samples[i] = render_face<float>(r.identity_seed, r.age, r.noise_seed, opt);
      ds.samples[i].identity_id = r.identity_id;
    }
  };
  workers = std::max<std::size_t>(1, workers);
  if (workers == 1) {
    render(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(render, w, workers);
    for (auto& t : pool) t.join();
  }
  ds.fold_of_subject = assign_folds(num_subjects, seed);
  ds.index();
  return ds;
}

struct Pair {
  std::size_t sample_a = 0;
  std::size_t sample_b = 0;
  bool is_genuine = false;
  double age_gap = 0;
};

struct PairList {
  int fold_id = 0;
  std::vector<Pair> pairs;
};

inline constexpr std::size_t kGenuinePerSubject = 5;
inline constexpr std::size_t kImposterPerSubject = 5;

/// 5 genuine (same subject, distinct ages) and 5 imposter pairs per subject of the fold.
inline PairList make_pairs(const Dataset& ds, int fold, std::uint64_t rng_seed) {
  const auto subjects = ds.subjects_in_fold(fold);
  if (subjects.size() < 2) throw UsageError("make_pairs: fold " + std::to_string(fold) + " has fewer than 2 subjects");
  std::mt19937_64 rng(mix_seed(rng_seed, static_cast<std::uint64_t>(fold)));
  PairList out;
  out.fold_id = fold;
  std::set<std::pair<std::size_t, std::size_t>> used;
  auto gap = [&](std::size_t a, std::size_t b) { return std::abs(ds.samples[a].age - ds.samples[b].age); };
  for (int s : subjects) {
    const auto& mine = ds.samples_of_subject.at(static_cast<std::size_t>(s));
    std::vector<std::pair<std::size_t, std::size_t>> candidates;
    for (std::size_t a : mine)
      for (std::size_t b : mine)
        if (a != b && ds.samples[a].age != ds.samples[b].age) candidates.emplace_back(a, b);
    if (candidates.size() < kGenuinePerSubject) {
      throw UsageError("make_pairs: subject " + std::to_string(s) + " has too few samples for " +
                       std::to_string(kGenuinePerSubject) + " genuine pairs");
    }
    for (std::size_t i = candidates.size(); i > 1; --i) std::swap(candidates[i - 1], candidates[rng() % i]);
    std::size_t taken = 0;
    for (const auto& [a, b] : candidates) {
      if (taken == kGenuinePerSubject) break;
      if (!used.insert({a, b}).second) continue;
      out.pairs.push_back({a, b, true, gap(a, b)});
      ++taken;
    }
    taken = 0;
    for (std::size_t attempt = 0; taken < kImposterPerSubject; ++attempt) {
      if (attempt > 10000) throw UsageError("make_pairs: cannot draw distinct imposter pairs");
      int other = subjects[rng() % subjects.size()];
      if (other == s) continue;
      const auto& theirs = ds.samples_of_subject.at(static_cast<std::size_t>(other));
      const std::size_t a = mine[rng() % mine.size()];
      const std::size_t b = theirs[rng() % theirs.size()];
      if (!used.insert({a, b}).second) continue;
      out.pairs.push_back({a, b, false, gap(a, b)});
      ++taken;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// On-disk layout:
//   <dir>/manifest.csv            sample_path,identity_id,age,phase,fold_id
//   <dir>/samples/s<index>.aimt   one 3 x H x W float tensor per sample
//   <dir>/pairs/fold_<k>.csv      fold_id,sample_a,sample_b,is_genuine,age_gap

inline std::string sample_relpath(std::size_t i) {
  std::ostringstream os;
  os << "samples/s" << std::setw(6) << std::setfill('0') << i << ".aimt";
  return os.str();
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_pairs_csv(const std::filesystem::path& path, const PairList& pl) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "fold_id,sample_a,sample_b,is_genuine,age_gap\n";
  for (const auto& p : pl.pairs) {
    out << pl.fold_id << ',' << p.sample_a << ',' << p.sample_b << ',' << (p.is_genuine ? 1 : 0) << ','
        << format_double(p.age_gap) << '\n';
  }
}

inline PairList read_pairs_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  PairList pl;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string f[5];
    for (auto& x : f) std::getline(row, x, ',');
    try {
      pl.fold_id = std::stoi(f[0]);
      pl.pairs.push_back({std::stoul(f[1]), std::stoul(f[2]), f[3] == "1", std::stod(f[4])});
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": malformed pair row " + std::to_string(lineno), 0);
    }
  }
  return pl;
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir, const std::vector<PairList>& pairs) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "samples");
  fs::create_directories(dir / "pairs");
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw IoError("cannot write " + (dir / "manifest.csv").string());
  manifest << "sample_path,identity_id,age,phase,fold_id\n";
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    write_tensor(dir / sample_relpath(i), s.image);
    manifest << sample_relpath(i) << ',' << s.identity_id << ',' << format_double(s.age) << ',' << s.phase << ','
             << ds.fold_of_sample(i) << '\n';
  }
  std::ofstream folds(dir / "folds.csv");
  if (!folds) throw IoError("cannot write " + (dir / "folds.csv").string());
  folds << "identity_id,fold_id\n";
  for (std::size_t s = 0; s < ds.fold_of_subject.size(); ++s) folds << s << ',' << ds.fold_of_subject[s] << '\n';
  for (const auto& pl : pairs) write_pairs_csv(dir / "pairs" / ("fold_" + std::to_string(pl.fold_id) + ".csv"), pl);
  if (!manifest.flush() || !folds.flush()) throw IoError("write failed under " + dir.string());
}

inline Dataset load_dataset(const std::filesystem::path& dir, std::size_t subjects_limit = 0) {
  std::ifstream in(dir / "manifest.csv");
  if (!in) throw UsageError("no dataset at " + dir.string() + " (manifest.csv missing)");
  std::string line;
  std::getline(in, line);
  Dataset ds;
  std::vector<int> folds;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string f[5];
    for (auto& x : f) std::getline(row, x, ',');
    FaceSample<float> s;
    int fold = 0;
    try {
      s.identity_id = std::stoi(f[1]);
      s.age = std::stod(f[2]);
      s.phase = std::stoi(f[3]);
      fold = std::stoi(f[4]);
    } catch (const std::exception&) {
      throw FormatError("manifest.csv: malformed row " + std::to_string(lineno), 0);
    }
    if (subjects_limit && static_cast<std::size_t>(s.identity_id) >= subjects_limit) continue;
    s.image = read_tensor<float>(dir / f[0]);
    const auto id = static_cast<std::size_t>(s.identity_id);
    if (id >= folds.size()) folds.resize(id + 1, -1);
    folds[id] = fold;
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw UsageError("dataset at " + dir.string() + " is empty");
  ds.num_subjects = folds.size();
  ds.fold_of_subject = folds;
  ds.image_size = ds.samples[0].image.dim(1);
  ds.index();
  return ds;
}

}  // namespace aim
