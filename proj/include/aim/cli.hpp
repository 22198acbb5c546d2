#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aim/errors.hpp"
#include "aim/evaluator.hpp"
#include "aim/gradcheck.hpp"
#include "aim/run_config.hpp"
#include "aim/synthdata.hpp"
#include "aim/trainer.hpp"

namespace aim {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitNumeric = 2;
inline constexpr int kExitIo = 3;

namespace cli {

/// Config-key flags attached to one subcommand.
struct KeyFlags {
  std::string config_file;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "flat key = value config file");
    for (const auto& k : config_keys()) {
      std::string flag = k.name;
      std::replace(flag.begin(), flag.end(), '_', '-');
      options[k.name] = cmd->add_option("--" + flag, values[k.name], k.help)->type_name(key_type_name(k.type));
    }
  }

  RunConfig resolve(std::set<std::string>* explicit_keys = nullptr) const {
    std::vector<std::pair<std::string, std::string>> file, flags;
    if (!config_file.empty()) file = read_config_file(config_file);
    for (const auto& k : config_keys()) {
      if (options.at(k.name)->count() > 0) flags.emplace_back(k.name, values.at(k.name));
    }
    return resolve_config(file, flags, explicit_keys);
  }
};

inline std::string checkpoint_dtype(const CheckpointBundle& b) {
  for (const auto& [name, t] : b.records) {
    if (name.rfind("model/", 0) == 0) return std::holds_alternative<Tensor<float>>(t) ? "f32" : "f64";
  }
  throw FormatError("checkpoint holds no model parameters", 0);
}

inline Dataset load_data(const RunConfig& cfg) {
  if (!std::filesystem::exists(std::filesystem::path(cfg.data_dir) / "manifest.csv")) {
    throw UsageError("no dataset at '" + cfg.data_dir + "'; run make-data first or set --data-dir / AIM_DATA_DIR");
  }
  return load_dataset(cfg.data_dir, cfg.subjects_limit);
}

/// Pair lists for the held-out folds. Lists from make-data are used when the
/// whole dataset is loaded; otherwise they are regenerated on the subset.
inline std::vector<PairList> eval_pairs(const RunConfig& cfg, const Dataset& ds, std::ostream& err) {
  const auto test_folds = split_folds(cfg.holdout_folds).second;
  std::vector<PairList> out;
  for (int f : test_folds) {
    const auto file = std::filesystem::path(cfg.data_dir) / "pairs" / ("fold_" + std::to_string(f) + ".csv");
    if (cfg.subjects_limit == 0 && std::filesystem::exists(file)) {
      out.push_back(read_pairs_csv(file));
      for (const auto& p : out.back().pairs) {
        if (p.sample_a >= ds.samples.size() || p.sample_b >= ds.samples.size()) {
          throw FormatError(file.string() + ": sample index out of range", 0);
        }
      }
      continue;
    }
    if (ds.subjects_in_fold(f).size() < 2) {
      err << "warning: fold " << f << " has fewer than 2 subjects in the loaded data; skipped\n";
      continue;
    }
    out.push_back(make_pairs(ds, f, cfg.pair_seed));
  }
  if (out.empty()) throw UsageError("no evaluable held-out fold; load more subjects");
  return out;
}

inline void check_image_size(const RunConfig& cfg, const std::set<std::string>& explicit_keys, std::size_t model_size,
                             const Dataset& ds) {
  if (explicit_keys.count("image_size") && cfg.model.image_size != model_size) {
    throw ConfigError("checkpoint image size " + std::to_string(model_size) + " differs from configured image_size " +
                      std::to_string(cfg.model.image_size));
  }
  if (ds.image_size != model_size) {
    throw ConfigError("checkpoint image size " + std::to_string(model_size) + " differs from dataset image size " +
                      std::to_string(ds.image_size));
  }
}

// ---------------------------------------------------------------------------
// make-data

inline int cmd_make_data(const RunConfig& cfg, bool force, std::ostream& out) {
  namespace fs = std::filesystem;
  const fs::path dir = cfg.data_dir;
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw UsageError("'" + dir.string() + "' already exists and is not empty; pass --force to overwrite");
    for (const char* entry : {"manifest.csv", "folds.csv", "samples", "pairs"}) fs::remove_all(dir / entry);
  }
  const Dataset ds = make_dataset(cfg.subjects, cfg.per_subject, cfg.train.seed, cfg.render, cfg.workers);
  std::vector<PairList> pairs;
  for (int f = 0; f < static_cast<int>(kNumFolds); ++f) pairs.push_back(make_pairs(ds, f, cfg.pair_seed));
  write_dataset(ds, dir, pairs);
  out << "wrote " << ds.samples.size() << " samples of " << ds.num_subjects << " subjects in " << kNumFolds
      << " folds to " << dir.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

template <typename T>
int cmd_train(RunConfig cfg, const std::set<std::string>& explicit_keys, bool resume, std::ostream& out) {
  namespace fs = std::filesystem;
  const Dataset ds = load_data(cfg);
  if (explicit_keys.count("image_size") && cfg.model.image_size != ds.image_size) {
    throw ConfigError("configured image_size " + std::to_string(cfg.model.image_size) + " differs from dataset image size " +
                      std::to_string(ds.image_size));
  }
  cfg.model.image_size = ds.image_size;
  cfg.train.variant = parse_variant(cfg.ablation);
  const auto train_folds = split_folds(cfg.holdout_folds).first;
  const auto indices = samples_in_folds(ds, train_folds);

  fs::create_directories(cfg.run_dir);
  const fs::path ckpt = cfg.checkpoint_path();
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  {
    std::ofstream dump(fs::path(cfg.run_dir) / "config.txt");
    dump << dump_config(cfg);
  }

  Trainer<T> trainer(ds, indices, cfg.model, cfg.weights, cfg.train);
  if (resume && fs::exists(ckpt)) {
    trainer.restore(load_checkpoint(ckpt));
    out << "resumed from " << ckpt.string() << " at step " << trainer.step() << "\n";
  }
  MetricsLog log(fs::path(cfg.run_dir) / "metrics.csv");
  out << "training '" << trainer.config().variant.name << "' on " << indices.size() << " samples for "
      << trainer.total_steps() << " steps\n";
  const auto t0 = std::chrono::steady_clock::now();
  trainer.train([&](const LossReport& r) {
    log.write(r);
    const std::size_t done = r.step + 1;
    if (cfg.checkpoint_every && done % cfg.checkpoint_every == 0) {
      save_checkpoint(trainer.checkpoint(), ckpt);
      out << r.progress_line() << "\n" << std::flush;
    }
  });
  save_checkpoint(trainer.checkpoint(), ckpt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << "finished " << trainer.step() << " steps in " << std::fixed << std::setprecision(1) << secs << " s; checkpoint "
      << ckpt.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

template <typename T>
std::unique_ptr<AIMModel<T>> model_from_checkpoint(const CheckpointBundle& b) {
  auto model = std::make_unique<AIMModel<T>>(model_config_from(b), loss_weights_from(b));
  load_model_state(*model, b);
  return model;
}

template <typename T>
int eval_with(std::unique_ptr<AIMModel<T>> model, const RunConfig& cfg, const Dataset& ds, std::ostream& out,
              std::ostream& err) {
  namespace fs = std::filesystem;
  const auto pairs = eval_pairs(cfg, ds, err);
  const EvalReport report = evaluate_folds(*model, ds, pairs, parse_similarity(cfg.similarity));
  fs::create_directories(cfg.run_dir);
  write_report_csv(fs::path(cfg.run_dir) / "eval_report.csv", report);
  write_roc_csv(fs::path(cfg.run_dir) / "eval_roc.csv", report.roc);
  out << report_summary(report);
  if (report.tar_warning) err << "warning: some TAR@FAR targets are not resolvable with this many pairs\n";
  return kExitOk;
}

inline int cmd_eval(const RunConfig& cfg, const std::set<std::string>& explicit_keys, bool untrained, std::ostream& out,
                    std::ostream& err) {
  const Dataset ds = load_data(cfg);
  if (untrained) {
    ModelConfig mc = cfg.model;
    if (explicit_keys.count("image_size") && mc.image_size != ds.image_size) {
      throw ConfigError("configured image_size differs from dataset image size " + std::to_string(ds.image_size));
    }
    mc.image_size = ds.image_size;
    mc.num_identities = std::max<std::size_t>(1, ds.num_subjects);
    if (cfg.dtype == "f64") return eval_with(std::make_unique<AIMModel<double>>(mc, cfg.weights, cfg.train.seed), cfg, ds, out, err);
    return eval_with(std::make_unique<AIMModel<float>>(mc, cfg.weights, cfg.train.seed), cfg, ds, out, err);
  }
  const auto path = cfg.checkpoint_path();
  if (!std::filesystem::exists(path)) throw UsageError("no checkpoint at " + path.string());
  const CheckpointBundle b = load_checkpoint(path);
  check_image_size(cfg, explicit_keys, model_config_from(b).image_size, ds);
  if (checkpoint_dtype(b) == "f64") return eval_with(model_from_checkpoint<double>(b), cfg, ds, out, err);
  return eval_with(model_from_checkpoint<float>(b), cfg, ds, out, err);
}

// ---------------------------------------------------------------------------
// synthesize

struct SynthOptions {
  std::optional<long long> sample_a;
  std::optional<long long> sample_b;
  std::string grid = "5x7";
  bool age_sweep = false;
  bool export_attention = false;
  bool ppm = false;
  std::string out_dir;
};

inline std::pair<std::size_t, std::size_t> parse_grid(const std::string& s) {
  static const std::regex re(R"((\d+)[xX](\d+))");
  std::smatch m;
  if (!std::regex_match(s, m, re)) throw UsageError("--grid expects RxC, e.g. 5x7; got '" + s + "'");
  const auto rows = std::stoul(m[1]), cols = std::stoul(m[2]);
  if (rows < 2 || cols < 2) throw UsageError("--grid needs at least 2 rows and 2 columns");
  return {rows, cols};
}

template <typename T>
Tensor<T> sample_image(const Dataset& ds, std::optional<long long> id, const char* flag) {
  if (!id) throw UsageError(std::string(flag) + " is required");
  if (*id < 0 || static_cast<std::size_t>(*id) >= ds.samples.size()) {
    throw UsageError(std::string(flag) + " " + std::to_string(*id) + " is not a sample id (dataset has " +
                     std::to_string(ds.samples.size()) + " samples)");
  }
  const auto& img = ds.samples[static_cast<std::size_t>(*id)].image;
  Tensor<T> out(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = static_cast<T>(img[i]);
  return out;
}

template <typename T>
void write_grid(const ImageGrid<T>& g, const std::filesystem::path& dir, const std::string& stem, const SynthOptions& o,
                std::ostream& out) {
  write_tensor(dir / (stem + ".aimt"), g.composite());
  write_tensor(dir / (stem + "_cells.aimt"), g.cells);
  if (o.ppm) write_ppm(dir / (stem + ".ppm"), g.composite());
  if (o.export_attention) {
    write_tensor(dir / (stem + "_attention.aimt"), g.attention_composite());
    write_tensor(dir / (stem + "_attention_cells.aimt"), g.attention);
    if (o.ppm) write_ppm(dir / (stem + "_attention.ppm"), g.attention_composite());
  }
  out << "wrote " << stem << ": " << g.rows << "x" << g.cols << " = " << g.rows * g.cols << " cells\n";
}

template <typename T>
int synthesize_with(const CheckpointBundle& b, const Dataset& ds, const SynthOptions& o, const RunConfig& cfg,
                    std::ostream& out) {
  auto model = model_from_checkpoint<T>(b);
  const std::filesystem::path dir = o.out_dir.empty() ? std::filesystem::path(cfg.run_dir) / "synth" : std::filesystem::path(o.out_dir);
  const Tensor<T> a = sample_image<T>(ds, o.sample_a, "--sample-a");
  const bool want_grid = !o.age_sweep || o.sample_b.has_value();
  if (want_grid) {
    const auto [rows, cols] = parse_grid(o.grid);
    const Tensor<T> bimg = sample_image<T>(ds, o.sample_b, "--sample-b");
    std::filesystem::create_directories(dir);
    write_grid(manifold_grid(*model, a, bimg, rows, cols), dir, "grid", o, out);
  }
  if (o.age_sweep) {
    std::filesystem::create_directories(dir);
    write_grid(age_sweep(*model, a), dir, "age_sweep", o, out);
  }
  return kExitOk;
}

inline int cmd_synthesize(const RunConfig& cfg, const std::set<std::string>& explicit_keys, const SynthOptions& o,
                          std::ostream& out) {
  const Dataset ds = load_data(cfg);
  const auto path = cfg.checkpoint_path();
  if (!std::filesystem::exists(path)) throw UsageError("no checkpoint at " + path.string());
  const CheckpointBundle b = load_checkpoint(path);
  check_image_size(cfg, explicit_keys, model_config_from(b).image_size, ds);
  if (checkpoint_dtype(b) == "f64") return synthesize_with<double>(b, ds, o, cfg, out);
  return synthesize_with<float>(b, ds, o, cfg, out);
}

// ---------------------------------------------------------------------------
// gradcheck

inline int cmd_gradcheck(const RunConfig& cfg, const std::set<std::string>& explicit_keys, const std::string& corrupt,
                         std::ostream& out) {
  if (explicit_keys.count("dtype") && cfg.dtype != "f64") throw PrecisionError("gradcheck runs in 64-bit mode only");
  GradCheckOptions opt;
  opt.seed = cfg.train.seed;
  opt.corrupt = corrupt;
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradcheck_suite(opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::size_t failed = 0;
  out << std::left << std::setw(10) << "category" << std::setw(44) << "component" << std::setw(14) << "max_rel_error"
      << "result\n";
  for (const auto& r : results) {
    out << std::left << std::setw(10) << r.category << std::setw(44) << r.component << std::setw(14) << std::setprecision(3)
        << std::scientific << r.max_rel_error << std::defaultfloat << (r.passed ? "PASS" : "FAIL") << "\n";
    failed += r.passed ? 0 : 1;
  }
  out << results.size() - failed << "/" << results.size() << " checks passed (tolerance " << opt.tolerance << ") in "
      << std::fixed << std::setprecision(2) << secs << std::defaultfloat << " s\n";
  return failed ? kExitNumeric : kExitOk;
}

}  // namespace cli

/// Maps a library exception onto the process exit code.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const std::filesystem::filesystem_error*>(&e)) {
    return kExitIo;
  }
  return kExitUsage;
}

/// Entry point shared by the `aim` tool and the tests. `args` excludes the program name.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Age-invariant face model toolkit: synthetic data, training, evaluation and synthesis", "aim"};
  app.require_subcommand(1);

  auto* make_data = app.add_subcommand("make-data", "render a synthetic cross-age face dataset");
  auto* train = app.add_subcommand("train", "train the model (or an ablation variant)");
  auto* eval = app.add_subcommand("eval", "score verification pairs of the held-out folds");
  auto* synth = app.add_subcommand("synthesize", "write identity x age manifold grids and age sweeps");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every backward rule");

  std::map<CLI::App*, cli::KeyFlags> flags;
  for (auto* cmd : {make_data, train, eval, synth, gradcheck}) flags[cmd].attach(cmd);

  bool force = false, resume = false, untrained = false;
  make_data->add_flag("--force", force, "overwrite an existing dataset");
  train->add_flag("--resume", resume, "continue from the checkpoint when it exists");
  eval->add_flag("--untrained", untrained, "evaluate a freshly initialized model");
  cli::SynthOptions so;
  synth->add_option("--sample-a", so.sample_a, "sample id of the first face");
  synth->add_option("--sample-b", so.sample_b, "sample id of the second face");
  synth->add_option("--grid", so.grid, "grid size RxC (identity rows x age columns)")->capture_default_str();
  synth->add_flag("--age-sweep", so.age_sweep, "render sample a at all phases and midpoints");
  synth->add_flag("--export-attention", so.export_attention, "also write the attention mask of every cell");
  synth->add_flag("--ppm", so.ppm, "also write PPM images");
  synth->add_option("--out", so.out_dir, "output directory (default <run_dir>/synth)");
  std::string corrupt;
  gradcheck->add_option("--corrupt", corrupt, "give the named check a faulty backward rule");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    CLI::App* cmd = app.get_subcommands().front();
    std::set<std::string> explicit_keys;
    RunConfig cfg = flags.at(cmd).resolve(&explicit_keys);
    if (cmd == make_data) return cli::cmd_make_data(cfg, force, out);
    if (cmd == train) {
      if (cfg.dtype == "f64") return cli::cmd_train<double>(cfg, explicit_keys, resume, out);
      return cli::cmd_train<float>(cfg, explicit_keys, resume, out);
    }
    if (cmd == eval) return cli::cmd_eval(cfg, explicit_keys, untrained, out, err);
    if (cmd == synth) return cli::cmd_synthesize(cfg, explicit_keys, so, out);
    return cli::cmd_gradcheck(cfg, explicit_keys, corrupt, out);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace aim
