#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "aim/errors.hpp"
#include "aim/evaluator.hpp"
#include "aim/networks.hpp"
#include "aim/synthdata.hpp"
#include "aim/trainer.hpp"

namespace aim {

/// Everything a CLI run can be configured with.
struct RunConfig {
  ModelConfig model;
  LossWeights weights;
  TrainConfig train;
  RenderOptions render;

  std::string data_dir = "data";
  std::size_t subjects = 200;
  std::size_t per_subject = 12;
  std::size_t subjects_limit = 0;  // 0 loads every subject
  std::size_t workers = 1;

  std::string run_dir = "run";
  std::string checkpoint;  // empty: <run_dir>/checkpoint.aimc
  std::size_t checkpoint_every = 100;
  std::string ablation = "full";
  std::string dtype = "f32";

  std::size_t holdout_folds = 2;
  std::uint64_t pair_seed = 0;
  std::string similarity = "cosine";

  std::filesystem::path checkpoint_path() const {
    return checkpoint.empty() ? std::filesystem::path(run_dir) / "checkpoint.aimc" : std::filesystem::path(checkpoint);
  }
};

enum class KeyType { uint, real, boolean, text, sizes };

inline const char* key_type_name(KeyType t) {
  switch (t) {
    case KeyType::uint:
      return "unsigned integer";
    case KeyType::real:
      return "number";
    case KeyType::boolean:
      return "boolean";
    case KeyType::text:
      return "string";
    case KeyType::sizes:
      return "comma-separated list of unsigned integers";
  }
  return "value";
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  if (t.empty() || !std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  }
  try {
    return std::stoull(t);
  } catch (const std::exception&) {
    throw ConfigError(key + ": value '" + v + "' out of range");
  }
}

inline double parse_real(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(t, &used);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  if (used != t.size() || !std::isfinite(out)) throw ConfigError(key + ": expected a finite number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<std::size_t>(parse_uint(key, item)));
  if (out.empty()) throw ConfigError(key + ": expected at least one size");
  return out;
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace detail

struct ConfigKey {
  std::string name;
  KeyType type;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

/// Every addressable key. Names use underscores; the CLI spells them with dashes.
inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto uint_key = [&](std::string name, std::string help, auto member) {
      k.push_back({name, KeyType::uint, std::move(help),
                   [name, member](RunConfig& c, const std::string& v) {
                     member(c) = static_cast<std::remove_reference_t<decltype(member(c))>>(detail::parse_uint(name, v));
                   },
                   [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }});
    };
    auto real_key = [&](std::string name, std::string help, auto member) {
      k.push_back({name, KeyType::real, std::move(help),
                   [name, member](RunConfig& c, const std::string& v) { member(c) = detail::parse_real(name, v); },
                   [member](const RunConfig& c) { return format_double(member(const_cast<RunConfig&>(c))); }});
    };
    auto bool_key = [&](std::string name, std::string help, auto member) {
      k.push_back({name, KeyType::boolean, std::move(help),
                   [name, member](RunConfig& c, const std::string& v) { member(c) = detail::parse_bool(name, v); },
                   [member](const RunConfig& c) { return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false"); }});
    };
    auto text_key = [&](std::string name, std::string help, auto member, std::vector<std::string> allowed = {}) {
      k.push_back({name, KeyType::text, std::move(help),
                   [name, member, allowed](RunConfig& c, const std::string& v) {
                     const std::string t = detail::trim(v);
                     if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), t) == allowed.end()) {
                       std::string list;
                       for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
                       throw ConfigError(name + ": expected one of " + list + ", got '" + v + "'");
                     }
                     member(c) = t;
                   },
                   [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); }});
    };
    auto sizes_key = [&](std::string name, std::string help, auto member) {
      k.push_back({name, KeyType::sizes, std::move(help),
                   [name, member](RunConfig& c, const std::string& v) { member(c) = detail::parse_sizes(name, v); },
                   [member](const RunConfig& c) { return detail::join_sizes(member(const_cast<RunConfig&>(c))); }});
    };

    // Data
    text_key("data_dir", "dataset root (default $AIM_DATA_DIR or ./data)", [](RunConfig& c) -> std::string& { return c.data_dir; });
    uint_key("subjects", "number of synthetic subjects", [](RunConfig& c) -> std::size_t& { return c.subjects; });
    uint_key("per_subject", "samples per subject", [](RunConfig& c) -> std::size_t& { return c.per_subject; });
    uint_key("subjects_limit", "load only subjects with id below this (0 = all)",
             [](RunConfig& c) -> std::size_t& { return c.subjects_limit; });
    uint_key("workers", "rendering threads", [](RunConfig& c) -> std::size_t& { return c.workers; });
    uint_key("image_size", "image side in pixels", [](RunConfig& c) -> std::size_t& { return c.model.image_size; });
    real_key("max_shrink", "face shrink at the oldest age", [](RunConfig& c) -> double& { return c.render.max_shrink; });
    real_key("wrinkle_amplitude", "wrinkle amplitude at the oldest age",
             [](RunConfig& c) -> double& { return c.render.wrinkle_amplitude; });
    real_key("max_darkening", "mean intensity drop at the oldest age", [](RunConfig& c) -> double& { return c.render.max_darkening; });
    real_key("jitter_px", "maximum translation jitter in pixels", [](RunConfig& c) -> double& { return c.render.jitter_px; });
    real_key("noise_std", "pixel noise standard deviation", [](RunConfig& c) -> double& { return c.render.noise_std; });

    // Model
    uint_key("channels", "image channels", [](RunConfig& c) -> std::size_t& { return c.model.channels; });
    uint_key("feature_dim", "identity feature size", [](RunConfig& c) -> std::size_t& { return c.model.feature_dim; });
    uint_key("patch_size", "discriminator patch side", [](RunConfig& c) -> std::size_t& { return c.model.patch_size; });
    sizes_key("encoder_widths", "encoder conv channels", [](RunConfig& c) -> std::vector<std::size_t>& { return c.model.encoder_widths; });
    sizes_key("decoder_widths", "decoder seed width then deconv channels",
              [](RunConfig& c) -> std::vector<std::size_t>& { return c.model.decoder_widths; });
    sizes_key("patch_widths", "patch discriminator channels",
              [](RunConfig& c) -> std::vector<std::size_t>& { return c.model.patch_widths; });
    uint_key("mlp_hidden", "hidden width of the feature-space heads", [](RunConfig& c) -> std::size_t& { return c.model.mlp_hidden; });
    real_key("leaky_slope", "leaky ReLU slope", [](RunConfig& c) -> double& { return c.model.leaky_slope; });
    real_key("dropout_keep", "dropout keep probability", [](RunConfig& c) -> double& { return c.model.dropout_keep; });
    real_key("grl_coeff", "gradient reversal coefficient", [](RunConfig& c) -> double& { return c.model.grl_coeff; });
    real_key("init_std", "weight init standard deviation", [](RunConfig& c) -> double& { return c.model.init_std; });
    bool_key("attention", "attention-based blending", [](RunConfig& c) -> bool& { return c.model.attention; });

    // Loss weights
    for (std::size_t i = 1; i <= 14; ++i) {
      real_key("lambda" + std::to_string(i), "loss weight lambda_" + std::to_string(i),
               [i](RunConfig& c) -> double& { return c.weights(i); });
    }

    // Training
    uint_key("seed", "random seed for data, initialization and training",
             [](RunConfig& c) -> std::uint64_t& { return c.train.seed; });
    uint_key("batch_size", "minibatch size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
    real_key("adam_alpha", "Adam learning rate", [](RunConfig& c) -> double& { return c.train.adam_alpha; });
    real_key("adam_beta1", "Adam beta1", [](RunConfig& c) -> double& { return c.train.adam_beta1; });
    real_key("adam_beta2", "Adam beta2", [](RunConfig& c) -> double& { return c.train.adam_beta2; });
    real_key("adam_eps", "Adam epsilon", [](RunConfig& c) -> double& { return c.train.adam_eps; });
    real_key("weight_decay", "decoupled weight decay", [](RunConfig& c) -> double& { return c.train.weight_decay; });
    uint_key("epochs", "training epochs", [](RunConfig& c) -> std::size_t& { return c.train.epochs; });
    uint_key("steps", "training steps (0 = epochs x steps per epoch)", [](RunConfig& c) -> std::size_t& { return c.train.steps; });
    uint_key("lr_decay_epoch", "epoch at which the learning rate drops",
             [](RunConfig& c) -> std::size_t& { return c.train.lr_decay_epoch; });
    real_key("lr_decay_factor", "learning rate multiplier after the drop",
             [](RunConfig& c) -> double& { return c.train.lr_decay_factor; });
    real_key("clip_norm", "per-network gradient norm cap (0 disables)", [](RunConfig& c) -> double& { return c.train.clip_norm; });
    uint_key("d_steps", "discriminator updates per generator update", [](RunConfig& c) -> std::size_t& { return c.train.d_steps; });
    bool_key("check_finite", "stop on non-finite losses", [](RunConfig& c) -> bool& { return c.train.check_finite; });
    text_key("ablation", "variant to train (full, w/o-L_ip, baseline, ...)", [](RunConfig& c) -> std::string& { return c.ablation; });
    text_key("dtype", "arithmetic precision", [](RunConfig& c) -> std::string& { return c.dtype; }, {"f32", "f64"});
    text_key("run_dir", "directory for checkpoints, metrics and reports", [](RunConfig& c) -> std::string& { return c.run_dir; });
    text_key("checkpoint", "checkpoint path (default <run_dir>/checkpoint.aimc)",
             [](RunConfig& c) -> std::string& { return c.checkpoint; });
    uint_key("checkpoint_every", "steps between checkpoints (0 = only at the end)",
             [](RunConfig& c) -> std::size_t& { return c.checkpoint_every; });

    // Evaluation
    uint_key("holdout_folds", "trailing folds held out of training", [](RunConfig& c) -> std::size_t& { return c.holdout_folds; });
    uint_key("pair_seed", "seed for regenerated pair lists", [](RunConfig& c) -> std::uint64_t& { return c.pair_seed; });
    text_key("similarity", "verification score", [](RunConfig& c) -> std::string& { return c.similarity; }, {"cosine", "l2"});
    return k;
  }();
  return keys;
}

inline const ConfigKey* find_config_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

/// Built-in defaults, with data_dir taken from AIM_DATA_DIR when set.
inline RunConfig default_run_config() {
  RunConfig c;
  if (const char* env = std::getenv("AIM_DATA_DIR"); env && *env) c.data_dir = env;
  return c;
}

/// Parses flat `key = value` text. Returns the values in file order.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text, const std::string& origin) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    std::string key = detail::trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '-', '_');
    const std::string value = detail::trim(line.substr(eq + 1));
    if (!find_config_key(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    out.emplace_back(key, value);
  }
  return out;
}

inline std::vector<std::pair<std::string, std::string>> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

/// Applies `values` over `cfg`, type-checking each one. Keys applied are
/// added to `explicit_keys` when given.
inline void apply_config(RunConfig& cfg, const std::vector<std::pair<std::string, std::string>>& values,
                         std::set<std::string>* explicit_keys = nullptr) {
  for (const auto& [key, value] : values) {
    const ConfigKey* k = find_config_key(key);
    if (!k) throw ConfigError("unknown key '" + key + "'");
    k->set(cfg, value);
    if (explicit_keys) explicit_keys->insert(key);
  }
}

/// defaults < file < flags.
inline RunConfig resolve_config(const std::vector<std::pair<std::string, std::string>>& file_values,
                                const std::vector<std::pair<std::string, std::string>>& flag_values,
                                std::set<std::string>* explicit_keys = nullptr) {
  RunConfig cfg = default_run_config();
  apply_config(cfg, file_values, explicit_keys);
  apply_config(cfg, flag_values, explicit_keys);
  cfg.render.image_size = cfg.model.image_size;
  return cfg;
}

/// The resolved configuration in config-file syntax.
inline std::string dump_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

}  // namespace aim
