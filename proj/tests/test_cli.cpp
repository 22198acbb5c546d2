#include <gtest/gtest.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "aim/cli.hpp"

using namespace aim;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("aim_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::vector<std::string> kTinyModel{"--image-size", "16",         "--encoder-widths", "4,8,8", "--decoder-widths",
                                          "8,4,4",        "--patch-widths", "4,8",          "--feature-dim", "16",
                                          "--mlp-hidden", "16"};

std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail) {
  head.insert(head.end(), tail.begin(), tail.end());
  return head;
}

// A 20-subject, 16-pixel dataset shared by the tests below.
const fs::path& shared_data() {
  static const fs::path dir = [] {
    auto d = scratch("data");
    fs::remove_all(d);
    const auto r = run({"make-data", "--data-dir", d.string(), "--subjects", "20", "--per-subject", "4", "--image-size", "16",
                        "--seed", "3"});
    if (r.code != 0) throw std::runtime_error("make-data failed: " + r.err);
    return d;
  }();
  return dir;
}

// A checkpoint trained for a few steps on the shared data.
const fs::path& trained_run() {
  static const fs::path dir = [] {
    auto d = scratch("run");
    const auto r = run(with({"train", "--data-dir", shared_data().string(), "--run-dir", d.string(), "--steps", "3",
                             "--batch-size", "8", "--seed", "1", "--checkpoint-every", "2"},
                            kTinyModel));
    if (r.code != 0) throw std::runtime_error("train failed: " + r.err);
    return d;
  }();
  return dir;
}

double reported_auc(const std::string& out) {
  std::smatch m;
  if (!std::regex_search(out, m, std::regex(R"(AUC\s+([0-9.]+))"))) return -1;
  return std::stod(m[1]);
}

}  // namespace

TEST(Config, FlagOverridesFileOverridesDefault) {
  const auto file = parse_config_text("batch_size = 16\nadam-alpha = 0.001  # comment\n\n# full line\n", "test.cfg");
  std::set<std::string> keys;
  const auto cfg = resolve_config(file, {{"batch_size", "4"}}, &keys);
  EXPECT_EQ(cfg.train.batch_size, 4u);
  EXPECT_EQ(cfg.train.adam_alpha, 0.001);
  EXPECT_EQ(cfg.train.epochs, 60u);
  EXPECT_TRUE(keys.count("adam_alpha"));
  EXPECT_FALSE(keys.count("epochs"));
}

TEST(Config, UnknownKeyNamesFileAndLine) {
  try {
    parse_config_text("seed = 1\nlearning_rate = 3\n", "run.cfg");
    FAIL() << "no error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos) << e.what();
  }
}

TEST(Config, ValuesAreTypeChecked) {
  EXPECT_THROW(resolve_config({}, {{"batch_size", "eight"}}), ConfigError);
  EXPECT_THROW(resolve_config({}, {{"batch_size", "-1"}}), ConfigError);
  EXPECT_THROW(resolve_config({}, {{"attention", "maybe"}}), ConfigError);
  EXPECT_THROW(resolve_config({}, {{"dtype", "f16"}}), ConfigError);
  EXPECT_THROW(resolve_config({}, {{"encoder_widths", "4,x"}}), ConfigError);
  EXPECT_EQ(resolve_config({}, {{"encoder_widths", "4,8"}}).model.encoder_widths, (std::vector<std::size_t>{4, 8}));
}

TEST(Config, DumpParsesBackToSameConfig) {
  auto cfg = resolve_config({}, {{"lambda4", "2.5"}, {"ablation", "w/o L_ae"}, {"similarity", "l2"}});
  const auto again = resolve_config(parse_config_text(dump_config(cfg), "dump"), {});
  EXPECT_EQ(dump_config(again), dump_config(cfg));
}

TEST(Cli, ConfigFileOnCommandLine) {
  const auto dir = scratch("cfgfile");
  std::ofstream(dir / "c.cfg") << "subjects = 1\n";
  EXPECT_EQ(run({"make-data", "--config", (dir / "c.cfg").string(), "--data-dir", (dir / "d").string()}).code, kExitUsage);
  EXPECT_EQ(run({"make-data", "--config", (dir / "missing.cfg").string()}).code, kExitIo);
}

TEST(Cli, MakeDataWritesDatasetAndRefusesOverwrite) {
  const auto& d = shared_data();
  EXPECT_TRUE(fs::exists(d / "manifest.csv"));
  EXPECT_TRUE(fs::exists(d / "pairs" / "fold_9.csv"));
  const auto before = slurp(d / "manifest.csv");
  const auto refused = run({"make-data", "--data-dir", d.string(), "--subjects", "20", "--per-subject", "4", "--image-size",
                            "16", "--seed", "3"});
  EXPECT_EQ(refused.code, kExitUsage);
  EXPECT_NE(refused.err.find("--force"), std::string::npos);
  const auto forced = run({"make-data", "--data-dir", d.string(), "--subjects", "20", "--per-subject", "4", "--image-size",
                           "16", "--seed", "3", "--force"});
  EXPECT_EQ(forced.code, kExitOk);
  EXPECT_EQ(slurp(d / "manifest.csv"), before);
}

TEST(Cli, MakeDataRejectsSingleSubject) {
  const auto d = scratch("one");
  EXPECT_EQ(run({"make-data", "--data-dir", (d / "x").string(), "--subjects", "1"}).code, kExitUsage);
}

TEST(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"fly"}).code, kExitUsage);
  EXPECT_EQ(run({"train", "--no-such-flag", "1"}).code, kExitUsage);
  EXPECT_EQ(run({"train", "--batch-size", "many"}).code, kExitUsage);
  const auto empty = scratch("nodata");
  EXPECT_EQ(run({"train", "--data-dir", (empty / "absent").string()}).code, kExitUsage);
  EXPECT_EQ(run({"train", "--data-dir", shared_data().string(), "--run-dir", (empty / "r").string(), "--ablation", "w/o magic"}).code,
            kExitUsage);
  EXPECT_EQ(run({"--help"}).code, kExitOk);
}

TEST(Cli, TrainWritesCheckpointMetricsAndConfig) {
  const auto& d = trained_run();
  EXPECT_TRUE(fs::exists(d / "checkpoint.aimc"));
  EXPECT_TRUE(fs::exists(d / "config.txt"));
  std::ifstream metrics(d / "metrics.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(metrics, line)) ++rows;
  EXPECT_EQ(rows, 4u);  // header plus three steps
  const auto b = load_checkpoint(d / "checkpoint.aimc");
  EXPECT_EQ(b.scalar("meta/step"), 3.0);
}

TEST(Cli, TrainIsDeterministicAndResumable) {
  const auto a = scratch("det_a"), b = scratch("det_b");
  auto args = [&](const fs::path& dir, const std::string& steps) {
    return with({"train", "--data-dir", shared_data().string(), "--run-dir", dir.string(), "--steps", steps, "--batch-size", "8",
                 "--seed", "4"},
                kTinyModel);
  };
  ASSERT_EQ(run(args(a, "4")).code, kExitOk);
  ASSERT_EQ(run(args(b, "2")).code, kExitOk);
  auto resumed = args(b, "4");
  resumed.push_back("--resume");
  ASSERT_EQ(run(resumed).code, kExitOk);
  EXPECT_EQ(slurp(a / "checkpoint.aimc"), slurp(b / "checkpoint.aimc"));
}

TEST(Cli, ImageSizeMismatchIsConfigError) {
  const auto r = run({"eval", "--data-dir", shared_data().string(), "--run-dir", trained_run().string(), "--image-size", "32"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("image"), std::string::npos);
}

TEST(Cli, EvalWritesReportWithFoldStatistics) {
  const auto r = run({"eval", "--data-dir", shared_data().string(), "--run-dir", trained_run().string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("±"), std::string::npos);
  EXPECT_TRUE(fs::exists(trained_run() / "eval_report.csv"));
  EXPECT_TRUE(fs::exists(trained_run() / "eval_roc.csv"));
  const double auc = reported_auc(r.out);
  EXPECT_GE(auc, 0.0);
  EXPECT_LE(auc, 1.0);
}

TEST(Cli, EvalWithoutCheckpointIsUsageError) {
  const auto d = scratch("nockpt");
  EXPECT_EQ(run({"eval", "--data-dir", shared_data().string(), "--run-dir", d.string()}).code, kExitUsage);
}

TEST(Cli, SynthesizeGridAndAgeSweep) {
  const auto out = scratch("synth");
  const auto r = run({"synthesize", "--data-dir", shared_data().string(), "--run-dir", trained_run().string(), "--sample-a", "0",
                      "--sample-b", "5", "--grid", "5x7", "--age-sweep", "--export-attention", "--ppm", "--out", out.string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto cells = read_tensor<float>(out / "grid_cells.aimt");
  EXPECT_EQ(cells.dim(0), 35u);
  EXPECT_EQ(read_tensor<float>(out / "age_sweep_cells.aimt").dim(0), 13u);
  EXPECT_EQ(read_tensor<float>(out / "grid_attention_cells.aimt").dim(0), 35u);
  EXPECT_TRUE(fs::exists(out / "grid.ppm"));
  EXPECT_TRUE(fs::exists(out / "age_sweep_attention.aimt"));
}

TEST(Cli, SynthesizeBadSampleIdIsUsageError) {
  const auto out = scratch("synth_bad");
  EXPECT_EQ(run({"synthesize", "--data-dir", shared_data().string(), "--run-dir", trained_run().string(), "--sample-a", "99999",
                 "--sample-b", "1", "--out", out.string()})
                .code,
            kExitUsage);
  EXPECT_EQ(run({"synthesize", "--data-dir", shared_data().string(), "--run-dir", trained_run().string(), "--sample-a", "0",
                 "--sample-b", "1", "--grid", "1x7", "--out", out.string()})
                .code,
            kExitUsage);
}

TEST(Cli, GradcheckPassesAndDetectsCorruption) {
  const auto ok = run({"gradcheck"});
  EXPECT_EQ(ok.code, kExitOk) << ok.out;
  for (const char* loss : {"L_cad", "L_cer", "L_adv1", "L_ip", "L_adv2", "L_ae", "L_mc", "L_tv", "L_att"}) {
    EXPECT_NE(ok.out.find(loss), std::string::npos) << loss;
  }
  const auto bad = run({"gradcheck", "--corrupt", "L_tv"});
  EXPECT_EQ(bad.code, kExitNumeric);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
  EXPECT_EQ(run({"gradcheck", "--dtype", "f32"}).code, kExitUsage);
}

TEST(Cli, ExitCodeMapping) {
  EXPECT_EQ(exit_code_for(NumericError("x")), kExitNumeric);
  EXPECT_EQ(exit_code_for(IoError("x")), kExitIo);
  EXPECT_EQ(exit_code_for(FormatError("x", 0)), kExitIo);
  EXPECT_EQ(exit_code_for(ConfigError("x")), kExitUsage);
  EXPECT_EQ(exit_code_for(UsageError("x")), kExitUsage);
}

// Random encoders over 10 seeds.
TEST(Cli, UntrainedModelScoresNearChance) {
  double total = 0;
  for (int seed = 0; seed < 10; ++seed) {
    const auto d = scratch("untrained");
    const auto r = run(with({"eval", "--untrained", "--data-dir", shared_data().string(), "--run-dir", d.string(), "--seed",
                             std::to_string(seed)},
                            kTinyModel));
    ASSERT_EQ(r.code, kExitOk) << r.err;
    total += reported_auc(r.out);
  }
  const double mean = total / 10;
  EXPECT_GE(mean, 0.4);
  EXPECT_LE(mean, 0.6);
}
