#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>
#include <string>
#include <vector>
#include <unistd.h>

#include "commands.hpp"
#include "run_config.hpp"
#include "uprm/checkpoint.hpp"
#include "uprm/dataset_io.hpp"

namespace uprm::cli {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

class CliTest : public testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("uprm_cli_" + std::to_string(::getpid()) + "_" +
            testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  fs::path write_config(const std::string& name, const std::string& text) const {
    std::ofstream(path(name)) << text;
    return path(name);
  }

  // A small corpus and model that train in well under a second.
  fs::path small_config() const {
    return write_config("small.ini",
                        "[profile]\nvideo_count = 20\nframes_per_video = 16\n"
                        "[model]\nd = 32\nffn_hidden = 16\nrouter_hidden = 16\nhead_hidden = 16\n"
                        "[optim]\nepochs = 2\n");
  }

  int run(std::initializer_list<std::string> args) {
    std::vector<std::string> argv{"uprm"};
    argv.insert(argv.end(), args.begin(), args.end());
    std::vector<const char*> ptrs;
    for (const auto& a : argv) ptrs.push_back(a.c_str());
    out_.str("");
    err_.str("");
    return run_cli(static_cast<int>(ptrs.size()), ptrs.data(), out_, err_);
  }

  fs::path dir_;
  std::ostringstream out_;
  std::ostringstream err_;
};

TEST_F(CliTest, GenDataReportsModalityRates) {
  ASSERT_EQ(run({"gen-data", "--out", path("d").string(), "--seed", "5"}), 0) << err_.str();
  const std::string summary = slurp(path("d") / "summary.txt");
  EXPECT_NE(out_.str().find("pose rate"), std::string::npos);
  const auto pos = summary.find("pose rate");
  ASSERT_NE(pos, std::string::npos);
  const double pose = std::stod(summary.substr(summary.find_first_of("0123456789", pos)));
  EXPECT_NEAR(pose, 0.46, 0.03);
  EXPECT_TRUE(fs::exists(path("d") / kConfigEcho));
  EXPECT_EQ(read_dataset(path("d") / kDatasetFile).videos.size(), 200u);
}

TEST_F(CliTest, GenDataSeedRepeatIsByteIdentical) {
  ASSERT_EQ(run({"gen-data", "--out", path("a").string(), "--seed", "9"}), 0);
  ASSERT_EQ(run({"gen-data", "--out", path("b").string(), "--seed", "9"}), 0);
  ASSERT_EQ(run({"gen-data", "--out", path("c").string(), "--seed", "10"}), 0);
  EXPECT_EQ(slurp(path("a") / kDatasetFile), slurp(path("b") / kDatasetFile));
  EXPECT_NE(slurp(path("a") / kDatasetFile), slurp(path("c") / kDatasetFile));
}

TEST_F(CliTest, InvalidRateExitsTwoNamingTheField) {
  const auto cfg = write_config("bad.ini", "[profile]\nrelation_presence_rate = 1.5\n");
  EXPECT_EQ(run({"gen-data", "--config", cfg.string(), "--out", path("d").string()}), 2);
  EXPECT_NE(err_.str().find("relation_presence_rate"), std::string::npos) << err_.str();
  EXPECT_FALSE(fs::exists(path("d") / kDatasetFile));
}

TEST_F(CliTest, ConfigProblemsExitTwo) {
  EXPECT_EQ(run({"gen-data", "--config", write_config("u.ini", "[optim]\nmomentum = 1\n").string()}), 2);
  EXPECT_NE(err_.str().find("optim.momentum"), std::string::npos);
  EXPECT_EQ(run({"gen-data", "--config", write_config("s.ini", "[extra]\nx = 1\n").string()}), 2);
  EXPECT_EQ(run({"gen-data", "--config", write_config("n.ini", "[optim]\nlr = fast\n").string()}), 2);
  EXPECT_NE(err_.str().find("optim.lr"), std::string::npos);
  EXPECT_EQ(run({"gen-data", "--config", write_config("v.ini", "[model]\nvariant = no-xyz\n").string()}), 2);
  EXPECT_EQ(run({"gen-data", "--config", path("missing.ini").string()}), 2);
  EXPECT_EQ(run({"gen-data", "--profile", "imaginary"}), 2);
  EXPECT_EQ(run({"gen-data", "--seed", "minus-one"}), 2);
  EXPECT_EQ(run({"no-such-command"}), 2);
  EXPECT_EQ(run({"eval", "--out", path("e").string()}), 2);  // no --ckpt
}

TEST_F(CliTest, FlagsOverrideConfigOverrideDefaults) {
  const auto cfg = write_config("c.ini", "[optim]\nalpha = 0.3\nepochs = 4\n[eval]\nthreshold = 0.7\n");
  const RunConfig from_file = load_run_config(cfg, {});
  EXPECT_EQ(from_file.train.alpha, 0.3);
  EXPECT_EQ(from_file.train.epochs, 4u);
  EXPECT_EQ(from_file.threshold, 0.7);
  EXPECT_EQ(from_file.train.batch_size, 8u);

  Overrides ov;
  ov.alpha = 0.1;
  ov.seed = 42;
  ov.finetune_lr = true;
  const RunConfig flagged = load_run_config(cfg, ov);
  EXPECT_EQ(flagged.train.alpha, 0.1);
  EXPECT_EQ(flagged.threshold, 0.7);
  EXPECT_EQ(flagged.seed, 42u);
  EXPECT_EQ(flagged.profile.seed, 42u);
  EXPECT_EQ(flagged.train.seed, 42u);
  EXPECT_EQ(flagged.train.optim.lr, kFineTuneLearningRate);
}

TEST_F(CliTest, ProfileKeysRefineTheNamedProfile) {
  const auto cfg = write_config("p.ini", "[profile]\nname = ucfc-like\nnoise = 0.5\n");
  const RunConfig c = load_run_config(cfg, {});
  GenProfile expected = builtin_profile("ucfc-like");
  expected.noise = 0.5;
  expected.seed = c.seed;
  EXPECT_EQ(c.profile, expected);
  EXPECT_EQ(c.thresholds(c.profile.name), ucfc_thresholds());

  Overrides ov;
  ov.profile = "stressed";
  EXPECT_EQ(load_run_config(cfg, ov).profile.pose_presence_rate,
            builtin_profile("stressed").pose_presence_rate);
}

TEST_F(CliTest, EchoedConfigReadsBackToTheSameRun) {
  const auto cfg = write_config(
      "c.ini",
      "[profile]\nname = stressed\nnoise = 0.125\n[optim]\nalpha = 0.3\n[adapter]\nenabled = true\n"
      "[eval]\ntiou = 0.2, 0.4\n[ablate]\nseeds = 3 4\n[grad]\ncases = softmax\n");
  const RunConfig a = load_run_config(cfg, {});
  std::ostringstream first;
  write_run_config(first, a);
  const auto echo = write_config("echo.ini", first.str());
  std::ostringstream second;
  write_run_config(second, load_run_config(echo, {}));
  EXPECT_EQ(first.str(), second.str());
}

TEST_F(CliTest, TrainWritesCheckpointTraceAndIsDeterministic) {
  const auto cfg = small_config();
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", path("a").string()}), 0) << err_.str();
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", path("b").string()}), 0);
  EXPECT_EQ(slurp(path("a") / kCheckpointFile), slurp(path("b") / kCheckpointFile));
  EXPECT_EQ(slurp(path("a") / "loss_trace.txt"), slurp(path("b") / "loss_trace.txt"));

  // 16 training videos, batch 8, 2 epochs.
  std::istringstream trace(slurp(path("a") / "loss_trace.txt"));
  std::size_t lines = 0;
  for (std::string step, loss; trace >> step >> loss; ++lines) {
    EXPECT_EQ(std::stoul(step), lines);
    EXPECT_TRUE(std::isfinite(std::stod(loss)));
  }
  EXPECT_EQ(lines, 4u);
  EXPECT_NE(slurp(path("a") / kConfigEcho).find("alpha = 0.05"), std::string::npos);
}

TEST_F(CliTest, AlphaZeroFlagTrainsTheUnregularisedModel) {
  const auto cfg = small_config();
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", path("full").string()}), 0);
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--alpha", "0", "--out", path("ptr").string()}), 0);
  EXPECT_NE(slurp(path("full") / kCheckpointFile), slurp(path("ptr") / kCheckpointFile));
  EXPECT_NE(slurp(path("ptr") / kConfigEcho).find("alpha = 0\n"), std::string::npos);
}

TEST_F(CliTest, TrainUsesAGeneratedDatasetFile) {
  const auto cfg = small_config();
  ASSERT_EQ(run({"gen-data", "--config", cfg.string(), "--out", path("d").string()}), 0);
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--data", path("d").string(), "--out",
                 path("a").string()}),
            0);
  // Without --data the same corpus is generated in memory.
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", path("b").string()}), 0);
  EXPECT_EQ(slurp(path("a") / kCheckpointFile), slurp(path("b") / kCheckpointFile));
}

TEST_F(CliTest, DivergentTrainingExitsFour) {
  const auto cfg = write_config("lr.ini",
                                "[profile]\nvideo_count = 8\nframes_per_video = 16\n"
                                "[optim]\nlr = 1e300\nwarmup_ratio = 0\nepochs = 3\n");
  EXPECT_EQ(run({"train", "--config", cfg.string(), "--out", path("t").string()}), 4);
  EXPECT_NE(err_.str().find("step"), std::string::npos) << err_.str();
}

TEST_F(CliTest, EvalOfUntrainedCheckpointCompletesWithEveryCause) {
  const auto cfg = small_config();
  const RunConfig c = load_run_config(cfg, {});
  fs::create_directories(path("m"));
  save_checkpoint(path("m") / kCheckpointFile, init_model(c.model, 3), c.model, 3);
  ASSERT_EQ(run({"eval", "--config", cfg.string(), "--ckpt", path("m").string(), "--out",
                 path("e").string()}),
            0)
      << err_.str();
  const std::string report = slurp(path("e") / "report.txt");
  for (const char* key : {"FNR", "F2", "mAP@0.10", "mAP@0.30", "mAP@0.50", "ROUGE-L", "BLEU"}) {
    EXPECT_NE(report.find(key), std::string::npos) << key;
  }

  // Every cause present in the held-out ground truth gets a row.
  const auto videos = split_dataset(load_or_generate(c, c.seed).videos, c.train_fraction).heldout;
  std::set<std::size_t> causes;
  for (const auto& v : videos) {
    for (const auto& g : v.ground_truth) causes.insert(g.cause);
  }
  ASSERT_FALSE(causes.empty());
  const std::string json = slurp(path("e") / "report.json");
  for (std::size_t cause : causes) {
    EXPECT_NE(json.find("\"cause\": " + std::to_string(cause)), std::string::npos) << cause;
  }
}

TEST_F(CliTest, EvalReportsAreByteIdentical) {
  const auto cfg = small_config();
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", path("m").string()}), 0);
  for (const char* out : {"e1", "e2"}) {
    ASSERT_EQ(run({"eval", "--config", cfg.string(), "--ckpt", path("m").string(), "--out",
                   path(out).string()}),
              0);
  }
  EXPECT_EQ(slurp(path("e1") / "report.txt"), slurp(path("e2") / "report.txt"));
  EXPECT_EQ(slurp(path("e1") / "report.json"), slurp(path("e2") / "report.json"));
}

TEST_F(CliTest, DataProblemsExitThree) {
  const auto cfg = small_config();
  EXPECT_EQ(run({"eval", "--config", cfg.string(), "--ckpt", path("none.ckpt").string()}), 3);
  std::ofstream(path("junk.jsonl")) << "{\"format\": \"uprm-ds\", \"version\": 1\n";
  EXPECT_EQ(run({"train", "--config", cfg.string(), "--data", path("junk.jsonl").string(), "--out",
                 path("t").string()}),
            3);
  std::ofstream(path("foreign.ckpt")) << "{\"format\": \"other\"}\n";
  EXPECT_EQ(run({"eval", "--config", cfg.string(), "--ckpt", path("foreign.ckpt").string(), "--out",
                 path("e").string()}),
            3);
}

TEST_F(CliTest, WidthMismatchBetweenCheckpointAndDataExitsTwo) {
  const auto cfg = small_config();
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", path("m").string()}), 0);
  const auto narrow = write_config(
      "narrow.ini", "[profile]\nvideo_count = 10\nframes_per_video = 16\ntoken_dim = 16\n");
  EXPECT_EQ(run({"eval", "--config", narrow.string(), "--ckpt", path("m").string(), "--out",
                 path("e").string()}),
            2);
}

TEST_F(CliTest, AblateListsEveryVariantBesideTheFullModel) {
  const auto cfg = small_config();
  std::ostringstream log;
  RunConfig c = load_run_config(cfg, {});
  c.out = path("a");
  const auto rows = cmd_ablate(c, log);
  std::vector<std::string> names;
  for (const auto& r : rows) names.push_back(r.variant);
  EXPECT_EQ(names, (std::vector<std::string>{"full", "no-hpe", "no-ore", "no-vbe", "no-upe", "no-ptr"}));
  const std::string table = slurp(path("a") / "ablation.txt");
  for (const auto& n : names) EXPECT_NE(table.find(" " + n + " "), std::string::npos) << n;
  for (const auto& r : rows) {
    if (r.variant == "no-upe") {
      EXPECT_FALSE(r.routed);
    } else {
      double sum = 0;
      for (double s : r.utilization.shares) sum += s;
      EXPECT_NEAR(sum, 1.0, 1e-9) << r.variant;
    }
  }
}

TEST_F(CliTest, AblateOverSeedsAddsMeanRows) {
  const auto cfg = write_config("s.ini",
                                "[profile]\nvideo_count = 10\nframes_per_video = 16\n"
                                "[ablate]\nvariants = full, no-ptr\nseeds = 1, 2\n");
  ASSERT_EQ(run({"ablate", "--config", cfg.string(), "--out", path("a").string()}), 0) << err_.str();
  const std::string table = slurp(path("a") / "ablation.txt");
  EXPECT_NE(table.find("mean  full"), std::string::npos) << table;
  EXPECT_NE(table.find("mean  no-ptr"), std::string::npos) << table;
}

TEST_F(CliTest, UnknownAblationVariantExitsTwo) {
  const auto cfg = write_config("v.ini", "[ablate]\nvariants = full, no-router\n");
  EXPECT_EQ(run({"ablate", "--config", cfg.string(), "--out", path("a").string()}), 2);
  EXPECT_NE(err_.str().find("no-router"), std::string::npos);
}

TEST_F(CliTest, InspectRouterSharesSumToOne) {
  const auto cfg = small_config();
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", path("m").string()}), 0);
  RunConfig c = load_run_config(cfg, {});
  c.ckpt = path("m");
  c.out = path("r");
  std::ostringstream log;
  const RouterComparison rc = cmd_inspect_router(c, log);
  for (const auto* u : {&rc.full, &rc.ablated}) {
    double sum = 0;
    for (double s : u->shares) {
      EXPECT_GE(s, 0.0);
      sum += s;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
  const std::string table = slurp(path("r") / "router.txt");
  for (const char* col : {"pose", "relation", "background", "coarse", "full", "w/o PTR"}) {
    EXPECT_NE(table.find(col), std::string::npos) << col;
  }

  // An explicit baseline checkpoint replaces the retrained one.
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--alpha", "0", "--out", path("b").string()}), 0);
  c.baseline_ckpt = path("b");
  const RouterComparison given = cmd_inspect_router(c, log);
  EXPECT_EQ(given.ablated.shares, rc.ablated.shares);
}

TEST_F(CliTest, GradCheckPassesAndListsEveryCase) {
  const auto cfg = write_config("g.ini", "[grad]\nseeds = 3\n");
  ASSERT_EQ(run({"grad-check", "--config", cfg.string(), "--out", path("g").string()}), 0) << out_.str();
  const std::string report = slurp(path("g") / "grad_check.txt");
  for (const auto& c : grad_cases()) {
    EXPECT_NE(report.find(c.name + " "), std::string::npos) << c.name;
  }
  EXPECT_EQ(report.find("FAIL"), std::string::npos);
  EXPECT_NE(report.find("max-rel-err"), std::string::npos);
}

TEST_F(CliTest, InjectedFaultIsReportedWithItsOp) {
  const auto cfg = write_config("g.ini", "[grad]\nseeds = 2\ncases = ffn, layer_norm\n");
  EXPECT_EQ(run({"grad-check", "--config", cfg.string(), "--inject-fault", "relu", "--out",
                 path("g").string()}),
            4);
  const std::string report = slurp(path("g") / "grad_check.txt");
  EXPECT_NE(report.find("FAIL  ffn"), std::string::npos) << report;
  EXPECT_NE(report.find("'relu'"), std::string::npos) << report;
  EXPECT_EQ(report.find("FAIL  layer_norm"), std::string::npos) << report;
}

TEST_F(CliTest, BadThreadEnvironmentExitsTwo) {
  ::setenv("UPRM_THREADS", "zero", 1);
  const int code = run({"gen-data", "--out", path("d").string()});
  ::unsetenv("UPRM_THREADS");
  EXPECT_EQ(code, 2);
}

}  // namespace
}  // namespace uprm::cli
