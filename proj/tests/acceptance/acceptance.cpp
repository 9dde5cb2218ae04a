// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero if any selected criterion fails. Arguments select criteria by
// number; none runs all of them.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "commands.hpp"
#include "metric_oracles.hpp"
#include "run_config.hpp"
#include "uprm/datagen.hpp"
#include "uprm/grad_suite.hpp"
#include "uprm/metrics.hpp"
#include "uprm/router.hpp"

namespace {

using namespace uprm;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Outcome gradient_suite() {
  const std::vector<std::string> expected{"softmax",       "layer_norm",
                                          "attention",     "ffn",
                                          "pose_graph_attention", "graph_transformer_layer",
                                          "gated_combine", "tradeoff_loss",
                                          "task_loss",     "lora_apply",
                                          "full_model"};
  GradCheckOptions options;  // central differences, step 1e-5, rel_tol 1e-4
  const auto t0 = Clock::now();
  const auto rows = run_grad_suite(100, options);
  const double elapsed = seconds_since(t0);

  bool pass = elapsed <= 120.0;
  double worst_rel = 0.0, worst_abs = 0.0;
  std::string failures;
  std::set<std::string> seen;
  for (const auto& r : rows) {
    seen.insert(r.name);
    worst_rel = std::max(worst_rel, r.max_rel_error);
    worst_abs = std::max(worst_abs, r.max_abs_error);
    if (!r.passed() || r.seeds < 100) {
      pass = false;
      failures += " " + r.name + " " + std::to_string(r.passed_seeds) + "/" + std::to_string(r.seeds);
    }
  }
  for (const auto& name : expected) {
    if (!seen.count(name)) {
      pass = false;
      failures += " missing " + name;
    }
  }
  std::ostringstream d;
  d << rows.size() << " cases x 100 seeds, worst rel " << fmt("%.2e", worst_rel) << " abs "
    << fmt("%.2e", worst_abs) << ", " << fmt("%.1f", elapsed) << " s (limit 120 s)" << failures;
  return {pass, d.str()};
}

Outcome tradeoff_closed_forms() {
  double worst_zero = 0.0, worst_unit = 0.0;
  const double ln4sq = std::log(4.0) * std::log(4.0);
  for (std::size_t t : {1u, 3u, 17u}) {
    const Tensor2 fine(t, kFineExpertCount, 0.0);
    const std::vector<double> coarse(t, 0.0);
    worst_zero = std::max(worst_zero, std::abs(tradeoff_loss(fine, coarse) - ln4sq));
  }
  // Logits whose exponentials sum to one: logs of random points on the
  // 4-simplex, plus the uniform point.
  std::mt19937_64 rng(2);
  std::gamma_distribution<double> g(1.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t t = 1 + trial % 9;
    Tensor2 fine(t, kFineExpertCount);
    std::vector<double> coarse(t);
    for (std::size_t r = 0; r < t; ++r) {
      double p[4], sum = 0;
      for (double& x : p) sum += (x = trial == 0 ? 1.0 : g(rng));
      for (std::size_t j = 0; j < 3; ++j) fine(r, j) = std::log(p[j] / sum);
      coarse[r] = std::log(p[3] / sum);
    }
    worst_unit = std::max(worst_unit, std::abs(tradeoff_loss(fine, coarse)));
  }
  const bool pass = worst_zero <= 1e-12 && worst_unit <= 1e-12;
  return {pass, "zero logits |L_z - (ln 4)^2| " + fmt("%.1e", worst_zero) + ", unit-sum logits |L_z| " +
                    fmt("%.1e", worst_unit) + " (tol 1e-12)"};
}

Outcome gated_reduction() {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto random = [&](std::size_t r, std::size_t c) {
    Tensor2 t(r, c);
    for (double& v : t.values()) v = nd(rng);
    return t;
  };
  bool exact = true;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + trial % 7, d = 1 + trial % 5;
    std::vector<Tensor2> fine{random(n, d), random(n, d), random(n, d)};
    const Tensor2 coarse = random(n, d);
    Tensor2 w(n, kFineExpertCount, 0.0);
    std::vector<std::size_t> pick(n);
    for (std::size_t r = 0; r < n; ++r) w(r, pick[r] = rng() % kFineExpertCount) = 1.0;
    const Tensor2 z = gated_combine(w, fine, coarse);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < d; ++c) exact = exact && z(r, c) == fine[pick[r]](r, c);
    }
  }
  // Uniform weights: with zero fine outputs and a unit coarse output the
  // fused value is the coarse coefficient itself.
  double worst = 0.0;
  for (std::size_t n : {1u, 4u, 9u}) {
    const Tensor2 w(n, kFineExpertCount, 1.0 / 3.0);
    std::vector<Tensor2> fine(3, Tensor2(n, 2, 0.0));
    const Tensor2 z = gated_combine(w, fine, Tensor2(n, 2, 1.0));
    for (double v : z.values()) worst = std::max(worst, std::abs(v - 2.0 / 3.0));
  }
  return {exact && worst <= 1e-12, std::string("one-hot fused == selected expert bit-for-bit: ") +
                                       (exact ? "yes" : "no") + ", uniform |coef - 2/3| " +
                                       fmt("%.1e", worst) + " (tol 1e-12)"};
}

Outcome metric_oracles() {
  using namespace uprm::oracle;
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> video_count(1, 5);
  std::bernoulli_distribution flip(0.2);
  double worst = 0.0;
  const std::vector<double> th{0.1, 0.3, 0.5};
  const int instances = 300;
  for (int i = 0; i < instances; ++i) {
    const std::size_t k = video_count(rng), n = 24;
    std::vector<SyntheticVideo> videos;
    std::vector<VideoPrediction> preds;
    for (std::size_t v = 0; v < k; ++v) {
      videos.push_back(labelled_video(v, n, random_intervals(rng, n, 4)));
      VideoPrediction p{v, std::vector<std::uint8_t>(n), random_predictions(rng, n, videos.back().ground_truth, 4)};
      for (std::size_t f = 0; f < n; ++f) p.frame_labels[f] = videos.back().per_frame_labels[f] ^ flip(rng);
      preds.push_back(std::move(p));
    }
    const MetricReport fast = evaluate(preds, videos, th);
    const SlowReport slow = slow_evaluate(preds, videos, th);
    for (auto [a, b] : {std::pair{fast.fnr, slow.fnr}, {fast.f2, slow.f2}, {fast.rouge_l, slow.rouge},
                        {fast.bleu, slow.bleu}}) {
      worst = std::max(worst, std::abs(a - b));
    }
    for (std::size_t j = 0; j < th.size(); ++j) worst = std::max(worst, std::abs(fast.map.ap[j] - slow.ap[j]));
  }
  const std::vector<std::vector<SegmentPrediction>> p{{{10, 20, 0.9, 0}}};
  const std::vector<std::vector<GroundTruthSegment>> t{{{15, 25, 0}}};
  const ApReport ap = map_at_tiou(p, t, th);
  const bool example = ap.ap == std::vector<double>{1.0, 1.0, 0.0};
  return {worst <= 1e-9 && example,
          std::to_string(instances) + " random instances (<=5 videos, <=4 segments), max |fast - brute| " +
              fmt("%.1e", worst) + " (tol 1e-9); [10,20] vs [15,25] AP@{0.1,0.3,0.5} = " +
              fmt("%.1f", ap.ap[0]) + "/" + fmt("%.1f", ap.ap[1]) + "/" + fmt("%.1f", ap.ap[2])};
}

cli::RunConfig base_config(const std::string& profile) {
  cli::Overrides ov;
  ov.profile = profile;
  cli::RunConfig c = cli::load_run_config(std::nullopt, ov);
  c.profile.video_count = 250;  // 200 train / 50 held out
  return c;
}

Outcome learnability() {
  cli::RunConfig c = base_config("cuva-like");
  c.train.epochs = 5;
  const std::uint64_t seed = 1;
  const auto t0 = Clock::now();
  const Dataset data = cli::load_or_generate(c, seed);
  const auto split = cli::split_dataset(data.videos, c.train_fraction);
  const auto r = cli::train_and_evaluate(c, "full", seed, split.train, split.heldout, c.thresholds("cuva-like"));
  const double elapsed = seconds_since(t0);
  const bool pass = r.report.f2 >= 0.9 && r.report.map.mean >= 0.8 && elapsed <= 600.0 &&
                    split.train.size() == 200 && split.heldout.size() == 50;
  return {pass, "cuva-like seed 1, 200/50 videos, 5 epochs: F2 " + fmt("%.4f", r.report.f2) +
                    " (>= 0.9), mean mAP " + fmt("%.4f", r.report.map.mean) + " (>= 0.8), " +
                    fmt("%.0f", elapsed) + " s (limit 600 s)"};
}

Outcome ablation_direction() {
  cli::RunConfig c = base_config("stressed");
  c.train.epochs = 15;
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  double f2_full = 0, f2_ptr = 0, f2_upe = 0, h_full = 0, h_ptr = 0;
  std::string per_seed;
  for (std::uint64_t seed : seeds) {
    const Dataset data = cli::load_or_generate(c, seed);
    const auto split = cli::split_dataset(data.videos, c.train_fraction);
    const auto th = c.thresholds("stressed");
    const auto full = cli::train_and_evaluate(c, "full", seed, split.train, split.heldout, th);
    const auto ptr = cli::train_and_evaluate(c, "no-ptr", seed, split.train, split.heldout, th);
    const auto upe = cli::train_and_evaluate(c, "no-upe", seed, split.train, split.heldout, th);
    f2_full += full.report.f2 / 5, f2_ptr += ptr.report.f2 / 5, f2_upe += upe.report.f2 / 5;
    h_full += full.utilization.fine_entropy() / 5, h_ptr += ptr.utilization.fine_entropy() / 5;
    per_seed += " | s" + std::to_string(seed) + " " + fmt("%.3f", full.report.f2) + "/" +
                fmt("%.3f", ptr.report.f2) + "/" + fmt("%.3f", upe.report.f2);
  }
  const bool pass = f2_full > f2_ptr && f2_full > f2_upe && h_full > h_ptr;
  return {pass, "stressed, 5 seeds, 15 epochs: mean F2 full " + fmt("%.4f", f2_full) + " vs w/o PTR " +
                    fmt("%.4f", f2_ptr) + " vs w/o UPE " + fmt("%.4f", f2_upe) +
                    "; fine entropy full " + fmt("%.4f", h_full) + " vs alpha=0 " + fmt("%.4f", h_ptr) +
                    "; per seed F2 full/ptr/upe" + per_seed};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / ("uprm_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  std::ofstream(root / "run.ini") << "[profile]\nvideo_count = 250\n[optim]\nepochs = 1\n";

  auto pipeline = [&](const std::string& tag, const char* threads) {
    ::setenv("UPRM_THREADS", threads, 1);
    const fs::path d = root / tag;
    const std::string cfg = (root / "run.ini").string();
    std::ostringstream out, err;
    auto call = [&](std::vector<std::string> args) {
      args.insert(args.begin(), "uprm");
      std::vector<const char*> argv;
      for (const auto& a : args) argv.push_back(a.c_str());
      return cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    };
    int rc = call({"gen-data", "--config", cfg, "--seed", "7", "--out", (d / "data").string()});
    rc |= call({"train", "--config", cfg, "--seed", "7", "--data", (d / "data").string(), "--out",
                (d / "model").string()});
    rc |= call({"eval", "--config", cfg, "--seed", "7", "--data", (d / "data").string(), "--ckpt",
                (d / "model").string(), "--out", (d / "eval").string()});
    ::unsetenv("UPRM_THREADS");
    return rc;
  };
  const int rc = pipeline("a", "1") | pipeline("b", "4");
  const std::vector<fs::path> files{"data/dataset.jsonl", "model/model.ckpt", "model/loss_trace.txt",
                                    "eval/report.txt", "eval/report.json"};
  std::size_t identical = 0;
  std::string differing;
  for (const auto& f : files) {
    const std::string a = slurp(root / "a" / f), b = slurp(root / "b" / f);
    if (!a.empty() && a == b) {
      ++identical;
    } else {
      differing += " " + f.string();
    }
  }
  fs::remove_all(root);
  const bool pass = rc == 0 && identical == files.size();
  return {pass, "gen-data/train/eval run twice (UPRM_THREADS 1 and 4): " + std::to_string(identical) +
                    "/" + std::to_string(files.size()) + " outputs byte-identical" +
                    (rc ? ", a command failed" : "") + differing};
}

Outcome dataset_contract() {
  struct Target {
    const char* name;
    double pose, background, relation;
  };
  bool pass = true;
  std::string detail;
  for (const Target& t : {Target{"cuva-like", 0.46, 0.22, 0.32}, Target{"ucfc-like", 0.41, 0.31, 0.28}}) {
    GenProfile p = builtin_profile(t.name);
    p.video_count = 1000;
    p.seed = 1;
    const ModalityRates r = modality_rates(generate_dataset(p));
    pass = pass && std::abs(r.pose - t.pose) <= 0.02 && std::abs(r.background - t.background) <= 0.02 &&
           std::abs(r.relation - t.relation) <= 0.02;
    detail += std::string(detail.empty() ? "" : "; ") + t.name + " pose " + fmt("%.3f", r.pose) +
              " background " + fmt("%.3f", r.background) + " relation " + fmt("%.3f", r.relation);
  }
  return {pass, "1000 videos, tol 0.02: " + detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"trade-off loss closed forms", tradeoff_closed_forms},
      {"gated combine reductions", gated_reduction},
      {"metric oracle equivalence", metric_oracles},
      {"end-to-end learnability", learnability},
      {"ablation directionality", ablation_direction},
      {"determinism", determinism},
      {"dataset contract", dataset_contract},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) {
    const long k = std::strtol(argv[i], nullptr, 10);
    if (k < 1 || k > static_cast<long>(criteria.size())) {
      std::fprintf(stderr, "usage: %s [criterion 1..%zu ...]\n", argv[0], criteria.size());
      return 2;
    }
    selected.insert(static_cast<std::size_t>(k));
  }

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("[%s] %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
