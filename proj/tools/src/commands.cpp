#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "uprm/checkpoint.hpp"
#include "uprm/errors.hpp"
#include "uprm/train.hpp"

namespace uprm::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string fixed(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

std::string pct(double v) { return fixed(100.0 * v, 2); }

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s + " " : s + std::string(width - s.size(), ' ');
}

fs::path output_dir(const RunConfig& config) {
  const fs::path dir = config.out.empty() ? fs::path("uprm_run") : config.out;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw DataError("cannot write " + path.string());
}

void echo_config(const fs::path& dir, const RunConfig& config) {
  std::ostringstream os;
  write_run_config(os, config);
  write_file(dir / kConfigEcho, os.str());
}

fs::path resolve(const fs::path& p, const char* default_name) {
  return fs::is_directory(p) ? p / default_name : p;
}

Checkpoint load_model(const RunConfig& config) {
  if (config.ckpt.empty()) throw ConfigError("--ckpt is required for this command");
  return load_checkpoint(resolve(config.ckpt, kCheckpointFile));
}

ModelParams train_model(const RunConfig& config, const ModelConfig& model, std::uint64_t seed,
                        double alpha, const std::vector<SyntheticVideo>& videos,
                        std::vector<TrainStep>* trace = nullptr) {
  TrainConfig tc = config.train;
  tc.seed = seed;
  tc.alpha = alpha;
  TrainResult r = train(init_model(model, seed), videos, model, tc);
  if (trace) *trace = std::move(r.trace);
  return std::move(r.params);
}

void check_vocabulary(const ModelConfig& model, const GenProfile& profile) {
  if (model.cause_count < profile.cause_vocab_size) {
    throw ConfigError("model.cause_count " + std::to_string(model.cause_count) +
                      " cannot cover the dataset's " + std::to_string(profile.cause_vocab_size) +
                      " causes");
  }
}

json ap_json(const ApReport& ap) {
  return {{"thresholds", ap.thresholds}, {"ap", ap.ap}, {"mean", ap.mean}};
}

json report_json(const MetricReport& r) {
  json cats = json::array();
  for (const auto& [cause, c] : r.per_category) {
    cats.push_back({{"cause", cause},
                    {"videos", c.videos},
                    {"fnr", c.fnr},
                    {"f2", c.f2},
                    {"map", ap_json(c.map)},
                    {"rouge_l", c.rouge_l},
                    {"bleu", c.bleu}});
  }
  return {{"counts", {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"fn", r.counts.fn}, {"tn", r.counts.tn}}},
          {"fnr", r.fnr},
          {"f2", r.f2},
          {"precision", r.counts.precision()},
          {"recall", r.counts.recall()},
          {"video_fnr", r.video_fnr},
          {"map", ap_json(r.map)},
          {"rouge_l", r.rouge_l},
          {"bleu", r.bleu},
          {"per_category", cats}};
}

std::string report_text(const MetricReport& r, std::size_t videos, double threshold) {
  std::ostringstream os;
  os << "videos      " << videos << '\n';
  os << "threshold   " << fixed(threshold, 3) << '\n';
  os << "FNR         " << pct(r.fnr) << '\n';
  os << "F2          " << pct(r.f2) << '\n';
  os << "precision   " << pct(r.counts.precision()) << '\n';
  os << "recall      " << pct(r.counts.recall()) << '\n';
  os << "video FNR   " << pct(r.video_fnr) << '\n';
  for (std::size_t i = 0; i < r.map.thresholds.size(); ++i) {
    os << pad("mAP@" + fixed(r.map.thresholds[i], 2), 12) << pct(r.map.ap[i]) << '\n';
  }
  os << "mAP mean    " << pct(r.map.mean) << '\n';
  os << "ROUGE-L     " << pct(r.rouge_l) << '\n';
  os << "BLEU        " << pct(r.bleu) << '\n';
  os << "\nper category (values x100)\n";
  os << "cause  videos  FNR     F2      mAP     ROUGE-L BLEU\n";
  for (const auto& [cause, c] : r.per_category) {
    os << pad(std::to_string(cause), 7) << pad(std::to_string(c.videos), 8) << pad(pct(c.fnr), 8)
       << pad(pct(c.f2), 8) << pad(pct(c.map.mean), 8) << pad(pct(c.rouge_l), 8) << pct(c.bleu)
       << '\n';
  }
  return os.str();
}

std::string utilization_row(const std::string& label, const ExpertUtilization& u) {
  double sum = 0.0;
  for (double s : u.shares) sum += s;
  std::string row = pad(label, 10);
  for (double s : u.shares) row += pad(fixed(s, 4), 12);
  return row + pad(fixed(sum, 4), 8) + fixed(u.fine_entropy(), 4);
}

json utilization_json(const ExpertUtilization& u) {
  return {{"pose", u.shares[0]},
          {"relation", u.shares[1]},
          {"background", u.shares[2]},
          {"coarse", u.shares[3]},
          {"fine_entropy", u.fine_entropy()}};
}

}  // namespace

Dataset load_or_generate(const RunConfig& config, std::uint64_t seed) {
  if (!config.data.empty()) return read_dataset(resolve(config.data, kDatasetFile));
  GenProfile p = config.profile;
  p.seed = seed;
  Dataset d;
  d.videos = generate_dataset(p);
  d.profile = std::move(p);
  return d;
}

SplitVideos split_dataset(const std::vector<SyntheticVideo>& videos, double train_fraction) {
  const auto n = videos.size();
  auto cut = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  cut = std::min(n, std::max<std::size_t>(cut, n > 0 ? 1 : 0));
  SplitVideos s;
  s.train.assign(videos.begin(), videos.begin() + static_cast<std::ptrdiff_t>(cut));
  s.heldout.assign(videos.begin() + static_cast<std::ptrdiff_t>(cut), videos.end());
  return s;
}

std::vector<SyntheticVideo> eval_videos(const RunConfig& config, const SplitVideos& split) {
  std::vector<SyntheticVideo> out;
  switch (config.eval_split) {
    case Split::heldout:
      out = split.heldout;
      break;
    case Split::train:
      out = split.train;
      break;
    case Split::all:
      out = split.train;
      out.insert(out.end(), split.heldout.begin(), split.heldout.end());
      break;
  }
  if (out.empty()) throw DataError("the selected evaluation split holds no videos");
  return out;
}

VariantResult train_and_evaluate(const RunConfig& config, const std::string& variant,
                                 std::uint64_t seed, const std::vector<SyntheticVideo>& train,
                                 const std::vector<SyntheticVideo>& test,
                                 const std::vector<double>& thresholds) {
  ModelConfig model = config.model;
  double alpha = config.train.alpha;
  if (variant == "no-ptr") {
    model.variant = Variant::full;
    alpha = 0.0;
  } else {
    model.variant = parse_variant(variant);
  }
  const ModelParams params = train_model(config, model, seed, alpha, train);
  const PredictionRun run = predict(params, test, model, config.threshold);
  VariantResult r;
  r.variant = variant;
  r.seed = seed;
  r.report = evaluate(run.predictions, test, thresholds);
  r.routed = model.variant != Variant::no_upe;
  if (r.routed) r.utilization = expert_utilization(run.routes);
  return r;
}

ModalityRates cmd_gen_data(const RunConfig& config, std::ostream& log) {
  const fs::path dir = output_dir(config);
  const auto videos = generate_dataset(config.profile);
  write_dataset(dir / kDatasetFile, config.profile, videos);
  echo_config(dir, config);

  const ModalityRates r = modality_rates(videos);
  std::ostringstream os;
  os << "profile            " << config.profile.name << '\n';
  os << "videos             " << videos.size() << '\n';
  os << "frames per video   " << config.profile.frames_per_video << '\n';
  os << "pose rate          " << fixed(r.pose, 4) << '\n';
  os << "background rate    " << fixed(r.background, 4) << '\n';
  os << "relation rate      " << fixed(r.relation, 4) << '\n';
  os << "coarse rate        " << fixed(1.0, 4) << '\n';
  os << "threat videos      " << fixed(r.threat_videos, 4) << '\n';
  os << "threat frames      " << fixed(r.threat_frames, 4) << '\n';
  write_file(dir / "summary.txt", os.str());
  log << os.str() << "wrote " << (dir / kDatasetFile).string() << '\n';
  return r;
}

void cmd_train(const RunConfig& config, std::ostream& log) {
  const Dataset data = load_or_generate(config, config.seed);
  check_vocabulary(config.model, data.profile);
  const SplitVideos split = split_dataset(data.videos, config.train_fraction);
  const fs::path dir = output_dir(config);

  std::vector<TrainStep> trace;
  const ModelParams params =
      train_model(config, config.model, config.seed, config.train.alpha, split.train, &trace);
  save_checkpoint(dir / kCheckpointFile, params, config.model, config.seed);

  std::ostringstream os;
  os.precision(17);
  for (const auto& s : trace) os << s.step << ' ' << s.loss << '\n';
  write_file(dir / "loss_trace.txt", os.str());
  echo_config(dir, config);

  log << "trained " << variant_name(config.model.variant) << " on " << split.train.size()
      << " videos, " << trace.size() << " steps, alpha " << config.train.alpha << ", lr "
      << config.train.optim.lr << '\n';
  if (!trace.empty()) log << "final loss " << fixed(trace.back().loss, 6) << '\n';
  log << "wrote " << (dir / kCheckpointFile).string() << '\n';
}

MetricReport cmd_eval(const RunConfig& config, std::ostream& log) {
  const Checkpoint ck = load_model(config);
  const Dataset data = load_or_generate(config, config.seed);
  const auto videos = eval_videos(config, split_dataset(data.videos, config.train_fraction));
  const fs::path dir = output_dir(config);

  const PredictionRun run = predict(ck.params, videos, ck.config, config.threshold);
  const auto thresholds = config.thresholds(data.profile.name);
  const MetricReport report = evaluate(run.predictions, videos, thresholds);

  const std::string text = report_text(report, videos.size(), config.threshold);
  write_file(dir / "report.txt", text);
  json j = report_json(report);
  j["videos"] = videos.size();
  j["threshold"] = config.threshold;
  write_file(dir / "report.json", j.dump(2) + "\n");
  echo_config(dir, config);
  log << text;
  return report;
}

std::vector<VariantResult> cmd_ablate(const RunConfig& config, std::ostream& log) {
  const std::vector<std::uint64_t> seeds =
      config.ablate_seeds.empty() ? std::vector<std::uint64_t>{config.seed} : config.ablate_seeds;
  const fs::path dir = output_dir(config);

  std::vector<VariantResult> rows;
  std::ostringstream os;
  os << "seed  variant  FNR     F2      mAP     ROUGE-L BLEU    fine-entropy\n";
  auto line = [&](const std::string& seed, const std::string& variant, double fnr, double f2,
                  double map, double rouge, double bleu, const std::string& entropy) {
    os << pad(seed, 6) << pad(variant, 9) << pad(pct(fnr), 8) << pad(pct(f2), 8) << pad(pct(map), 8)
       << pad(pct(rouge), 8) << pad(pct(bleu), 8) << entropy << '\n';
  };
  for (std::uint64_t seed : seeds) {
    const Dataset data = load_or_generate(config, seed);
    check_vocabulary(config.model, data.profile);
    const SplitVideos split = split_dataset(data.videos, config.train_fraction);
    const auto test = eval_videos(config, split);
    const auto thresholds = config.thresholds(data.profile.name);
    for (const auto& variant : config.ablate_variants) {
      VariantResult r = train_and_evaluate(config, variant, seed, split.train, test, thresholds);
      const auto& m = r.report;
      line(std::to_string(seed), variant, m.fnr, m.f2, m.map.mean, m.rouge_l, m.bleu,
           r.routed ? fixed(r.utilization.fine_entropy(), 4) : "-");
      log << "seed " << seed << " " << variant << " F2 " << pct(m.f2) << '\n';
      rows.push_back(std::move(r));
    }
  }
  if (seeds.size() > 1) {
    for (const auto& variant : config.ablate_variants) {
      double fnr = 0, f2 = 0, map = 0, rouge = 0, bleu = 0, h = 0;
      bool routed = true;
      for (const auto& r : rows) {
        if (r.variant != variant) continue;
        fnr += r.report.fnr, f2 += r.report.f2, map += r.report.map.mean;
        rouge += r.report.rouge_l, bleu += r.report.bleu, h += r.utilization.fine_entropy();
        routed = r.routed;
      }
      const double n = static_cast<double>(seeds.size());
      line("mean", variant, fnr / n, f2 / n, map / n, rouge / n, bleu / n,
           routed ? fixed(h / n, 4) : "-");
    }
  }

  json j = json::array();
  for (const auto& r : rows) {
    json row = report_json(r.report);
    row["seed"] = r.seed;
    row["variant"] = r.variant;
    if (r.routed) row["utilization"] = utilization_json(r.utilization);
    j.push_back(std::move(row));
  }
  write_file(dir / "ablation.txt", os.str());
  write_file(dir / "ablation.json", j.dump(2) + "\n");
  echo_config(dir, config);
  log << os.str();
  return rows;
}

RouterComparison cmd_inspect_router(const RunConfig& config, std::ostream& log) {
  const Checkpoint ck = load_model(config);
  if (ck.config.variant == Variant::no_upe) {
    throw ConfigError("inspect-router needs a routed model, the checkpoint is no-upe");
  }
  const Dataset data = load_or_generate(config, config.seed);
  const SplitVideos split = split_dataset(data.videos, config.train_fraction);
  const auto videos = eval_videos(config, split);
  const fs::path dir = output_dir(config);

  ModelParams baseline;
  ModelConfig baseline_config = ck.config;
  if (!config.baseline_ckpt.empty()) {
    Checkpoint b = load_checkpoint(resolve(config.baseline_ckpt, kCheckpointFile));
    baseline = std::move(b.params);
    baseline_config = b.config;
  } else {
    log << "training the alpha = 0 baseline on " << split.train.size() << " videos\n";
    baseline = train_model(config, ck.config, ck.seed, 0.0, split.train);
  }

  RouterComparison c;
  c.full = expert_utilization(predict(ck.params, videos, ck.config, config.threshold).routes);
  c.ablated =
      expert_utilization(predict(baseline, videos, baseline_config, config.threshold).routes);

  std::ostringstream os;
  os << "model     pose        relation    background  coarse      sum     fine-entropy\n";
  os << utilization_row("full", c.full) << '\n';
  os << utilization_row("w/o PTR", c.ablated) << '\n';
  write_file(dir / "router.txt", os.str());
  const json j = {{"full", utilization_json(c.full)}, {"without_ptr", utilization_json(c.ablated)}};
  write_file(dir / "router.json", j.dump(2) + "\n");
  echo_config(dir, config);
  log << os.str();
  return c;
}

std::vector<GradSuiteRow> cmd_grad_check(const RunConfig& config, std::ostream& log) {
  GradCheckOptions options;
  options.fault_op = config.inject_fault;
  const fs::path dir = output_dir(config);
  const auto rows = run_grad_suite(config.grad_seeds, options, config.grad_cases, config.seed);

  std::ostringstream os;
  if (!config.inject_fault.empty()) {
    os << "injected fault: adjoint of op '" << config.inject_fault << "' scaled by 1.5\n";
  }
  os << "case                     seeds     coords    max-abs-err  max-rel-err  status\n";
  for (const auto& r : rows) {
    char abs_err[32];
    char rel_err[32];
    std::snprintf(abs_err, sizeof abs_err, "%.3e", r.max_abs_error);
    std::snprintf(rel_err, sizeof rel_err, "%.3e", r.max_rel_error);
    os << pad(r.name, 25) << pad(std::to_string(r.passed_seeds) + "/" + std::to_string(r.seeds), 10)
       << pad(std::to_string(r.coordinates), 10) << pad(abs_err, 13) << pad(rel_err, 13) << (r.passed() ? "PASS" : "FAIL");
    if (!r.passed()) {
      os << "  " << r.first_failure;
      if (!config.inject_fault.empty()) os << " (op '" << config.inject_fault << "')";
    }
    os << '\n';
  }
  write_file(dir / "grad_check.txt", os.str());
  echo_config(dir, config);
  log << os.str();
  return rows;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Physical-world threat detection with a gated mixture of experts", "uprm"};
  app.require_subcommand(1);
  app.fallthrough();

  std::optional<fs::path> config_file;
  Overrides ov;
  app.add_option("--config", config_file, "INI configuration file");
  app.add_option("--seed", ov.seed, "Run seed (data, initialisation, shuffling)");
  app.add_option("--out", ov.out, "Output directory");
  app.add_option("--alpha", ov.alpha, "Weight of the trade-off loss");
  app.add_option("--threshold", ov.threshold, "Frame decision threshold");
  app.add_option("--profile", ov.profile, "Built-in data profile: cuva-like, ucfc-like, stressed");
  app.add_option("--data", ov.data, "Dataset file or directory holding dataset.jsonl");
  app.add_option("--ckpt", ov.ckpt, "Checkpoint file or directory holding model.ckpt");
  app.add_option("--baseline-ckpt", ov.baseline_ckpt, "inspect-router: alpha = 0 checkpoint");
  app.add_option("--inject-fault", ov.inject_fault, "grad-check: corrupt the adjoint of this op");
  app.add_flag("--finetune-lr", ov.finetune_lr, "Train with the 2e-5 fine-tuning learning rate");

  std::string command;
  const std::pair<const char*, const char*> commands[] = {
      {"gen-data", "Generate a synthetic dataset"},
      {"train", "Train a model and write a checkpoint and loss trace"},
      {"eval", "Evaluate a checkpoint"},
      {"ablate", "Train and evaluate ablation variants side by side"},
      {"inspect-router", "Compare expert utilisation with and without the trade-off loss"},
      {"grad-check", "Finite-difference check of every registered adjoint"},
  };
  for (const auto& [name, help] : commands) {
    app.add_subcommand(name, help)->callback([&command, n = name] { command = n; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    if (const char* env = std::getenv("UPRM_THREADS")) {
      char* end = nullptr;
      const long v = std::strtol(env, &end, 10);
      if (*env == '\0' || *end != '\0' || v <= 0) {
        throw ConfigError("UPRM_THREADS must be a positive integer, got '" + std::string(env) + "'");
      }
    }
    const RunConfig config = load_run_config(config_file, ov);
    if (command == "gen-data") {
      cmd_gen_data(config, out);
    } else if (command == "train") {
      cmd_train(config, out);
    } else if (command == "eval") {
      cmd_eval(config, out);
    } else if (command == "ablate") {
      cmd_ablate(config, out);
    } else if (command == "inspect-router") {
      cmd_inspect_router(config, out);
    } else if (command == "grad-check") {
      const auto rows = cmd_grad_check(config, out);
      if (!std::all_of(rows.begin(), rows.end(), [](const GradSuiteRow& r) { return r.passed(); })) {
        err << "uprm: gradient check failed\n";
        return 4;
      }
    }
    return 0;
  } catch (const ConfigError& e) {
    err << "uprm: configuration error: " << e.what() << '\n';
    return 2;
  } catch (const DimensionError& e) {
    err << "uprm: configuration error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    err << "uprm: data error: " << e.what() << '\n';
    return 3;
  } catch (const ContractError& e) {
    err << "uprm: data error: " << e.what() << '\n';
    return 3;
  } catch (const fs::filesystem_error& e) {
    err << "uprm: data error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    err << "uprm: numerical failure: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    err << "uprm: internal error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace uprm::cli
