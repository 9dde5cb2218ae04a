#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "run_config.hpp"
#include "uprm/dataset_io.hpp"
#include "uprm/grad_suite.hpp"
#include "uprm/metrics.hpp"
#include "uprm/router.hpp"

namespace uprm::cli {

inline constexpr const char* kDatasetFile = "dataset.jsonl";
inline constexpr const char* kCheckpointFile = "model.ckpt";
inline constexpr const char* kConfigEcho = "config.ini";

/// The configured dataset file, or a fresh one generated from the profile
/// and `seed` when no path is set. A directory means its dataset.jsonl.
Dataset load_or_generate(const RunConfig& config, std::uint64_t seed);

struct SplitVideos {
  std::vector<SyntheticVideo> train;
  std::vector<SyntheticVideo> heldout;
};

/// Leading round(train_fraction·n) videos train, the rest are held out.
SplitVideos split_dataset(const std::vector<SyntheticVideo>& videos, double train_fraction);

/// The videos `config.eval_split` selects. Throws DataError when empty.
std::vector<SyntheticVideo> eval_videos(const RunConfig& config, const SplitVideos& split);

/// One trained and evaluated ablation variant.
struct VariantResult {
  std::string variant;
  std::uint64_t seed = 0;
  MetricReport report;
  /// Empty routes (w/o UPE) leave the shares at zero.
  ExpertUtilization utilization;
  bool routed = true;
};

/// Trains the named variant ("no-ptr" is the full model at alpha 0) on
/// `train`, then evaluates it on `test`.
VariantResult train_and_evaluate(const RunConfig& config, const std::string& variant,
                                 std::uint64_t seed, const std::vector<SyntheticVideo>& train,
                                 const std::vector<SyntheticVideo>& test,
                                 const std::vector<double>& thresholds);

struct RouterComparison {
  ExpertUtilization full;
  ExpertUtilization ablated;
};

// Each command writes its outputs plus config.ini into config.out and
// prints a human-readable summary to `log`.
ModalityRates cmd_gen_data(const RunConfig& config, std::ostream& log);
void cmd_train(const RunConfig& config, std::ostream& log);
MetricReport cmd_eval(const RunConfig& config, std::ostream& log);
std::vector<VariantResult> cmd_ablate(const RunConfig& config, std::ostream& log);
RouterComparison cmd_inspect_router(const RunConfig& config, std::ostream& log);
/// Returns the per-case rows; the caller turns a failure into exit code 4.
std::vector<GradSuiteRow> cmd_grad_check(const RunConfig& config, std::ostream& log);

/// Parses argv, runs one command and maps error families onto exit codes:
/// 0 success, 2 configuration, 3 data, 4 numerical failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace uprm::cli
