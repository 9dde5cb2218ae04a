#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "uprm/datagen.hpp"
#include "uprm/segments.hpp"

namespace uprm {

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;

  std::size_t total() const noexcept { return tp + fp + fn + tn; }
  /// fn / (fn + tp); 0 when there are no positive frames.
  double fnr() const noexcept;
  double precision() const noexcept;
  double recall() const noexcept;
  ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept;
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Throws ContractError on a length mismatch.
ConfusionCounts frame_confusion(std::span<const std::uint8_t> predicted,
                                std::span<const std::uint8_t> truth);

/// (1+β²)PR/(β²P + R); 0 when tp = 0.
double f_beta(const ConfusionCounts& counts, double beta = 2.0);

struct Interval {
  double start = 0.0;
  double end = 0.0;
};

/// |a∩b| / |a∪b|. Throws ContractError unless start < end for both.
double temporal_iou(Interval a, Interval b);

struct ApReport {
  std::vector<double> thresholds;
  std::vector<double> ap;
  /// Arithmetic mean over thresholds.
  double mean = 0.0;
};

/// Predictions pooled over videos (index = video position), sorted by
/// descending confidence with ties broken by video then start. Each is
/// greedily matched to the unmatched ground-truth interval of its video
/// with the highest IoU (ties to the earliest) when that IoU reaches the
/// threshold. AP is the all-point interpolated area under the
/// precision-recall curve; it is 0 when no ground truth exists. Throws
/// ConfigError for thresholds outside (0, 1] and ContractError when the
/// two lists differ in length.
ApReport map_at_tiou(const std::vector<std::vector<SegmentPrediction>>& predictions,
                     const std::vector<std::vector<GroundTruthSegment>>& truth,
                     std::span<const double> thresholds);

/// Lowercased whitespace tokens.
std::vector<std::string> tokenize(const std::string& text);

/// LCS F1. Throws ContractError for an empty reference.
double rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference);

/// Geometric mean of clipped n-gram precisions with add-one smoothing of
/// zero higher-order matches, times the brevity penalty. 0 for an empty
/// candidate; throws ContractError for an empty reference.
double bleu(std::span<const std::string> candidate, std::span<const std::string> reference,
            std::size_t max_n = 4);

struct CategoryReport {
  std::size_t videos = 0;
  double fnr = 0.0;
  double f2 = 0.0;
  ApReport map;
  double rouge_l = 0.0;
  double bleu = 0.0;
};

struct MetricReport {
  ConfusionCounts counts;
  double fnr = 0.0;
  double f2 = 0.0;
  ApReport map;
  double rouge_l = 0.0;
  double bleu = 0.0;
  /// Share of threat-bearing videos without any predicted threat frame.
  double video_fnr = 0.0;
  std::map<std::size_t, CategoryReport> per_category;
};

inline const std::vector<double>& cuva_thresholds() {
  static const std::vector<double> t{0.1, 0.3, 0.5};
  return t;
}
inline const std::vector<double>& ucfc_thresholds() {
  static const std::vector<double> t{0.1, 0.2, 0.3};
  return t;
}

/// Aggregates every kernel. predictions[i] must describe videos[i] (same id
/// and frame count), otherwise ContractError naming the video. Attribution
/// scores compare the cause sentences of the predicted segments with those
/// of the ground truth, averaged over videos. Per-category rows restrict to
/// videos having a ground-truth interval of that cause.
MetricReport evaluate(std::span<const VideoPrediction> predictions,
                      std::span<const SyntheticVideo> videos,
                      std::span<const double> thresholds);

}  // namespace uprm
