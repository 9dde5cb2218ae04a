#include "uprm/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "uprm/errors.hpp"

namespace uprm {

double ConfusionCounts::fnr() const noexcept {
  return tp + fn == 0 ? 0.0 : static_cast<double>(fn) / static_cast<double>(tp + fn);
}

double ConfusionCounts::precision() const noexcept {
  return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
}

double ConfusionCounts::recall() const noexcept {
  return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
}

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) noexcept {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  tn += o.tn;
  return *this;
}

ConfusionCounts frame_confusion(std::span<const std::uint8_t> predicted,
                                std::span<const std::uint8_t> truth) {
  if (predicted.size() != truth.size()) {
    throw ContractError("frame_confusion: " + std::to_string(predicted.size()) +
                        " predictions for " + std::to_string(truth.size()) + " labels");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool p = predicted[i] != 0;
    const bool y = truth[i] != 0;
    if (p && y) ++c.tp;
    else if (p) ++c.fp;
    else if (y) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double f_beta(const ConfusionCounts& counts, double beta) {
  if (counts.tp == 0) return 0.0;
  const double p = counts.precision();
  const double r = counts.recall();
  const double b2 = beta * beta;
  return (1.0 + b2) * p * r / (b2 * p + r);
}

double temporal_iou(Interval a, Interval b) {
  if (!(a.start < a.end) || !(b.start < b.end)) {
    throw ContractError("temporal_iou: degenerate interval");
  }
  const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = (a.end - a.start) + (b.end - b.start) - inter;
  return inter / uni;
}

namespace {

struct Ranked {
  std::size_t video;
  const SegmentPrediction* seg;
};

double average_precision(const std::vector<Ranked>& ranked,
                         const std::vector<std::vector<GroundTruthSegment>>& truth,
                         std::size_t gt_total, double threshold) {
  if (gt_total == 0) return 0.0;
  std::vector<std::vector<bool>> used(truth.size());
  for (std::size_t v = 0; v < truth.size(); ++v) used[v].assign(truth[v].size(), false);
  std::vector<double> precision, recall;
  precision.reserve(ranked.size());
  recall.reserve(ranked.size());
  std::size_t tp = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    const auto& gts = truth[ranked[k].video];
    const Interval p{ranked[k].seg->start, ranked[k].seg->end};
    double best = -1.0;
    std::size_t best_idx = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[ranked[k].video][g]) continue;
      const double iou = temporal_iou(p, {gts[g].start, gts[g].end});
      if (iou > best) {
        best = iou;
        best_idx = g;
      }
    }
    if (best_idx < gts.size() && best >= threshold) {
      used[ranked[k].video][best_idx] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gt_total));
  }
  // Precision envelope, then area under the step curve.
  for (std::size_t k = precision.size(); k-- > 1;) {
    precision[k - 1] = std::max(precision[k - 1], precision[k]);
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t k = 0; k < precision.size(); ++k) {
    ap += (recall[k] - prev_recall) * precision[k];
    prev_recall = recall[k];
  }
  return ap;
}

}  // namespace

ApReport map_at_tiou(const std::vector<std::vector<SegmentPrediction>>& predictions,
                     const std::vector<std::vector<GroundTruthSegment>>& truth,
                     std::span<const double> thresholds) {
  if (predictions.size() != truth.size()) {
    throw ContractError("map_at_tiou: predictions for " + std::to_string(predictions.size()) +
                        " videos, ground truth for " + std::to_string(truth.size()));
  }
  for (double t : thresholds) {
    if (!(t > 0.0 && t <= 1.0)) {
      throw ConfigError("tIoU threshold " + std::to_string(t) + " outside (0, 1]");
    }
  }
  std::vector<Ranked> ranked;
  for (std::size_t v = 0; v < predictions.size(); ++v) {
    for (const auto& s : predictions[v]) {
      if (!(s.confidence >= 0.0 && s.confidence <= 1.0)) {
        throw ContractError("map_at_tiou: confidence outside [0, 1] in video " +
                            std::to_string(v));
      }
      ranked.push_back({v, &s});
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.seg->confidence != b.seg->confidence) return a.seg->confidence > b.seg->confidence;
    if (a.video != b.video) return a.video < b.video;
    return a.seg->start < b.seg->start;
  });
  std::size_t gt_total = 0;
  for (const auto& g : truth) gt_total += g.size();

  ApReport r;
  r.thresholds.assign(thresholds.begin(), thresholds.end());
  for (double t : thresholds) r.ap.push_back(average_precision(ranked, truth, gt_total, t));
  if (!r.ap.empty()) {
    double sum = 0.0;
    for (double a : r.ap) sum += a;
    r.mean = sum / static_cast<double>(r.ap.size());
  }
  return r;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) {
    for (char& c : tok) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    out.push_back(std::move(tok));
  }
  return out;
}

double rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference) {
  if (reference.empty()) throw ContractError("rouge_l: empty reference");
  if (candidate.empty()) return 0.0;
  const std::size_t m = candidate.size(), n = reference.size();
  std::vector<std::size_t> prev(n + 1, 0), cur(n + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1
                                                    : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev[n]);
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(m);
  const double r = lcs / static_cast<double>(n);
  return 2.0 * p * r / (p + r);
}

double bleu(std::span<const std::string> candidate, std::span<const std::string> reference,
            std::size_t max_n) {
  if (reference.empty()) throw ContractError("bleu: empty reference");
  if (candidate.empty() || max_n == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    std::map<std::vector<std::string>, std::size_t> ref_counts, cand_counts;
    for (std::size_t i = 0; i + n <= reference.size(); ++i) {
      ++ref_counts[{reference.begin() + i, reference.begin() + i + n}];
    }
    for (std::size_t i = 0; i + n <= candidate.size(); ++i) {
      ++cand_counts[{candidate.begin() + i, candidate.begin() + i + n}];
    }
    std::size_t matched = 0, total = 0;
    for (const auto& [gram, count] : cand_counts) {
      total += count;
      const auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) matched += std::min(count, it->second);
    }
    double precision;
    if (n == 1) {
      if (matched == 0) return 0.0;
      precision = static_cast<double>(matched) / static_cast<double>(total);
    } else if (matched == 0) {
      precision = 1.0 / static_cast<double>(total + 1);
    } else {
      precision = static_cast<double>(matched) / static_cast<double>(total);
    }
    log_sum += std::log(precision);
  }
  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

namespace {

struct Partial {
  ConfusionCounts counts;
  std::vector<std::vector<SegmentPrediction>> preds;
  std::vector<std::vector<GroundTruthSegment>> truth;
  double rouge = 0.0;
  double bleu = 0.0;
  std::size_t videos = 0;
};

std::vector<GroundTruthSegment> as_intervals(const std::vector<SegmentPrediction>& segs) {
  std::vector<GroundTruthSegment> out;
  out.reserve(segs.size());
  for (const auto& s : segs) out.push_back({s.start, s.end, s.cause});
  return out;
}

}  // namespace

MetricReport evaluate(std::span<const VideoPrediction> predictions,
                      std::span<const SyntheticVideo> videos,
                      std::span<const double> thresholds) {
  if (predictions.size() != videos.size()) {
    throw ContractError("evaluate: " + std::to_string(predictions.size()) +
                        " predictions for " + std::to_string(videos.size()) + " videos");
  }
  Partial all;
  std::map<std::size_t, Partial> by_cause;
  std::size_t threat_videos = 0, missed_videos = 0;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const SyntheticVideo& v = videos[i];
    const VideoPrediction& p = predictions[i];
    if (p.video_id != v.id || p.frame_labels.size() != v.frame_count()) {
      throw ContractError("evaluate: prediction " + std::to_string(i) + " (video " +
                          std::to_string(p.video_id) + ") does not match video " +
                          std::to_string(v.id));
    }
    const ConfusionCounts c = frame_confusion(p.frame_labels, v.per_frame_labels);
    const auto cand = tokenize(attribution_text(as_intervals(p.segments)));
    const auto ref = tokenize(attribution_text(v.ground_truth));
    const double rl = rouge_l(cand, ref);
    const double bl = bleu(cand, ref);
    auto add = [&](Partial& part) {
      part.counts += c;
      part.preds.push_back(p.segments);
      part.truth.push_back(v.ground_truth);
      part.rouge += rl;
      part.bleu += bl;
      ++part.videos;
    };
    add(all);
    std::vector<std::size_t> causes;
    for (const auto& g : v.ground_truth) causes.push_back(g.cause);
    std::sort(causes.begin(), causes.end());
    causes.erase(std::unique(causes.begin(), causes.end()), causes.end());
    for (std::size_t cause : causes) add(by_cause[cause]);
    if (!v.ground_truth.empty()) {
      ++threat_videos;
      if (c.tp + c.fp == 0) ++missed_videos;
    }
  }

  MetricReport r;
  r.counts = all.counts;
  r.fnr = all.counts.fnr();
  r.f2 = f_beta(all.counts);
  r.map = map_at_tiou(all.preds, all.truth, thresholds);
  if (all.videos) {
    r.rouge_l = all.rouge / static_cast<double>(all.videos);
    r.bleu = all.bleu / static_cast<double>(all.videos);
  }
  r.video_fnr = threat_videos ? static_cast<double>(missed_videos) /
                                    static_cast<double>(threat_videos)
                              : 0.0;
  for (const auto& [cause, part] : by_cause) {
    CategoryReport cr;
    cr.videos = part.videos;
    cr.fnr = part.counts.fnr();
    cr.f2 = f_beta(part.counts);
    cr.map = map_at_tiou(part.preds, part.truth, thresholds);
    cr.rouge_l = part.rouge / static_cast<double>(part.videos);
    cr.bleu = part.bleu / static_cast<double>(part.videos);
    r.per_category.emplace(cause, std::move(cr));
  }
  return r;
}

}  // namespace uprm
