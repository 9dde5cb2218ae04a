#pragma once

// Slow, obviously-correct evaluators used as oracles for the metric
// kernels, plus random instance generators.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "uprm/datagen.hpp"
#include "uprm/metrics.hpp"

namespace uprm::oracle {

using Preds = std::vector<std::vector<SegmentPrediction>>;
using Truth = std::vector<std::vector<GroundTruthSegment>>;

// ---- slow reference kernels ----

// Interval overlap by counting cells of a 1/16 grid; exact for the
// quarter-integer endpoints used below.
inline double grid_iou(double as, double ae, double bs, double be) {
  long inter = 0, uni = 0;
  const long lo = static_cast<long>(std::floor(std::min(as, bs) * 16)) - 1;
  const long hi = static_cast<long>(std::ceil(std::max(ae, be) * 16)) + 1;
  for (long c = lo; c < hi; ++c) {
    const double mid = (static_cast<double>(c) + 0.5) / 16.0;
    const bool in_a = mid > as && mid < ae;
    const bool in_b = mid > bs && mid < be;
    inter += in_a && in_b;
    uni += in_a || in_b;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct RankedRef {
  std::size_t video;
  std::size_t index;
};

inline std::vector<RankedRef> rank(const Preds& preds) {
  std::vector<RankedRef> r;
  for (std::size_t v = 0; v < preds.size(); ++v)
    for (std::size_t i = 0; i < preds[v].size(); ++i) r.push_back({v, i});
  // Insertion sort by the documented key.
  for (std::size_t i = 1; i < r.size(); ++i) {
    for (std::size_t j = i; j > 0; --j) {
      const auto& a = preds[r[j].video][r[j].index];
      const auto& b = preds[r[j - 1].video][r[j - 1].index];
      const bool before = a.confidence > b.confidence ||
                          (a.confidence == b.confidence &&
                           (r[j].video < r[j - 1].video ||
                            (r[j].video == r[j - 1].video && a.start < b.start)));
      if (!before) break;
      std::swap(r[j], r[j - 1]);
    }
  }
  return r;
}

// True positives among the first k ranked predictions, replaying the
// greedy matching from scratch.
inline std::size_t tp_of_prefix(const Preds& preds, const Truth& truth, const std::vector<RankedRef>& r,
                         std::size_t k, double threshold, bool* last_is_tp) {
  std::vector<std::vector<bool>> used(truth.size());
  for (std::size_t v = 0; v < truth.size(); ++v) used[v].assign(truth[v].size(), false);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const auto& p = preds[r[i].video][r[i].index];
    const auto& gts = truth[r[i].video];
    std::size_t best = gts.size();
    double best_iou = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[r[i].video][g]) continue;
      const double iou = grid_iou(p.start, p.end, gts[g].start, gts[g].end);
      if (iou > best_iou) best_iou = iou, best = g;
    }
    const bool hit = best < gts.size() && best_iou >= threshold;
    if (hit) used[r[i].video][best] = true, ++tp;
    if (last_is_tp) *last_is_tp = hit;
  }
  return tp;
}

inline double brute_ap(const Preds& preds, const Truth& truth, double threshold) {
  std::size_t gt = 0;
  for (const auto& g : truth) gt += g.size();
  if (gt == 0) return 0.0;
  const auto r = rank(preds);
  std::vector<double> prec(r.size() + 1, 0.0);
  std::vector<bool> hit(r.size() + 1, false);
  for (std::size_t k = 1; k <= r.size(); ++k) {
    bool last = false;
    const std::size_t tp = tp_of_prefix(preds, truth, r, k, threshold, &last);
    prec[k] = static_cast<double>(tp) / static_cast<double>(k);
    hit[k] = last;
  }
  // Each true positive adds 1/gt recall at the best precision reachable at
  // that rank or later.
  double ap = 0.0;
  for (std::size_t k = 1; k <= r.size(); ++k) {
    if (!hit[k]) continue;
    double best = 0.0;
    for (std::size_t j = k; j <= r.size(); ++j) best = std::max(best, prec[j]);
    ap += best / static_cast<double>(gt);
  }
  return ap;
}

inline std::size_t lcs_recursive(const std::vector<std::string>& a, const std::vector<std::string>& b,
                          std::size_t i, std::size_t j, std::map<std::pair<std::size_t, std::size_t>, std::size_t>& memo) {
  if (i == a.size() || j == b.size()) return 0;
  const auto key = std::make_pair(i, j);
  if (auto it = memo.find(key); it != memo.end()) return it->second;
  const std::size_t v = a[i] == b[j] ? 1 + lcs_recursive(a, b, i + 1, j + 1, memo)
                                     : std::max(lcs_recursive(a, b, i + 1, j, memo),
                                                lcs_recursive(a, b, i, j + 1, memo));
  return memo[key] = v;
}

inline double brute_rouge(const std::vector<std::string>& c, const std::vector<std::string>& r) {
  if (c.empty()) return 0.0;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
  const double l = static_cast<double>(lcs_recursive(c, r, 0, 0, memo));
  if (l == 0) return 0.0;
  const double p = l / c.size(), q = l / r.size();
  return 2 * p * q / (p + q);
}

inline std::size_t occurrences(const std::vector<std::string>& s, const std::vector<std::string>& s_at,
                        std::size_t at, std::size_t n) {
  std::size_t k = 0;
  for (std::size_t i = 0; i + n <= s.size(); ++i)
    k += std::equal(s.begin() + i, s.begin() + i + n, s_at.begin() + at);
  return k;
}

inline double brute_bleu(const std::vector<std::string>& c, const std::vector<std::string>& r) {
  if (c.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    double matched = 0.0;
    std::size_t total = 0;
    for (std::size_t i = 0; i + n <= c.size(); ++i) {
      ++total;
      const double in_c = static_cast<double>(occurrences(c, c, i, n));
      const double in_r = static_cast<double>(occurrences(r, c, i, n));
      matched += std::min(in_c, in_r) / in_c;
    }
    matched = std::round(matched);
    if (n == 1 && matched == 0) return 0.0;
    log_sum += std::log(matched == 0 ? 1.0 / (total + 1) : matched / total);
  }
  const double bp = c.size() >= r.size() ? 1.0 : std::exp(1.0 - double(r.size()) / c.size());
  return bp * std::exp(log_sum / 4);
}

// ---- random instances ----

inline std::vector<GroundTruthSegment> random_intervals(std::mt19937_64& rng, std::size_t n, std::size_t max_count) {
  std::uniform_int_distribution<std::size_t> count(0, max_count);
  std::uniform_int_distribution<std::size_t> cause(0, 7);
  std::vector<GroundTruthSegment> out;
  const std::size_t k = count(rng);
  for (std::size_t attempt = 0; attempt < 50 && out.size() < k; ++attempt) {
    std::uniform_int_distribution<std::size_t> s(0, n - 2);
    const std::size_t a = s(rng);
    std::uniform_int_distribution<std::size_t> e(a + 1, std::min(n, a + 8));
    const std::size_t b = e(rng);
    const bool clash = std::any_of(out.begin(), out.end(), [&](const auto& g) {
      return static_cast<double>(a) <= g.end && g.start <= static_cast<double>(b);
    });
    if (!clash) out.push_back({double(a), double(b), cause(rng)});
  }
  std::sort(out.begin(), out.end(), [](auto& x, auto& y) { return x.start < y.start; });
  return out;
}

inline std::vector<SegmentPrediction> random_predictions(std::mt19937_64& rng, std::size_t n,
                                                  const std::vector<GroundTruthSegment>& gt,
                                                  std::size_t max_count) {
  std::uniform_int_distribution<std::size_t> count(0, max_count);
  std::uniform_real_distribution<double> jitter(-3.0, 3.0);
  // Coarse confidences so ties occur.
  std::uniform_int_distribution<int> conf(0, 4);
  std::uniform_int_distribution<std::size_t> cause(0, 7);
  std::bernoulli_distribution near_gt(0.6);
  std::vector<SegmentPrediction> out;
  const std::size_t k = count(rng);
  for (std::size_t i = 0; i < k; ++i) {
    double s, e;
    if (!gt.empty() && near_gt(rng)) {
      const auto& g = gt[rng() % gt.size()];
      s = std::round(4 * (g.start + jitter(rng))) / 4;
      e = std::round(4 * (g.end + jitter(rng))) / 4;
    } else {
      s = static_cast<double>(rng() % n);
      e = s + 1 + static_cast<double>(rng() % 6);
    }
    if (e <= s) e = s + 0.25;
    out.push_back({s, e, conf(rng) / 4.0, cause(rng)});
  }
  return out;
}

inline SyntheticVideo labelled_video(std::size_t id, std::size_t n, std::vector<GroundTruthSegment> gt) {
  SyntheticVideo v;
  v.id = id;
  v.per_frame_labels.assign(n, 0);
  for (const auto& g : gt)
    for (auto f = static_cast<std::size_t>(g.start); f < static_cast<std::size_t>(g.end); ++f) v.per_frame_labels[f] = 1;
  v.ground_truth = std::move(gt);
  return v;
}

struct SlowReport {
  double fnr, f2, rouge, bleu, video_fnr;
  std::vector<double> ap;
};

inline SlowReport slow_evaluate(const std::vector<VideoPrediction>& preds, const std::vector<SyntheticVideo>& videos,
                         const std::vector<double>& thresholds, std::optional<std::size_t> cause = {}) {
  double tp = 0, fp = 0, fn = 0, rouge = 0, bl = 0, used = 0, threat = 0, missed = 0;
  Preds p;
  Truth t;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const auto& v = videos[i];
    if (cause && std::none_of(v.ground_truth.begin(), v.ground_truth.end(),
                              [&](const auto& g) { return g.cause == *cause; }))
      continue;
    ++used;
    bool any = false;
    for (std::size_t f = 0; f < v.frame_count(); ++f) {
      const bool y = v.per_frame_labels[f], q = preds[i].frame_labels[f];
      tp += y && q, fp += !y && q, fn += y && !q;
      any = any || q;
    }
    if (!v.ground_truth.empty()) ++threat, missed += !any;
    std::vector<GroundTruthSegment> as_gt;
    for (const auto& s : preds[i].segments) as_gt.push_back({s.start, s.end, s.cause});
    const auto c = tokenize(attribution_text(as_gt)), r = tokenize(attribution_text(v.ground_truth));
    rouge += brute_rouge(c, r);
    bl += brute_bleu(c, r);
    p.push_back(preds[i].segments);
    t.push_back(v.ground_truth);
  }
  SlowReport s;
  s.fnr = tp + fn == 0 ? 0 : fn / (tp + fn);
  const double prec = tp / (tp + fp), rec = tp / (tp + fn);
  s.f2 = tp == 0 ? 0 : 5 * prec * rec / (4 * prec + rec);
  s.rouge = rouge / used;
  s.bleu = bl / used;
  s.video_fnr = threat == 0 ? 0 : missed / threat;
  for (double th : thresholds) s.ap.push_back(brute_ap(p, t, th));
  return s;
}

}  // namespace uprm::oracle
