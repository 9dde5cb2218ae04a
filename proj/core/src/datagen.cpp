#include "uprm/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <string>

#include "uprm/errors.hpp"
#include "uprm/rng.hpp"

namespace uprm {
namespace {

enum Field : std::uint64_t {
  kThreatField = 1,
  kPresenceField,
  kCarrierField,
  kCoarseField,
  kBackgroundField,
  kPoseField,
  kSceneField,
  kPatchField,
};

// Planted directions are shared by every profile and seed so that a model
// trained on one seed transfers to another.
constexpr std::uint64_t kDirectionSeed = 0x75707276ULL;
constexpr std::size_t kMaxCauses = 8;
constexpr std::size_t kNormalCategories = 8;
constexpr std::size_t kNormalPredicates = 5;
constexpr std::size_t kThreatPredicate = 5;
constexpr std::size_t kMaxEntities = 4;
constexpr std::size_t kMaxRelations = 6;

struct Directions {
  std::vector<double> threat;
  std::vector<double> background;
  std::vector<std::vector<double>> cause;
  std::vector<std::vector<double>> appearance;
};

std::vector<double> unit_vector(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(d);
  double norm = 0.0;
  for (double& x : v) {
    x = n(rng);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

Directions directions(std::size_t d) {
  auto rng = make_stream(kDirectionSeed, d, 0);
  Directions out;
  out.threat = unit_vector(d, rng);
  out.background = unit_vector(d, rng);
  for (std::size_t c = 0; c < kMaxCauses; ++c) out.cause.push_back(unit_vector(d, rng));
  for (std::size_t c = 0; c < kEntityCategoryCount; ++c) {
    out.appearance.push_back(unit_vector(d, rng));
  }
  return out;
}

void add_scaled(std::span<double> row, const std::vector<double>& v, double s) {
  for (std::size_t i = 0; i < row.size(); ++i) row[i] += s * v[i];
}

std::vector<double> normal_vector(std::size_t d, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, sd);
  std::vector<double> v(d);
  for (double& x : v) x = n(rng);
  return v;
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

bool bernoulli(std::mt19937_64& rng, double p) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

// Standing person in a unit box, y pointing down.
constexpr JointCoords kStanding{{{0.50, 0.10}, {0.52, 0.08}, {0.48, 0.08}, {0.55, 0.10},
                                 {0.45, 0.10}, {0.62, 0.25}, {0.38, 0.25}, {0.66, 0.42},
                                 {0.34, 0.42}, {0.68, 0.57}, {0.32, 0.57}, {0.58, 0.58},
                                 {0.42, 0.58}, {0.59, 0.78}, {0.41, 0.78}, {0.60, 0.97},
                                 {0.40, 0.97}}};
// Same person with both arms raised above the head.
constexpr JointCoords kArmsRaised{{{0.50, 0.10}, {0.52, 0.08}, {0.48, 0.08}, {0.55, 0.10},
                                   {0.45, 0.10}, {0.62, 0.25}, {0.38, 0.25}, {0.72, 0.14},
                                   {0.28, 0.14}, {0.76, 0.02}, {0.24, 0.02}, {0.58, 0.58},
                                   {0.42, 0.58}, {0.59, 0.78}, {0.41, 0.78}, {0.60, 0.97},
                                   {0.40, 0.97}}};

std::vector<GroundTruthSegment> draw_intervals(const GenProfile& p, std::mt19937_64& rng) {
  std::vector<GroundTruthSegment> out;
  if (!bernoulli(rng, p.threat_rate)) return out;
  const std::size_t n = p.frames_per_video;
  const std::size_t wanted = bernoulli(rng, 0.5) ? 2 : 1;
  for (std::size_t attempt = 0; attempt < 20 && out.size() < wanted; ++attempt) {
    const std::size_t len = std::min(n, uniform_index(rng, 4, 12));
    const std::size_t start = uniform_index(rng, 0, n - len);
    const std::size_t cause = uniform_index(rng, 0, p.cause_vocab_size - 1);
    const double s = static_cast<double>(start);
    const double e = static_cast<double>(start + len);
    // Keep at least one background frame between intervals.
    const bool clash = std::any_of(out.begin(), out.end(), [&](const GroundTruthSegment& g) {
      return s <= g.end && g.start <= e;
    });
    if (!clash) out.push_back({s, e, cause});
  }
  std::sort(out.begin(), out.end(),
            [](const GroundTruthSegment& a, const GroundTruthSegment& b) {
              return a.start < b.start;
            });
  return out;
}

std::vector<std::uint8_t> draw_presence(std::size_t n, std::size_t block, double rate,
                                        std::mt19937_64& rng) {
  std::vector<std::uint8_t> out(n);
  for (std::size_t b = 0; b < n; b += block) {
    const std::uint8_t on = bernoulli(rng, rate) ? 1 : 0;
    for (std::size_t t = b; t < std::min(n, b + block); ++t) out[t] = on;
  }
  return out;
}

JointCoords draw_pose(bool threat, double blend, double scale, Point2 origin, double jitter,
                      std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, jitter);
  JointCoords out;
  for (std::size_t j = 0; j < kJointCount; ++j) {
    Point2 base = kStanding[j];
    if (threat) {
      base.x += blend * (kArmsRaised[j].x - base.x);
      base.y += blend * (kArmsRaised[j].y - base.y);
    }
    out[j].x = std::clamp(origin.x + scale * base.x + n(rng), 0.0, 1.0);
    out[j].y = std::clamp(origin.y + scale * base.y + n(rng), 0.0, 1.0);
  }
  return out;
}

SceneGraph draw_scene(bool threat, std::size_t cause, std::mt19937_64& rng) {
  SceneGraph g;
  const std::size_t k = uniform_index(rng, 2, kMaxEntities);
  for (std::size_t i = 0; i < k; ++i) {
    Entity e;
    e.category = uniform_index(rng, 0, kNormalCategories - 1);
    e.box.w = uniform(rng, 0.15, 0.5);
    e.box.h = uniform(rng, 0.15, 0.5);
    e.box.x = uniform(rng, 0.0, 1.0 - e.box.w);
    e.box.y = uniform(rng, 0.0, 1.0 - e.box.h);
    g.entities.push_back(e);
  }
  const std::size_t r = uniform_index(rng, 1, std::min<std::size_t>(3, k * (k - 1)));
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t s = uniform_index(rng, 0, k - 1);
    std::size_t o = uniform_index(rng, 0, k - 2);
    if (o >= s) ++o;
    g.relations.push_back({s, uniform_index(rng, 0, kNormalPredicates - 1), o});
  }
  if (threat) {
    g.entities[0].category = kNormalCategories + cause % 2;
    g.relations.push_back({1, kThreatPredicate, 0});
  }
  return g;
}

}  // namespace

void GenProfile::validate() const {
  auto rate = [](const char* field, double v) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ConfigError(std::string(field) + " must lie in [0, 1], got " + std::to_string(v));
    }
  };
  auto nonneg = [](const char* field, double v) {
    if (!(std::isfinite(v) && v >= 0.0)) {
      throw ConfigError(std::string(field) + " must be finite and non-negative");
    }
  };
  if (video_count == 0) throw ConfigError("video_count must be positive");
  if (frames_per_video == 0) throw ConfigError("frames_per_video must be positive");
  rate("pose_presence_rate", pose_presence_rate);
  rate("background_presence_rate", background_presence_rate);
  rate("relation_presence_rate", relation_presence_rate);
  rate("threat_rate", threat_rate);
  if (cause_vocab_size == 0 || cause_vocab_size > kMaxCauses) {
    throw ConfigError("cause_vocab_size must lie in [1, " + std::to_string(kMaxCauses) + "]");
  }
  if (token_dim == 0) throw ConfigError("token_dim must be positive");
  if (presence_block == 0) throw ConfigError("presence_block must be positive");
  nonneg("coarse_signal", coarse_signal);
  nonneg("cause_signal", cause_signal);
  nonneg("fine_signal", fine_signal);
  nonneg("noise", noise);
}

GenProfile builtin_profile(std::string_view name) {
  GenProfile p;
  if (name == "cuva-like") return p;
  if (name == "ucfc-like") {
    p.name = "ucfc-like";
    p.pose_presence_rate = 0.41;
    p.background_presence_rate = 0.31;
    p.relation_presence_rate = 0.28;
    return p;
  }
  if (name == "stressed") {
    // Dominant pose stream, rare context streams and a weak coarse cue.
    p.name = "stressed";
    p.pose_presence_rate = 0.7;
    p.background_presence_rate = 0.1;
    p.relation_presence_rate = 0.15;
    p.coarse_signal = 0.6;
    p.fine_signal = 2.5;
    return p;
  }
  throw ConfigError("unknown profile '" + std::string(name) + "'");
}

std::vector<std::string> builtin_profile_names() { return {"cuva-like", "ucfc-like", "stressed"}; }

SyntheticVideo generate_video(const GenProfile& p, std::size_t index) {
  p.validate();
  const std::size_t n = p.frames_per_video;
  const std::size_t d = p.token_dim;
  static thread_local std::size_t cached_dim = 0;
  static thread_local Directions dirs;
  if (cached_dim != d) {
    dirs = directions(d);
    cached_dim = d;
  }

  SyntheticVideo v;
  v.id = index;
  auto threat_rng = make_stream(p.seed, index, kThreatField);
  v.ground_truth = draw_intervals(p, threat_rng);
  v.per_frame_labels.assign(n, 0);
  std::vector<std::size_t> cause(n, 0);
  for (const auto& g : v.ground_truth) {
    for (auto t = static_cast<std::size_t>(g.start); t < static_cast<std::size_t>(g.end); ++t) {
      v.per_frame_labels[t] = 1;
      cause[t] = g.cause;
    }
  }

  auto presence_rng = make_stream(p.seed, index, kPresenceField);
  const auto pose_on = draw_presence(n, p.presence_block, p.pose_presence_rate, presence_rng);
  const auto bg_on = draw_presence(n, p.presence_block, p.background_presence_rate, presence_rng);
  const auto rel_on = draw_presence(n, p.presence_block, p.relation_presence_rate, presence_rng);

  // Which fine streams carry the threat cue in this video. The most
  // available stream always does; the others with probability relative to it.
  auto carrier_rng = make_stream(p.seed, index, kCarrierField);
  const double top = std::max({p.pose_presence_rate, p.background_presence_rate,
                               p.relation_presence_rate});
  auto carries = [&](double rate) { return top > 0.0 && bernoulli(carrier_rng, rate / top); };
  const bool pose_carries = carries(p.pose_presence_rate);
  const bool bg_carries = carries(p.background_presence_rate);
  const bool rel_carries = carries(p.relation_presence_rate);

  auto coarse_rng = make_stream(p.seed, index, kCoarseField);
  const auto mu = normal_vector(d, 0.3, coarse_rng);
  v.coarse_frames = Tensor2(n, d);
  std::normal_distribution<double> noise(0.0, p.noise);
  for (std::size_t t = 0; t < n; ++t) {
    auto row = v.coarse_frames.row(t);
    for (std::size_t i = 0; i < d; ++i) row[i] = mu[i] + noise(coarse_rng);
    if (v.per_frame_labels[t]) {
      add_scaled(row, dirs.threat, p.coarse_signal);
      add_scaled(row, dirs.cause[cause[t]], p.cause_signal);
    }
  }

  auto bg_rng = make_stream(p.seed, index, kBackgroundField);
  const auto nu = normal_vector(d, 0.3, bg_rng);
  v.background = Tensor2(n, d);
  v.background_present = bg_on;
  for (std::size_t t = 0; t < n; ++t) {
    if (!bg_on[t]) continue;
    auto row = v.background.row(t);
    for (std::size_t i = 0; i < d; ++i) row[i] = nu[i] + noise(bg_rng);
    if (v.per_frame_labels[t] && bg_carries) add_scaled(row, dirs.background, p.fine_signal);
  }

  auto pose_rng = make_stream(p.seed, index, kPoseField);
  const double scale = uniform(pose_rng, 0.3, 0.6);
  const Point2 origin{uniform(pose_rng, 0.0, 1.0 - scale), uniform(pose_rng, 0.0, 1.0 - scale)};
  const double blend = std::min(1.0, 0.5 * p.fine_signal);
  v.poses.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    if (!pose_on[t]) continue;
    const bool threat = v.per_frame_labels[t] && pose_carries;
    v.poses[t] = draw_pose(threat, blend, scale, origin, 0.1 * p.noise * scale, pose_rng);
  }

  auto scene_rng = make_stream(p.seed, index, kSceneField);
  v.scenes.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    if (!rel_on[t]) continue;
    v.scenes[t] = draw_scene(v.per_frame_labels[t] && rel_carries, cause[t], scene_rng);
  }

  v.patch_seed = stream_seed(p.seed, index, kPatchField);
  return v;
}

std::vector<SyntheticVideo> generate_dataset(const GenProfile& profile) {
  profile.validate();
  std::vector<SyntheticVideo> out;
  out.reserve(profile.video_count);
  for (std::size_t i = 0; i < profile.video_count; ++i) out.push_back(generate_video(profile, i));
  return out;
}

Tensor2 frame_patches(const SyntheticVideo& video, std::size_t frame, PatchGrid grid) {
  if (frame >= video.frame_count()) {
    throw ContractError("frame_patches: frame " + std::to_string(frame) + " of " +
                        std::to_string(video.frame_count()));
  }
  const std::size_t d = video.coarse_frames.cols();
  static thread_local std::size_t cached_dim = 0;
  static thread_local Directions dirs;
  if (cached_dim != d) {
    dirs = directions(d);
    cached_dim = d;
  }
  auto rng = make_stream(video.patch_seed, frame, 0);
  std::normal_distribution<double> noise(0.0, 0.3);
  Tensor2 out(grid.count(), d);
  const auto token = video.coarse_frames.row(frame);
  const SceneGraph& scene = frame < video.scenes.size() ? video.scenes[frame] : SceneGraph{};
  for (std::size_t p = 0; p < grid.count(); ++p) {
    auto row = out.row(p);
    for (std::size_t i = 0; i < d; ++i) row[i] = token[i] + noise(rng);
    const Point2 c = patch_center(p, grid);
    for (const Entity& e : scene.entities) {
      if (!e.box.contains(c.x, c.y)) continue;
      const double strength = e.category >= kNormalCategories ? 2.0 : 1.0;
      add_scaled(row, dirs.appearance[e.category % kEntityCategoryCount], strength);
    }
  }
  return out;
}

std::vector<Tensor2> video_patches(const SyntheticVideo& video, PatchGrid grid) {
  std::vector<Tensor2> out;
  out.reserve(video.frame_count());
  for (std::size_t t = 0; t < video.frame_count(); ++t) {
    out.push_back(frame_patches(video, t, grid));
  }
  return out;
}

ModalityRates modality_rates(std::span<const SyntheticVideo> videos) {
  ModalityRates r;
  double frames = 0.0;
  double threat_videos = 0.0;
  for (const SyntheticVideo& v : videos) {
    for (std::size_t t = 0; t < v.frame_count(); ++t) {
      r.pose += v.poses[t].has_value() ? 1.0 : 0.0;
      r.background += v.background_present[t] ? 1.0 : 0.0;
      r.relation += v.scenes[t].entities.empty() ? 0.0 : 1.0;
      r.threat_frames += v.per_frame_labels[t] ? 1.0 : 0.0;
    }
    frames += static_cast<double>(v.frame_count());
    threat_videos += v.ground_truth.empty() ? 0.0 : 1.0;
  }
  if (frames > 0.0) {
    r.pose /= frames;
    r.background /= frames;
    r.relation /= frames;
    r.threat_frames /= frames;
  }
  if (!videos.empty()) r.threat_videos = threat_videos / static_cast<double>(videos.size());
  return r;
}

void validate_video(const SyntheticVideo& v) {
  const std::size_t n = v.frame_count();
  const std::string where = "video " + std::to_string(v.id) + ": ";
  if (n == 0) throw DataError(where + "no frames");
  if (v.poses.size() != n || v.scenes.size() != n || v.background_present.size() != n ||
      v.coarse_frames.rows() != n || v.background.rows() != n) {
    throw DataError(where + "stream lengths disagree with " + std::to_string(n) + " frames");
  }
  if (v.background.cols() != v.coarse_frames.cols()) {
    throw DataError(where + "background width differs from coarse width");
  }
  std::vector<std::uint8_t> expected(n, 0);
  double prev_end = -1.0;
  for (const auto& g : v.ground_truth) {
    if (!(g.start >= 0.0 && g.start < g.end && g.end <= static_cast<double>(n))) {
      throw DataError(where + "interval outside [0, duration]");
    }
    if (g.start < prev_end) throw DataError(where + "intervals overlap or are unsorted");
    if (g.start != std::floor(g.start) || g.end != std::floor(g.end)) {
      throw DataError(where + "interval bounds must be whole seconds");
    }
    if (g.cause >= kMaxCauses) throw DataError(where + "cause id out of range");
    prev_end = g.end;
    for (auto t = static_cast<std::size_t>(g.start); t < static_cast<std::size_t>(g.end); ++t) {
      expected[t] = 1;
    }
  }
  if (expected != v.per_frame_labels) {
    throw DataError(where + "per-frame labels disagree with intervals");
  }
  for (std::size_t t = 0; t < n; ++t) {
    validate_scene(v.scenes[t], t);
    if (v.scenes[t].entities.size() > kMaxEntities ||
        v.scenes[t].relations.size() > kMaxRelations) {
      throw DataError(where + "scene graph too large at frame " + std::to_string(t));
    }
    if (!v.background_present[t]) {
      for (double x : v.background.row(t)) {
        if (x != 0.0) throw DataError(where + "absent background row is not zero");
      }
    }
  }
}

const std::vector<std::string>& cause_templates() {
  static const std::vector<std::string> templates{
      "a person fires a gun at the door",
      "two vehicles collide at the intersection",
      "a person breaks into a parked car",
      "a group of people start a violent fight",
      "a person sets fire to a building",
      "a person snatches a bag from a pedestrian",
      "a person smashes a shop window",
      "a person falls from a height",
  };
  return templates;
}

const std::string& cause_text(std::size_t cause) {
  const auto& t = cause_templates();
  if (cause >= t.size()) throw ContractError("unknown cause id " + std::to_string(cause));
  return t[cause];
}

namespace {

std::string seconds(double s) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, s);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string attribution_text(std::vector<GroundTruthSegment> segments) {
  if (segments.empty()) return std::string(kEmptySetResponse);
  std::stable_sort(segments.begin(), segments.end(),
                   [](const auto& a, const auto& b) { return a.start < b.start; });
  std::string out;
  for (const auto& g : segments) {
    if (!out.empty()) out += " ";
    std::string text = cause_text(g.cause);
    text[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(text[0])));
    out += text + ".";
  }
  return out;
}

InstructionRecord render_instructions(const SyntheticVideo& video) {
  InstructionRecord r;
  r.video_id = video.id;
  r.identify_prompt = "Are there any threats in this video?";
  r.locate_prompt = "When does each threat occur?";
  r.attribute_prompt = "What causes each threat?";
  auto gt = video.ground_truth;
  std::stable_sort(gt.begin(), gt.end(), [](const auto& a, const auto& b) {
    return a.start < b.start;
  });
  r.attribute_response = attribution_text(gt);
  if (gt.empty()) {
    r.identify_response = kNoThreatResponse;
    r.locate_response = kEmptySetResponse;
    return r;
  }
  r.identify_response = gt.size() == 1
                            ? std::string("Yes, there is 1 threat in the video.")
                            : "Yes, there are " + std::to_string(gt.size()) +
                                  " threats in the video.";
  for (const auto& g : gt) {
    if (!r.locate_response.empty()) r.locate_response += " ";
    r.locate_response += "A threat occurs between " + seconds(g.start) + " and " +
                         seconds(g.end) + " seconds.";
  }
  return r;
}

}  // namespace uprm
