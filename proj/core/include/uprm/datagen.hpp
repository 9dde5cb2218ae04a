#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "uprm/experts.hpp"
#include "uprm/tensor.hpp"

namespace uprm {

/// Generation profile for a synthetic surveillance corpus.
///
/// Presence rates are per-frame probabilities that a modality stream is
/// available (drawn in blocks of `presence_block` frames). The coarse
/// stream is always present.
struct GenProfile {
  std::string name = "cuva-like";
  std::size_t video_count = 200;
  std::size_t frames_per_video = 64;
  double pose_presence_rate = 0.46;
  double background_presence_rate = 0.22;
  double relation_presence_rate = 0.32;
  /// Fraction of videos containing at least one threat.
  double threat_rate = 0.5;
  std::size_t cause_vocab_size = 8;
  std::uint64_t seed = 0;

  std::size_t token_dim = 32;
  std::size_t presence_block = 8;
  /// Threat offset planted along a fixed direction of the coarse tokens.
  double coarse_signal = 4.0;
  /// Cause-specific offset in the coarse tokens of threat frames.
  double cause_signal = 1.5;
  /// Strength of the threat cue in fine modalities that carry it.
  double fine_signal = 2.0;
  /// Per-frame token noise standard deviation.
  double noise = 0.3;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  friend bool operator==(const GenProfile&, const GenProfile&) = default;
};

/// "cuva-like", "ucfc-like" or "stressed". Throws ConfigError otherwise.
GenProfile builtin_profile(std::string_view name);
std::vector<std::string> builtin_profile_names();

/// Threat interval [start, end) in seconds (one frame per second).
struct GroundTruthSegment {
  double start = 0.0;
  double end = 0.0;
  std::size_t cause = 0;
  friend bool operator==(const GroundTruthSegment&, const GroundTruthSegment&) = default;
};

struct SyntheticVideo {
  std::size_t id = 0;
  PoseGraphSequence poses;
  std::vector<SceneGraph> scenes;
  Tensor2 background;                      // n × d, zero rows where absent
  std::vector<std::uint8_t> background_present;
  Tensor2 coarse_frames;                   // n × d
  std::vector<GroundTruthSegment> ground_truth;  // sorted by start
  std::vector<std::uint8_t> per_frame_labels;
  /// Seed of the per-frame patch stream used by the relation expert.
  std::uint64_t patch_seed = 0;

  std::size_t frame_count() const noexcept { return per_frame_labels.size(); }
  friend bool operator==(const SyntheticVideo&, const SyntheticVideo&) = default;
};

SyntheticVideo generate_video(const GenProfile& profile, std::size_t index);
/// Deterministic in (profile, seed); videos are generated independently.
std::vector<SyntheticVideo> generate_dataset(const GenProfile& profile);

/// Frame patches (grid.count() × d) of frame `frame`, regenerated from the
/// video's patch seed, coarse token and scene graph.
Tensor2 frame_patches(const SyntheticVideo& video, std::size_t frame, PatchGrid grid);
std::vector<Tensor2> video_patches(const SyntheticVideo& video, PatchGrid grid);

struct ModalityRates {
  double pose = 0.0;
  double background = 0.0;
  double relation = 0.0;
  double threat_videos = 0.0;
  double threat_frames = 0.0;
};

/// Empirical per-frame presence rates pooled over all frames.
ModalityRates modality_rates(std::span<const SyntheticVideo> videos);

/// Checks interval ordering and label consistency. Throws DataError.
void validate_video(const SyntheticVideo& video);

/// Fixed cause sentences keyed by cause id.
const std::vector<std::string>& cause_templates();
const std::string& cause_text(std::size_t cause);

struct InstructionRecord {
  std::size_t video_id = 0;
  std::string identify_prompt;
  std::string identify_response;
  std::string locate_prompt;
  std::string locate_response;
  std::string attribute_prompt;
  std::string attribute_response;
};

inline constexpr std::string_view kNoThreatResponse = "No threat present.";
inline constexpr std::string_view kEmptySetResponse = "None.";

InstructionRecord render_instructions(const SyntheticVideo& video);

/// Attribute response for a set of intervals: one cause sentence per
/// interval in start order, or the empty-set sentinel.
std::string attribution_text(std::vector<GroundTruthSegment> segments);

}  // namespace uprm
