#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace uprm {

/// Predicted threat interval [start, end) in seconds.
struct SegmentPrediction {
  double start = 0.0;
  double end = 0.0;
  double confidence = 0.0;
  std::size_t cause = 0;
  friend bool operator==(const SegmentPrediction&, const SegmentPrediction&) = default;
};

/// Everything the evaluator needs from a detector for one video.
struct VideoPrediction {
  std::size_t video_id = 0;
  std::vector<std::uint8_t> frame_labels;
  std::vector<SegmentPrediction> segments;
  friend bool operator==(const VideoPrediction&, const VideoPrediction&) = default;
};

}  // namespace uprm
