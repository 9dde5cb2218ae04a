#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "uprm/datagen.hpp"
#include "uprm/model.hpp"
#include "uprm/optim.hpp"
#include "uprm/router.hpp"
#include "uprm/segments.hpp"

namespace uprm {

struct TrainConfig {
  AdamWConfig optim;
  std::size_t batch_size = 8;
  std::size_t epochs = 1;
  double alpha = kDefaultTradeoffAlpha;
  std::uint64_t seed = 0;
  /// 0 selects default_thread_count().
  std::size_t threads = 0;

  void validate() const;
};

struct TrainStep {
  std::size_t step = 0;
  double loss = 0.0;
  double task = 0.0;
  double tradeoff = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<TrainStep> trace;
};

using StepCallback = std::function<void(const TrainStep&)>;

/// Minimises L_ce + alpha·L_z with AdamW. Batches are drawn from a seeded
/// per-epoch shuffle; the last partial batch is kept and the batch gradient
/// is the mean over its videos, summed in video-id order. Throws
/// TrainingError with the step index when the loss stops being finite.
TrainResult train(ModelParams params, std::span<const SyntheticVideo> videos,
                  const ModelConfig& model, const TrainConfig& config,
                  const StepCallback& on_step = {});

/// Gradient of the per-video loss, for tests and the gradient checker.
struct LossAndGradient {
  double total = 0.0;
  double task = 0.0;
  double tradeoff = 0.0;
  ModelParams gradient;
};

LossAndGradient loss_and_gradient(const ModelParams& params, const PreparedVideo& video,
                                  const ModelConfig& model, double alpha,
                                  const AdapterDropout* dropout = nullptr);

/// Maximal runs of frames with probability ≥ threshold become [first,
/// last + 1). Confidence is the mean in-run probability; the cause is the
/// argmax of the mean in-run cause logits, ties to the smallest id. Throws
/// ContractError for probabilities outside [0, 1].
std::vector<SegmentPrediction> decode_segments(std::span<const double> probabilities,
                                               const Tensor2& cause_logits,
                                               double threshold = 0.5);

struct PredictionRun {
  std::vector<VideoPrediction> predictions;
  std::vector<RouterDecision> routes;
  std::vector<std::vector<double>> probabilities;
};

/// Forward pass over every video, parallel across videos, results in input
/// order.
PredictionRun predict(const ModelParams& params, std::span<const SyntheticVideo> videos,
                      const ModelConfig& model, double threshold = 0.5, std::size_t threads = 0);

}  // namespace uprm
