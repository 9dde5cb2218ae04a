#include "uprm/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "uprm/errors.hpp"
#include "uprm/parallel.hpp"
#include "uprm/params.hpp"
#include "uprm/rng.hpp"

namespace uprm {
namespace {

constexpr std::uint64_t kShuffleField = 0x73687566ULL;
constexpr std::uint64_t kDropoutField = 0x64726f70ULL;

Tensor2 dropout_mask(std::size_t rows, std::size_t cols, double p, std::mt19937_64& rng) {
  Tensor2 m(rows, cols);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep = 1.0 / (1.0 - p);
  for (double& x : m.values()) x = u(rng) < p ? 0.0 : keep;
  return m;
}

void add_into(ModelParams& acc, const ModelParams& g) {
  walk("", [](const std::string&, Tensor2& a, const Tensor2& b) { a += b; }, acc, g);
}

}  // namespace

void TrainConfig::validate() const {
  optim.validate();
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be non-negative");
}

LossAndGradient loss_and_gradient(const ModelParams& params, const PreparedVideo& video,
                                  const ModelConfig& model, double alpha,
                                  const AdapterDropout* dropout) {
  Tape t;
  const auto w = bind(t, params);
  const ForwardVars out = model_forward(t, w, video, model, dropout);
  const TaskLossVars loss = training_loss(t, out, video, model, alpha);
  LossAndGradient r;
  r.total = t.value(loss.total)[0];
  r.task = t.value(loss.task)[0];
  r.tradeoff = t.value(loss.tradeoff)[0];
  if (!std::isfinite(r.total)) return r;
  t.backward(loss.total);
  r.gradient = gradients(t, w);
  return r;
}

TrainResult train(ModelParams params, std::span<const SyntheticVideo> videos,
                  const ModelConfig& model, const TrainConfig& config,
                  const StepCallback& on_step) {
  config.validate();
  model.validate();
  check_model(params, model);
  if (videos.empty()) throw ContractError("train: empty dataset");

  std::vector<PreparedVideo> prepared(videos.size());
  parallel_for(videos.size(), config.threads,
               [&](std::size_t i) { prepared[i] = prepare_video(videos[i], model); });

  const std::size_t batches = (videos.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = batches * config.epochs;
  const TrainableFilter trainable = [&](const std::string& name) {
    return is_trainable(name, model);
  };
  const bool use_dropout = model.lora.enabled && model.lora.dropout > 0.0;

  AdamWState<ModelWeights> state;
  TrainResult result;
  std::vector<std::size_t> order(videos.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    auto shuffle_rng = make_stream(config.seed, epoch, kShuffleField);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t b = 0; b < batches; ++b, ++step) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
      // Reduction order is fixed by video id so results do not depend on
      // scheduling.
      std::sort(batch.begin(), batch.end(),
                [&](auto x, auto y) { return prepared[x].id < prepared[y].id; });

      std::vector<LossAndGradient> parts(batch.size());
      parallel_for(batch.size(), config.threads, [&](std::size_t k) {
        const PreparedVideo& v = prepared[batch[k]];
        if (!use_dropout) {
          parts[k] = loss_and_gradient(params, v, model, config.alpha);
          return;
        }
        auto rng = make_stream(stream_seed(config.seed, step, kDropoutField), v.id, 0);
        const std::size_t n = v.coarse.rows();
        AdapterDropout masks{
            dropout_mask(n, model.experts.token_dim, model.lora.dropout, rng),
            dropout_mask(n, model.head_hidden, model.lora.dropout, rng)};
        parts[k] = loss_and_gradient(params, v, model, config.alpha, &masks);
      });

      TrainStep record;
      record.step = step;
      for (const auto& p : parts) {
        record.loss += p.total;
        record.task += p.task;
        record.tradeoff += p.tradeoff;
      }
      const double inv = 1.0 / static_cast<double>(parts.size());
      record.loss *= inv;
      record.task *= inv;
      record.tradeoff *= inv;
      if (!std::isfinite(record.loss)) {
        throw TrainingError("step " + std::to_string(step) + ": loss is not finite");
      }
      ModelParams grad = std::move(parts[0].gradient);
      for (std::size_t k = 1; k < parts.size(); ++k) add_into(grad, parts[k].gradient);
      walk("", [&](const std::string&, Tensor2& g) { g *= inv; }, grad);

      const double lr = lr_schedule(step, total_steps, config.optim.lr, config.optim.warmup_ratio);
      try {
        adamw_step(state, params, grad, lr, config.optim, trainable);
      } catch (const TrainingError& e) {
        throw TrainingError("step " + std::to_string(step) + ": " + e.what());
      }
      result.trace.push_back(record);
      if (on_step) on_step(record);
    }
  }
  result.params = std::move(params);
  return result;
}

std::vector<SegmentPrediction> decode_segments(std::span<const double> probabilities,
                                               const Tensor2& cause_logits, double threshold) {
  const std::size_t n = probabilities.size();
  if (cause_logits.rows() != n) {
    throw ContractError("decode_segments: " + std::to_string(n) + " probabilities and " +
                        std::to_string(cause_logits.rows()) + " cause rows");
  }
  for (double p : probabilities) {
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError("decode_segments: probability outside [0, 1]");
  }
  std::vector<SegmentPrediction> out;
  std::size_t i = 0;
  while (i < n) {
    if (probabilities[i] < threshold) {
      ++i;
      continue;
    }
    std::size_t j = i;
    double sum = 0.0;
    std::vector<double> mean(cause_logits.cols(), 0.0);
    while (j < n && probabilities[j] >= threshold) {
      sum += probabilities[j];
      const auto row = cause_logits.row(j);
      for (std::size_t c = 0; c < row.size(); ++c) mean[c] += row[c];
      ++j;
    }
    const double len = static_cast<double>(j - i);
    SegmentPrediction s;
    s.start = static_cast<double>(i);
    s.end = static_cast<double>(j);
    s.confidence = sum / len;
    // Strict comparison keeps the smallest id on ties.
    for (std::size_t c = 1; c < mean.size(); ++c) {
      if (mean[c] / len > mean[s.cause] / len) s.cause = c;
    }
    out.push_back(s);
    i = j;
  }
  return out;
}

PredictionRun predict(const ModelParams& params, std::span<const SyntheticVideo> videos,
                      const ModelConfig& model, double threshold, std::size_t threads) {
  check_model(params, model);
  PredictionRun run;
  run.predictions.resize(videos.size());
  run.routes.resize(videos.size());
  run.probabilities.resize(videos.size());
  parallel_for(videos.size(), threads, [&](std::size_t i) {
    ModelOutput out = model_forward(params, videos[i], model);
    VideoPrediction& p = run.predictions[i];
    p.video_id = videos[i].id;
    p.frame_labels.resize(out.probabilities.size());
    for (std::size_t f = 0; f < out.probabilities.size(); ++f) {
      p.frame_labels[f] = out.probabilities[f] >= threshold ? 1 : 0;
    }
    p.segments = decode_segments(out.probabilities, out.cause_logits, threshold);
    run.routes[i] = std::move(out.router);
    run.probabilities[i] = std::move(out.probabilities);
  });
  return run;
}

}  // namespace uprm
