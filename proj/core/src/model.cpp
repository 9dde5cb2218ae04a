#include "uprm/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "uprm/errors.hpp"
#include "uprm/params.hpp"
#include "uprm/rng.hpp"

namespace uprm {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_hpe: return "no-hpe";
    case Variant::no_ore: return "no-ore";
    case Variant::no_vbe: return "no-vbe";
    case Variant::no_upe: return "no-upe";
  }
  return "full";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::full, Variant::no_hpe, Variant::no_ore, Variant::no_vbe,
                    Variant::no_upe}) {
    if (variant_name(v) == name) return v;
  }
  throw ConfigError("unknown model variant '" + std::string(name) + "'");
}

void LoraConfig::validate() const {
  if (rank == 0) throw ConfigError("adapter rank must be at least 1");
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("adapter scale must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("adapter dropout must lie in [0, 1)");
}

void ModelConfig::validate() const {
  const ExpertDims& e = experts;
  if (e.token_dim == 0 || e.pose_dim == 0 || e.ffn_hidden == 0) {
    throw ConfigError("model widths must be positive");
  }
  if (e.heads == 0 || e.token_dim % e.heads != 0) {
    throw ConfigError("token width " + std::to_string(e.token_dim) + " is not divisible by " +
                      std::to_string(e.heads) + " heads");
  }
  if (e.gtl_layers == 0) throw ConfigError("relation expert needs at least one layer");
  if (e.grid.rows == 0 || e.grid.cols == 0) throw ConfigError("patch grid must be non-empty");
  if (!std::isfinite(e.temporal_slope) || e.temporal_slope < 0.0) {
    throw ConfigError("temporal slope must be finite and non-negative");
  }
  if (router_hidden == 0 || head_hidden == 0) throw ConfigError("hidden widths must be positive");
  if (cause_count == 0) throw ConfigError("cause_count must be positive");
  lora.validate();
}

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.experts.token_dim;
  auto rng = make_stream(seed, 0, 0x6d6f64656cULL);
  ModelParams m;
  m.hpe = make_hpe(config.experts, rng);
  m.ore = make_ore(config.experts, rng);
  m.vbe = make_vbe(config.experts, rng);
  m.cve = make_cve(config.experts, rng);
  m.router = make_router(d, config.router_hidden, rng);
  m.head.hidden = make_linear(d, config.head_hidden, rng);
  m.head.output = make_linear(config.head_hidden, 1 + config.cause_count, rng);
  if (config.lora.enabled) {
    const std::size_t r = config.lora.rank;
    m.head.adapters.push_back(
        {init_uniform(d, r, rng), Tensor2(r, config.head_hidden)});
    m.head.adapters.push_back(
        {init_uniform(config.head_hidden, r, rng), Tensor2(r, 1 + config.cause_count)});
  }
  return m;
}

void check_model(const ModelParams& params, const ModelConfig& config) {
  if (params.ore.layers.size() != config.experts.gtl_layers) {
    throw ConfigError("model has " + std::to_string(params.ore.layers.size()) +
                      " relation layers, configuration expects " +
                      std::to_string(config.experts.gtl_layers));
  }
  const std::size_t adapters = config.lora.enabled ? 2 : 0;
  if (params.head.adapters.size() != adapters) {
    throw ConfigError("model has " + std::to_string(params.head.adapters.size()) +
                      " adapters, configuration expects " + std::to_string(adapters));
  }
  const ModelParams reference = init_model(config, 0);
  walk(
      "",
      [](const std::string& name, const Tensor2& ref, const Tensor2& have) {
        if (!ref.same_shape(have)) {
          throw ConfigError("parameter " + name + " is " + have.shape_string() + ", expected " +
                            ref.shape_string());
        }
      },
      reference, params);
}

bool is_trainable(const std::string& name, const ModelConfig& config) {
  if (!config.lora.enabled) return true;
  return !(name.starts_with("head.hidden.") || name.starts_with("head.output."));
}

Var lora_apply(Tape& t, Var x, Var weight, const LoraWeights<Var>& adapter,
               const LoraConfig& config, const Tensor2* dropout_mask) {
  const Tensor2& xv = t.value(x);
  const Tensor2& wv = t.value(weight);
  const Tensor2& av = t.value(adapter.down);
  const Tensor2& bv = t.value(adapter.up);
  if (xv.cols() != wv.rows() || av.rows() != wv.rows() || av.cols() != bv.rows() ||
      bv.cols() != wv.cols()) {
    throw DimensionError("lora_apply: x " + xv.shape_string() + ", W " + wv.shape_string() +
                         ", A " + av.shape_string() + ", B " + bv.shape_string());
  }
  if (dropout_mask && !dropout_mask->same_shape(xv)) {
    throw DimensionError("lora_apply: dropout mask " + dropout_mask->shape_string() +
                         " for input " + xv.shape_string());
  }
  Var base = matmul(t, x, weight);
  if (!config.enabled) return base;
  Var dropped = dropout_mask ? hadamard(t, x, t.constant(*dropout_mask)) : x;
  Var delta = matmul(t, matmul(t, dropped, adapter.down), adapter.up);
  return add(t, base, scale(t, delta, config.factor()));
}

Tensor2 lora_apply(const Tensor2& weight, const Tensor2& down, const Tensor2& up,
                   const LoraConfig& config, const Tensor2& x) {
  Tape t(false);
  const LoraWeights<Var> adapter{t.constant(down), t.constant(up)};
  return t.value(lora_apply(t, t.constant(x), t.constant(weight), adapter, config));
}

std::vector<std::size_t> frame_causes(const SyntheticVideo& video) {
  std::vector<std::size_t> causes(video.frame_count(), 0);
  for (const auto& g : video.ground_truth) {
    const auto end = std::min(video.frame_count(), static_cast<std::size_t>(g.end));
    for (auto f = static_cast<std::size_t>(g.start); f < end; ++f) causes[f] = g.cause;
  }
  return causes;
}

PreparedVideo prepare_video(const SyntheticVideo& video, const ModelConfig& config) {
  const std::size_t d = config.experts.token_dim;
  const std::size_t n = video.frame_count();
  if (video.coarse_frames.cols() != d) {
    throw ConfigError("video " + std::to_string(video.id) + " has token width " +
                      std::to_string(video.coarse_frames.cols()) + ", model expects " +
                      std::to_string(d));
  }
  PreparedVideo p;
  p.id = video.id;
  p.coarse = video.coarse_frames;
  p.poses = video.poses;
  p.background = video.background;
  p.background_present = video.background_present;
  std::vector<SceneGraph> scenes = video.scenes;
  switch (config.variant) {
    case Variant::no_hpe:
      std::fill(p.poses.begin(), p.poses.end(), std::nullopt);
      break;
    case Variant::no_ore:
      std::fill(scenes.begin(), scenes.end(), SceneGraph{});
      break;
    case Variant::no_vbe:
      std::fill(p.background_present.begin(), p.background_present.end(), 0);
      p.background = Tensor2(n, d);
      break;
    default:
      break;
  }
  std::vector<Tensor2> patches(n);
  for (std::size_t f = 0; f < n; ++f) {
    if (!scenes[f].entities.empty()) patches[f] = frame_patches(video, f, config.experts.grid);
  }
  p.relations = prepare_relation_inputs(patches, scenes, config.experts.grid, d);
  p.labels.assign(video.per_frame_labels.begin(), video.per_frame_labels.end());
  p.causes = frame_causes(video);
  p.threat_mask.assign(video.per_frame_labels.begin(), video.per_frame_labels.end());
  return p;
}

ForwardVars model_forward(Tape& t, const ModelWeights<Var>& w, const PreparedVideo& video,
                          const ModelConfig& config, const AdapterDropout* dropout) {
  ForwardVars out;
  Var x = t.constant(video.coarse);
  out.coarse_output = coarse_expert_forward(t, x, w.cve);
  const RouteVars route = route_weights(t, x, w.router.ffn);
  out.route_weights = route.weights;
  out.fine_logits = route.fine_logits;
  out.coarse_logit = linear(t, x, w.router.coarse_head.weight, w.router.coarse_head.bias);
  if (config.variant == Variant::no_upe) {
    out.fused = out.coarse_output;
  } else {
    Var pose = pose_expert_forward(t, x, video.poses, w.hpe, config.experts.heads,
                                   config.experts.temporal_slope);
    Var relation = relation_expert_forward(t, video.relations, w.ore);
    Var background = background_expert_forward(t, t.constant(video.background),
                                               video.background_present, w.vbe);
    out.fused = gated_combine(t, route.weights, {pose, relation, background}, out.coarse_output);
  }

  const HeadWeights<Var>& head = w.head;
  const bool adapted = config.lora.enabled;
  Var hidden = adapted ? lora_apply(t, out.fused, head.hidden.weight, head.adapters.at(0),
                                    config.lora, dropout ? &dropout->hidden : nullptr)
                       : matmul(t, out.fused, head.hidden.weight);
  hidden = relu(t, add_row(t, hidden, head.hidden.bias));
  Var logits = adapted ? lora_apply(t, hidden, head.output.weight, head.adapters.at(1),
                                    config.lora, dropout ? &dropout->output : nullptr)
                       : matmul(t, hidden, head.output.weight);
  logits = add_row(t, logits, head.output.bias);
  out.threat_logits = slice_cols(t, logits, 0, 1);
  out.cause_logits = slice_cols(t, logits, 1, config.cause_count);
  return out;
}

TaskLossVars training_loss(Tape& t, const ForwardVars& out, const PreparedVideo& video,
                           const ModelConfig& config, double alpha) {
  TaskLossVars l;
  l.task = add(t, bce_with_logits(t, out.threat_logits, video.labels),
               masked_cross_entropy(t, out.cause_logits, video.causes, video.threat_mask));
  if (config.variant == Variant::no_upe || alpha == 0.0) {
    l.tradeoff = config.variant == Variant::no_upe
                     ? t.constant(Tensor2(1, 1))
                     : tradeoff_loss(t, out.fine_logits, out.coarse_logit);
    l.total = l.task;
    return l;
  }
  l.tradeoff = tradeoff_loss(t, out.fine_logits, out.coarse_logit);
  l.total = add(t, l.task, scale(t, l.tradeoff, alpha));
  return l;
}

ModelOutput model_forward(const ModelParams& params, const PreparedVideo& video,
                          const ModelConfig& config) {
  Tape t(false);
  const auto w = bind(t, params);
  const ForwardVars f = model_forward(t, w, video, config);
  ModelOutput out;
  const Tensor2& logits = t.value(f.threat_logits);
  out.probabilities.resize(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) out.probabilities[i] = sigmoid(logits[i]);
  out.cause_logits = t.value(f.cause_logits);
  RouterDecision& r = out.router;
  r.weights = t.value(f.route_weights);
  r.gate.resize(r.weights.rows());
  for (std::size_t i = 0; i < r.weights.rows(); ++i) {
    const auto row = r.weights.row(i);
    r.gate[i] = *std::max_element(row.begin(), row.end());
  }
  r.fused = t.value(f.fused);
  r.raw_fine_logits = t.value(f.fine_logits);
  const Tensor2& coarse = t.value(f.coarse_logit);
  r.raw_coarse_logit.assign(coarse.values().begin(), coarse.values().end());
  return out;
}

ModelOutput model_forward(const ModelParams& params, const SyntheticVideo& video,
                          const ModelConfig& config) {
  return model_forward(params, prepare_video(video, config), config);
}

double task_loss(std::span<const double> probabilities, const Tensor2& cause_logits,
                 const SyntheticVideo& video) {
  const std::size_t n = video.frame_count();
  if (probabilities.size() != n || cause_logits.rows() != n) {
    throw ContractError("task_loss: " + std::to_string(probabilities.size()) +
                        " probabilities and " + std::to_string(cause_logits.rows()) +
                        " cause rows for " + std::to_string(n) + " frames");
  }
  if (n == 0) return 0.0;
  double bce = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp(probabilities[i], kProbabilityClip, 1.0 - kProbabilityClip);
    bce -= video.per_frame_labels[i] ? std::log(p) : std::log(1.0 - p);
  }
  bce /= static_cast<double>(n);
  const auto causes = frame_causes(video);
  double ce = 0.0;
  std::size_t threat = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!video.per_frame_labels[i]) continue;
    const auto row = cause_logits.row(i);
    if (causes[i] >= row.size()) {
      throw ContractError("task_loss: cause " + std::to_string(causes[i]) + " without a logit");
    }
    ce += log_sum_exp(row) - row[causes[i]];
    ++threat;
  }
  return threat ? bce + ce / static_cast<double>(threat) : bce;
}

}  // namespace uprm
