#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "uprm/datagen.hpp"
#include "uprm/experts.hpp"
#include "uprm/layers.hpp"
#include "uprm/router.hpp"
#include "uprm/tape.hpp"

namespace uprm {

/// Model variants used by the ablation study. `no_hpe`, `no_ore` and
/// `no_vbe` feed the expert an all-absent stream so it emits its null
/// token; `no_upe` bypasses the router and uses the coarse expert alone.
enum class Variant { full, no_hpe, no_ore, no_vbe, no_upe };

std::string_view variant_name(Variant v);
/// Accepts "full", "no-hpe", "no-ore", "no-vbe", "no-upe". Throws ConfigError.
Variant parse_variant(std::string_view name);

struct LoraConfig {
  std::size_t rank = 16;
  double scale = 32.0;
  double dropout = 0.05;
  bool enabled = false;

  double factor() const noexcept { return scale / static_cast<double>(rank); }
  void validate() const;
  friend bool operator==(const LoraConfig&, const LoraConfig&) = default;
};

struct ModelConfig {
  ExpertDims experts;
  std::size_t router_hidden = 64;
  std::size_t head_hidden = 64;
  std::size_t cause_count = 8;
  LoraConfig lora;
  Variant variant = Variant::full;

  void validate() const;
};

/// Low-rank adapter around a dense weight: A (in × r), B (r × out).
template <class T>
struct LoraWeights {
  T down;
  T up;

  template <class F, class... S>
  static void fields(F&& f, S&... s) {
    f("down", s.down...);
    f("up", s.up...);
  }
};

/// Per-token detection head: relu(z·W1 + b1)·W2 + b2 → [threat, causes...].
/// `adapters` is empty unless low-rank adaptation is enabled, in which case
/// it holds one adapter per dense layer.
template <class T>
struct HeadWeights {
  LinearWeights<T> hidden;
  LinearWeights<T> output;
  std::vector<LoraWeights<T>> adapters;

  template <class F, class... S>
  static void fields(F&& f, S&... s) {
    f("hidden", s.hidden...);
    f("output", s.output...);
    f("adapters", s.adapters...);
  }
};

template <class T>
struct ModelWeights {
  HpeWeights<T> hpe;
  OreWeights<T> ore;
  VbeWeights<T> vbe;
  CveWeights<T> cve;
  RouterWeights<T> router;
  HeadWeights<T> head;

  template <class F, class... S>
  static void fields(F&& f, S&... s) {
    f("hpe", s.hpe...);
    f("ore", s.ore...);
    f("vbe", s.vbe...);
    f("cve", s.cve...);
    f("router", s.router...);
    f("head", s.head...);
  }
};
using ModelParams = ModelWeights<Tensor2>;

ModelParams init_model(const ModelConfig& config, std::uint64_t seed);
/// Throws ConfigError when any stored shape disagrees with `config`.
void check_model(const ModelParams& params, const ModelConfig& config);
/// False for base head weights when adapters are enabled.
bool is_trainable(const std::string& name, const ModelConfig& config);

/// x·W + factor·(dropout(x)·A)·B. `dropout_mask` (same shape as x, entries
/// 0 or 1/(1−p)) is applied only to the adapter branch; pass null at
/// evaluation.
Var lora_apply(Tape& t, Var x, Var weight, const LoraWeights<Var>& adapter,
               const LoraConfig& config, const Tensor2* dropout_mask = nullptr);
/// Evaluation form (no dropout). Throws DimensionError on a broken chain.
Tensor2 lora_apply(const Tensor2& weight, const Tensor2& down, const Tensor2& up,
                   const LoraConfig& config, const Tensor2& x);

/// Parameter-independent inputs of one video, prepared once.
struct PreparedVideo {
  std::size_t id = 0;
  Tensor2 coarse;
  PoseGraphSequence poses;
  RelationInputs relations;
  Tensor2 background;
  std::vector<std::uint8_t> background_present;
  std::vector<double> labels;
  std::vector<std::size_t> causes;
  std::vector<bool> threat_mask;
};

/// Applies the variant's stream blanking. Throws ConfigError when the video
/// width differs from the configured token width.
PreparedVideo prepare_video(const SyntheticVideo& video, const ModelConfig& config);

/// Dropout masks for the two adapter branches of one training forward.
struct AdapterDropout {
  Tensor2 hidden;
  Tensor2 output;
};

struct ForwardVars {
  Var threat_logits;  // n × 1
  Var cause_logits;   // n × C
  Var route_weights;  // n × N
  Var fine_logits;    // n × N
  Var coarse_logit;   // n × 1
  Var fused;          // n × d
  Var coarse_output;  // n × d
};

ForwardVars model_forward(Tape& t, const ModelWeights<Var>& w, const PreparedVideo& video,
                          const ModelConfig& config, const AdapterDropout* dropout = nullptr);

struct TaskLossVars {
  Var task;
  Var tradeoff;
  Var total;
};

/// L = L_ce + alpha·L_z. L_z is zero for the router-free variant.
TaskLossVars training_loss(Tape& t, const ForwardVars& out, const PreparedVideo& video,
                           const ModelConfig& config, double alpha);

struct ModelOutput {
  std::vector<double> probabilities;
  Tensor2 cause_logits;
  RouterDecision router;
};

ModelOutput model_forward(const ModelParams& params, const SyntheticVideo& video,
                          const ModelConfig& config);
ModelOutput model_forward(const ModelParams& params, const PreparedVideo& video,
                          const ModelConfig& config);

inline constexpr double kProbabilityClip = 1e-12;

/// Mean per-frame binary cross-entropy on the threat labels (probabilities
/// clipped to [1e-12, 1 − 1e-12]) plus mean categorical cross-entropy of
/// the cause logits over threat frames.
double task_loss(std::span<const double> probabilities, const Tensor2& cause_logits,
                 const SyntheticVideo& video);

/// Per-frame cause ids (0 outside threats) and the threat mask.
std::vector<std::size_t> frame_causes(const SyntheticVideo& video);

}  // namespace uprm
