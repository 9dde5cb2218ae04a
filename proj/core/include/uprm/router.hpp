#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "uprm/layers.hpp"
#include "uprm/tape.hpp"
#include "uprm/tensor.hpp"

namespace uprm {

/// Pose, relation and background experts.
inline constexpr std::size_t kFineExpertCount = 3;
inline constexpr double kDefaultTradeoffAlpha = 0.05;

/// Router FFN (token → N fine logits) plus the scalar coarse-logit head
/// used by the trade-off loss.
template <class T>
struct RouterWeights {
  FfnWeights<T> ffn;
  LinearWeights<T> coarse_head;

  template <class F, class... S>
  static void fields(F&& f, S&... s) {
    f("ffn", s.ffn...);
    f("coarse_head", s.coarse_head...);
  }
};
using RouterParams = RouterWeights<Tensor2>;

RouterParams make_router(std::size_t token_dim, std::size_t hidden, std::mt19937_64& rng);

struct RouterDecision {
  Tensor2 weights;                  // n × N, rows on the simplex
  std::vector<double> gate;         // n, row maxima of `weights`
  Tensor2 fused;                    // n × d
  Tensor2 raw_fine_logits;          // n × N
  std::vector<double> raw_coarse_logit;  // n
};

struct RouteVars {
  Var weights;
  Var fine_logits;
};

RouteVars route_weights(Tape& t, Var h, const FfnWeights<Var>& router);
/// Returns (softmax weights, raw logits).
std::pair<Tensor2, Tensor2> route_weights(const Tensor2& h, const FfnParams& router);

/// z_t = Σᵢ R_t,i·E_i,t + (1 − max_i R_t,i)·E_g,t.
Tensor2 gated_combine(const Tensor2& weights, std::span<const Tensor2> fine_outputs,
                      const Tensor2& coarse_output);

/// (1/T) Σ_t (log(Σ_j exp(x_t,j) + exp(x_t,g)))².
double tradeoff_loss(const Tensor2& raw_fine_logits, std::span<const double> raw_coarse_logit);

double total_loss(double task_loss, double lz, double alpha = kDefaultTradeoffAlpha);

/// Mean routing shares: pose, relation, background, coarse. Normalised to
/// sum to 1; the coarse share is the mean of (1 − G).
struct ExpertUtilization {
  std::array<double, kFineExpertCount + 1> shares{};

  /// Shannon entropy (nats) of the fine shares renormalised among
  /// themselves.
  double fine_entropy() const;
};

ExpertUtilization expert_utilization(std::span<const RouterDecision> decisions);

}  // namespace uprm
