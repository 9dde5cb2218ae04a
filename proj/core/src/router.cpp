#include "uprm/router.hpp"

#include <cmath>
#include <string>

#include "uprm/errors.hpp"

namespace uprm {

RouterParams make_router(std::size_t token_dim, std::size_t hidden, std::mt19937_64& rng) {
  return {make_ffn(token_dim, hidden, kFineExpertCount, rng), make_linear(token_dim, 1, rng)};
}

RouteVars route_weights(Tape& t, Var h, const FfnWeights<Var>& router) {
  Var logits = ffn_forward(t, h, router);
  if (t.value(logits).cols() != kFineExpertCount) {
    throw DimensionError("router emits " + std::to_string(t.value(logits).cols()) +
                         " logits, expected " + std::to_string(kFineExpertCount));
  }
  return {softmax_rows(t, logits), logits};
}

std::pair<Tensor2, Tensor2> route_weights(const Tensor2& h, const FfnParams& router) {
  check_ffn(router);
  Tape t(false);
  const auto w = bind(t, router);
  const RouteVars r = route_weights(t, t.constant(h), w);
  return {t.value(r.weights), t.value(r.fine_logits)};
}

Tensor2 gated_combine(const Tensor2& weights, std::span<const Tensor2> fine_outputs,
                      const Tensor2& coarse_output) {
  Tape t(false);
  std::vector<Var> experts;
  for (const auto& e : fine_outputs) experts.push_back(t.constant(e));
  return t.value(gated_combine(t, t.constant(weights), experts, t.constant(coarse_output)));
}

double tradeoff_loss(const Tensor2& raw_fine_logits, std::span<const double> raw_coarse_logit) {
  Tape t(false);
  Var out = tradeoff_loss(t, t.constant(raw_fine_logits),
                          t.constant(Tensor2::column_vector(raw_coarse_logit)));
  return t.value(out)[0];
}

double total_loss(double task_loss, double lz, double alpha) { return task_loss + alpha * lz; }

double ExpertUtilization::fine_entropy() const {
  double total = 0.0;
  for (std::size_t i = 0; i < kFineExpertCount; ++i) total += shares[i];
  if (total <= 0.0) return 0.0;
  double h = 0.0;
  for (std::size_t i = 0; i < kFineExpertCount; ++i) {
    const double p = shares[i] / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

ExpertUtilization expert_utilization(std::span<const RouterDecision> decisions) {
  if (decisions.empty()) throw ContractError("expert_utilization: no router decisions");
  std::array<double, kFineExpertCount + 1> sums{};
  std::size_t tokens = 0;
  for (const RouterDecision& d : decisions) {
    if (d.weights.cols() != kFineExpertCount || d.gate.size() != d.weights.rows()) {
      throw DimensionError("expert_utilization: decision with weights " +
                           d.weights.shape_string() + " and " + std::to_string(d.gate.size()) +
                           " gates");
    }
    for (std::size_t r = 0; r < d.weights.rows(); ++r) {
      for (std::size_t i = 0; i < kFineExpertCount; ++i) sums[i] += d.weights(r, i);
      sums[kFineExpertCount] += 1.0 - d.gate[r];
    }
    tokens += d.weights.rows();
  }
  if (tokens == 0) throw ContractError("expert_utilization: decisions hold no tokens");
  ExpertUtilization u;
  double total = 0.0;
  for (std::size_t i = 0; i < sums.size(); ++i) {
    u.shares[i] = sums[i] / static_cast<double>(tokens);
    total += u.shares[i];
  }
  for (double& s : u.shares) s /= total;
  return u;
}

}  // namespace uprm
