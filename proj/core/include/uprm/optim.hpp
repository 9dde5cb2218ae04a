#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>

#include "uprm/errors.hpp"
#include "uprm/params.hpp"

namespace uprm {

inline constexpr double kFineTuneLearningRate = 2e-5;
inline constexpr double kDeskLearningRate = 2e-3;

struct AdamWConfig {
  double lr = kDeskLearningRate;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double warmup_ratio = 0.03;

  void validate() const;
};

/// Moment accumulators shaped like the parameters.
template <template <class> class P>
struct AdamWState {
  P<Tensor2> m;
  P<Tensor2> v;
  std::size_t step = 0;
};

/// Linear warm-up from 0 over ceil(warmup_ratio·total_steps) steps, then
/// constant. Throws ContractError when total_steps is 0.
double lr_schedule(std::size_t step, std::size_t total_steps, double base_lr,
                   double warmup_ratio);

using TrainableFilter = std::function<bool(const std::string& name)>;

/// One bias-corrected AdamW update at learning rate `lr`:
///   θ ← θ(1 − lr·λ) − lr·m̂/(√v̂ + ε).
/// Parameters rejected by `trainable` are left untouched. Throws
/// TrainingError naming the parameter when a gradient is not finite.
template <template <class> class P>
void adamw_step(AdamWState<P>& state, P<Tensor2>& params, const P<Tensor2>& grads, double lr,
                const AdamWConfig& config, const TrainableFilter& trainable = {}) {
  walk(
      "",
      [](const std::string& name, const Tensor2& g) {
        if (!g.all_finite()) throw TrainingError("non-finite gradient for " + name);
      },
      grads);
  if (state.step == 0) {
    walk(
        "",
        [](const std::string&, const Tensor2& p, Tensor2& m, Tensor2& v) {
          m = Tensor2(p.rows(), p.cols());
          v = Tensor2(p.rows(), p.cols());
        },
        params, state.m, state.v);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  const double decay = 1.0 - lr * config.weight_decay;
  walk(
      "",
      [&](const std::string& name, Tensor2& p, const Tensor2& g, Tensor2& m, Tensor2& v) {
        if (trainable && !trainable(name)) return;
        if (!p.same_shape(g) || !p.same_shape(m)) {
          throw DimensionError("adamw_step: " + name + " is " + p.shape_string() +
                               ", gradient " + g.shape_string());
        }
        for (std::size_t i = 0; i < p.size(); ++i) {
          m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
          v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
          const double mhat = m[i] / c1;
          const double vhat = v[i] / c2;
          p[i] = p[i] * decay - lr * mhat / (std::sqrt(vhat) + config.eps);
        }
      },
      params, grads, state.m, state.v);
}

}  // namespace uprm
