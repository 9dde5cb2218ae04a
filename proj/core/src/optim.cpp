#include "uprm/optim.hpp"

#include <cmath>
#include <string>

namespace uprm {

void AdamWConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw ConfigError("weight_decay must be non-negative");
  }
  if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) {
    throw ConfigError("warmup_ratio must lie in [0, 1]");
  }
}

double lr_schedule(std::size_t step, std::size_t total_steps, double base_lr,
                   double warmup_ratio) {
  if (total_steps == 0) throw ContractError("lr_schedule: total_steps must be positive");
  const auto warmup = static_cast<std::size_t>(
      std::ceil(warmup_ratio * static_cast<double>(total_steps)));
  if (step >= warmup) return base_lr;
  return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
}

}  // namespace uprm
