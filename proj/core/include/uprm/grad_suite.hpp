#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "uprm/grad_check.hpp"

namespace uprm {

/// A named gradient check on randomly drawn inputs; the seed fixes the
/// instance.
struct GradCase {
  std::string name;
  std::function<GradCheckReport(std::uint64_t seed, const GradCheckOptions&)> run;
};

/// Every differentiable building block plus the assembled model at tiny
/// sizes.
const std::vector<GradCase>& grad_cases();

struct GradSuiteRow {
  std::string name;
  std::size_t seeds = 0;
  std::size_t passed_seeds = 0;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  /// Description of the first failing coordinate, empty when all passed.
  std::string first_failure;

  bool passed() const noexcept { return passed_seeds == seeds; }
};

/// Runs each selected case (all when `only` is empty) on seeds
/// first_seed .. first_seed + seeds − 1. Throws ConfigError for an unknown
/// case name.
std::vector<GradSuiteRow> run_grad_suite(std::size_t seeds, const GradCheckOptions& options,
                                         const std::vector<std::string>& only = {},
                                         std::uint64_t first_seed = 0);

}  // namespace uprm
