#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "uprm/tape.hpp"
#include "uprm/tensor.hpp"

namespace uprm {

/// Builds a scalar (1×1) on `tape` from leaves holding the checked inputs.
using ScalarFunction = std::function<Var(Tape& tape, std::span<const Var> inputs)>;

struct GradCheckOptions {
  double step = 1e-5;
  double rel_tol = 1e-4;
  /// Coordinates whose absolute discrepancy is below this pass regardless
  /// of the relative error.
  double abs_floor = 1e-8;
  /// Forwarded to Tape::inject_fault for negative controls.
  std::string fault_op;
};

struct CoordinateError {
  std::size_t input = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  bool passed = true;
  /// Largest relative error over coordinates above the absolute floor.
  double max_rel_error = 0.0;
  /// Largest |analytic − numeric| over all coordinates.
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
  std::vector<CoordinateError> failures;
};

/// Compares the tape gradient of `f` with central finite differences on
/// every coordinate of every input. Throws NumericError naming the op when a
/// non-finite value appears anywhere on the tape.
GradCheckReport grad_check(const ScalarFunction& f, std::span<const Tensor2> inputs,
                           const GradCheckOptions& options = {});

}  // namespace uprm
