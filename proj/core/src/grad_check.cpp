#include "uprm/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "uprm/errors.hpp"

namespace uprm {
namespace {

void check_tape_finite(const Tape& tape, const char* phase) {
  for (const auto& e : tape.entries()) {
    if (!tape.value(Var{e.output}).all_finite()) {
      throw NumericError(std::string("grad_check: non-finite output of '") +
                         std::string(e.op) + "' during " + phase);
    }
  }
}

double evaluate(const ScalarFunction& f, const std::vector<Tensor2>& inputs) {
  Tape tape(false);
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const auto& in : inputs) leaves.push_back(tape.constant(in));
  const Tensor2& out = tape.value(f(tape, leaves));
  if (out.size() != 1) throw ContractError("grad_check: function must return a scalar");
  if (!std::isfinite(out[0])) throw NumericError("grad_check: non-finite perturbed value");
  return out[0];
}

}  // namespace

GradCheckReport grad_check(const ScalarFunction& f, std::span<const Tensor2> inputs,
                           const GradCheckOptions& options) {
  for (std::size_t i = 0; i < inputs.size(); ++i) require_finite(inputs[i], "grad_check input " + std::to_string(i));

  Tape tape;
  if (!options.fault_op.empty()) tape.inject_fault(options.fault_op);
  std::vector<Var> leaves;
  for (const auto& in : inputs) leaves.push_back(tape.parameter(in));
  Var out = f(tape, leaves);
  if (tape.value(out).size() != 1) throw ContractError("grad_check: function must return a scalar");
  check_tape_finite(tape, "forward");
  tape.backward(out);

  GradCheckReport report;
  std::vector<Tensor2> work(inputs.begin(), inputs.end());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor2 analytic = tape.grad(leaves[i]);
    require_finite(analytic, "analytic gradient of input " + std::to_string(i));
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double x0 = inputs[i][j];
      work[i][j] = x0 + options.step;
      const double fp = evaluate(f, work);
      work[i][j] = x0 - options.step;
      const double fm = evaluate(f, work);
      work[i][j] = x0;
      const double numeric = (fp - fm) / (2.0 * options.step);
      const double a = analytic[j];
      const double diff = std::abs(a - numeric);
      ++report.coordinates;
      report.max_abs_error = std::max(report.max_abs_error, diff);
      if (diff <= options.abs_floor) continue;
      const double rel = diff / std::max(std::abs(a), std::abs(numeric));
      report.max_rel_error = std::max(report.max_rel_error, rel);
      if (rel > options.rel_tol) {
        report.passed = false;
        report.failures.push_back({i, j, a, numeric, rel});
      }
    }
  }
  return report;
}

}  // namespace uprm
