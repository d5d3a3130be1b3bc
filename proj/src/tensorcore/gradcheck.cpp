#include "dynq/tensorcore/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "dynq/tensorcore/errors.hpp"

namespace dynq {

namespace {

double evaluate(const ScalarFn& fn, ParameterSet& params) {
  Tape tape;
  return fn(tape, params).value().item();
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& fn, ParameterSet& params, double epsilon,
                           double denom_floor) {
  if (!(epsilon > 0.0) || epsilon > 1e-2) {
    throw ParameterError("grad_check: epsilon must lie in (0, 1e-2], got " + std::to_string(epsilon));
  }
  const double first = evaluate(fn, params);
  const double second = evaluate(fn, params);
  if (std::memcmp(&first, &second, sizeof(double)) != 0) {
    throw DeterminismError("grad_check: function returned " + std::to_string(first) + " then " +
                           std::to_string(second) + " for identical inputs");
  }

  params.zero_grad();
  {
    Tape tape;
    Var loss = fn(tape, params);
    tape.backward(loss);
  }

  GradCheckReport report;
  for (auto& [name, p] : params) {
    if (p.frozen) continue;
    const Tensor analytic = p.grad;
    GradCheckEntry entry{name, 0.0, 0.0, p.value.size()};
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + epsilon;
      const double up = evaluate(fn, params);
      p.value[i] = saved - epsilon;
      const double down = evaluate(fn, params);
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), denom_floor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, abs_err / denom);
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  params.zero_grad();
  return report;
}

}  // namespace dynq
