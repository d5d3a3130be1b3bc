#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dynq/tensorcore/params.hpp"
#include "dynq/tensorcore/tape.hpp"

namespace dynq {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t elements = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;

  bool passed(double tolerance) const { return max_rel_error <= tolerance; }
};

using ScalarFn = std::function<Var(Tape&, ParameterSet&)>;

// Compares tape gradients against central finite differences for every
// trainable parameter. Per element the error is
//   |analytic - numeric| / max(|analytic|, |numeric|, denom_floor)
// so entries whose gradient is below the floor are judged on absolute error.
// fn is evaluated twice up front; differing results raise DeterminismError.
GradCheckReport grad_check(const ScalarFn& fn, ParameterSet& params, double epsilon = 1e-5,
                           double denom_floor = 1e-5);

}  // namespace dynq
