#pragma once

#include <string>

#include "dynq/tensorcore/params.hpp"
#include "dynq/tensorcore/tape.hpp"

namespace dynq::train {

struct LoraConfig {
  std::size_t rank = 4;
  double alpha = 16.0;

  double scale() const { return alpha / static_cast<double>(rank); }
};

/// Adds "<name>.lora_a" [in x r] (small uniform values) and "<name>.lora_b"
/// [r x out] (zeros) next to the projection "<name>.w" / "<name>.b", and
/// freezes the base pair. Throws ParameterError when r is 0 or exceeds
/// min(in, out).
void lora_wrap(ParameterSet& params, const std::string& name, const LoraConfig& config, Rng& rng);

/// x W + b, plus factor * (x A) B when "<name>.lora_a" exists.
Var lora_linear(Tape& tape, ParameterSet& params, const std::string& name, Var x, double factor);

}  // namespace dynq::train
