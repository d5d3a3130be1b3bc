#include "dynq/training/lora.hpp"

#include <algorithm>

#include "dynq/tensorcore/errors.hpp"

namespace dynq::train {

void lora_wrap(ParameterSet& params, const std::string& name, const LoraConfig& config, Rng& rng) {
  Parameter& w = params.at(name + ".w");
  const std::size_t in = w.value.rows(), out = w.value.cols();
  if (config.rank == 0 || config.rank > std::min(in, out)) {
    throw ParameterError("LoRA rank " + std::to_string(config.rank) + " invalid for " + name +
                         " of shape " + w.value.shape_string());
  }
  w.frozen = true;
  if (params.contains(name + ".b")) params.at(name + ".b").frozen = true;
  const double bound = 1.0 / static_cast<double>(in);
  Tensor a = Tensor::matrix(in, config.rank);
  for (auto& v : a.values()) v = rng.uniform(-bound, bound);
  params.add(name + ".lora_a", std::move(a));
  params.add(name + ".lora_b", Tensor::matrix(config.rank, out));
}

Var lora_linear(Tape& tape, ParameterSet& params, const std::string& name, Var x, double factor) {
  Var y = linear(x, tape.param(params, name + ".w"), tape.param(params, name + ".b"));
  if (!params.contains(name + ".lora_a")) return y;
  const Var low = matmul(x, tape.param(params, name + ".lora_a"));
  return add(y, scale(matmul(low, tape.param(params, name + ".lora_b")), factor));
}

}  // namespace dynq::train
