#include "dynq/tensorcore/params.hpp"

#include <cmath>

#include "dynq/tensorcore/errors.hpp"

namespace dynq {

Parameter& ParameterSet::add(const std::string& name, Tensor value, bool frozen) {
  if (params_.count(name)) throw StateError("duplicate parameter '" + name + "'");
  Parameter p;
  p.grad = Tensor(value.shape(), 0.0);
  p.value = std::move(value);
  p.frozen = frozen;
  return params_.emplace(name, std::move(p)).first->second;
}

Parameter& ParameterSet::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw StateError("unknown parameter '" + name + "'");
  return it->second;
}

const Parameter& ParameterSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw StateError("unknown parameter '" + name + "'");
  return it->second;
}

void ParameterSet::zero_grad() {
  for (auto& [name, p] : params_) {
    p.grad.fill(0.0);
    p.grad_ready = false;
  }
}

void ParameterSet::set_frozen(const std::function<bool(const std::string&)>& predicate,
                              bool frozen) {
  for (auto& [name, p] : params_) {
    if (predicate(name)) p.frozen = frozen;
  }
}

void ParameterSet::merge(const ParameterSet& other) {
  for (const auto& [name, p] : other.params_) {
    if (params_.count(name)) throw StateError("duplicate parameter '" + name + "' in merge");
    params_.emplace(name, p);
  }
}

std::size_t ParameterSet::scalar_count(bool trainable_only) const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) {
    if (!trainable_only || !p.frozen) n += p.value.size();
  }
  return n;
}

Tensor uniform_init(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor w = Tensor::matrix(fan_in, fan_out);
  for (auto& v : w.values()) v = rng.uniform(-bound, bound);
  return w;
}

}  // namespace dynq
