#pragma once

#include <functional>
#include <map>
#include <string>

#include "dynq/tensorcore/rng.hpp"
#include "dynq/tensorcore/tensor.hpp"

namespace dynq {

struct Parameter {
  Tensor value;
  Tensor grad;  // same shape as value
  bool frozen = false;
  bool grad_ready = false;  // set once a backward pass has written into grad
};

// Named parameters with gradient accumulators. Ordered by name so iteration
// order (and therefore every reduction over parameters) is fixed.
class ParameterSet {
 public:
  Parameter& add(const std::string& name, Tensor value, bool frozen = false);

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  Tensor& value(const std::string& name) { return at(name).value; }
  const Tensor& value(const std::string& name) const { return at(name).value; }

  void zero_grad();
  void set_frozen(const std::function<bool(const std::string&)>& predicate, bool frozen);
  void merge(const ParameterSet& other);

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count(bool trainable_only = false) const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter> params_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrix.
Tensor uniform_init(std::size_t fan_in, std::size_t fan_out, Rng& rng);

}  // namespace dynq
