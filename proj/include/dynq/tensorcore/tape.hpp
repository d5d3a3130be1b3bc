#pragma once

#include <cstddef>
#include <functional>
#include <unordered_map>
#include <vector>

#include "dynq/tensorcore/params.hpp"
#include "dynq/tensorcore/tensor.hpp"

namespace dynq {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

// Reverse-mode recorder for the fixed op set used by the models. Nodes are
// appended in evaluation order, so a reverse sweep is a valid topological
// order. Parameter leaves write their gradients back into the ParameterSet.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  // With record_grad off, parameter leaves never require grad (inference).
  explicit Tape(bool record_grad) : record_grad_(record_grad) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf bound to a named parameter; repeated calls return the same node.
  Var param(ParameterSet& params, const std::string& name);

  // Records a node. requires_grad is inherited from the inputs; backward is
  // only invoked when it is set.
  Var record(Tensor value, std::vector<Var> inputs, Backward backward);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  // Gradient buffer of a node, allocated on first use.
  Tensor& grad(Var v);

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse, then adds
  /// parameter-leaf gradients into their ParameterSet accumulators.
  void backward(Var loss, double seed = 1.0);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
    Parameter* param = nullptr;
  };

  std::vector<Node> nodes_;
  bool record_grad_ = true;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

// ---- differentiable ops -------------------------------------------------

Var matmul(Var a, Var b);
Var matmul_bt(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var add_row(Var x, Var bias);  // bias is 1 x n, broadcast over rows
Var scale(Var x, double factor);
Var scale_by_exp(Var x, Var log_scale);  // x * exp(s), s is 1 x 1
Var linear(Var x, Var weight, Var bias);
Var gelu(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);
Var gather_rows(Var x, const std::vector<std::size_t>& indices);
Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var concat_rows(const std::vector<Var>& parts);

/// Mean of -log softmax(logits)[target] over rows whose mask entry is true.
Var cross_entropy(Var logits, const std::vector<int>& targets, const std::vector<bool>& mask);

struct AttentionResult {
  Var output;         // [n x d]
  Tensor mean_weights;  // [n x m], head-averaged attention probabilities
};

/// Multi-head scaled dot-product attention over pre-projected q [n x d],
/// k and v [m x d]. Heads split the feature axis evenly; scale is
/// 1/sqrt(d / heads). With causal set, query i sees keys 0..i (requires n == m).
AttentionResult attention(Var q, Var k, Var v, std::size_t heads, bool causal);

}  // namespace dynq
