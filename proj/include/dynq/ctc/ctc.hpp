#pragma once

#include <cstddef>
#include <vector>

#include "dynq/tensorcore/tape.hpp"
#include "dynq/tensorcore/tensor.hpp"

namespace dynq::ctc {

using LabelSequence = std::vector<int>;

/// Per-frame log-probabilities over vocab + blank. Blank is the last column
/// (index == vocab).
class PosteriorGrid {
 public:
  /// Validates shape [T x (vocab + 1)] and that every row log-sum-exps to 0
  /// within tolerance.
  PosteriorGrid(Tensor log_probs, std::size_t vocab, double tolerance = 1e-9);

  /// Normalizes arbitrary logits with a row-wise log-softmax.
  static PosteriorGrid from_logits(const Tensor& logits);
  /// Takes probabilities (rows summing to one) and stores their logs.
  static PosteriorGrid from_probs(const Tensor& probs);

  const Tensor& log_probs() const { return log_probs_; }
  std::size_t frames() const { return log_probs_.rows(); }
  std::size_t vocab() const { return vocab_; }
  int blank() const { return static_cast<int>(vocab_); }
  double log_prob(std::size_t t, int label) const {
    return log_probs_(t, static_cast<std::size_t>(label));
  }
  // Per-frame argmax, ties toward the lower label id.
  std::vector<int> argmax() const;

 private:
  Tensor log_probs_;
  std::size_t vocab_;
};

/// Frames needed for any alignment: L plus one separating blank per adjacent
/// repeated pair.
std::size_t min_frames_required(const LabelSequence& target);

/// -log P(target | grid) by the log-space forward recursion.
/// Throws AlignmentError when the grid has too few frames.
double ctc_loss(const PosteriorGrid& grid, const LabelSequence& target);

/// Differentiable form on a [T x (V+1)] log-probability var (typically a
/// log_softmax output). The gradient w.r.t. log y_t(k) is
/// -sum_{s: l'_s = k} alpha_t(s) beta_t(s) / P.
Var ctc_loss(Var log_probs, const LabelSequence& target);

/// Sum of path probabilities that collapse to target, by exhaustive
/// enumeration of all (V+1)^T label paths. Throws SizeError above 1e7 paths.
double brute_force_path_sum(const PosteriorGrid& grid, const LabelSequence& target);

/// Best-path decoding: argmax per frame, merge repeats, drop blanks.
LabelSequence greedy_decode(const PosteriorGrid& grid);

/// Collapse a frame-level label path (merge repeats, then drop blank).
LabelSequence collapse_path(const std::vector<int>& path, int blank);

}  // namespace dynq::ctc
