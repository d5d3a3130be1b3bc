#include "dynq/ctc/ctc.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "dynq/tensorcore/errors.hpp"

namespace dynq::ctc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double mx = std::max(a, b);
  return mx + std::log1p(std::exp(-std::abs(a - b)));
}

void validate_target(const LabelSequence& target, std::size_t vocab) {
  for (int l : target) {
    if (l < 0 || static_cast<std::size_t>(l) >= vocab) {
      throw BoundsError("ctc: label " + std::to_string(l) + " outside vocabulary of " +
                        std::to_string(vocab));
    }
  }
}

// Blank-augmented label lattice: b l1 b l2 ... lL b.
std::vector<int> extend(const LabelSequence& target, int blank) {
  std::vector<int> ext(2 * target.size() + 1, blank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  return ext;
}

bool can_skip(const std::vector<int>& ext, std::size_t s, int blank) {
  return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
}

struct Lattice {
  std::vector<int> ext;
  std::vector<double> alpha;  // [T x S]
  std::vector<double> beta;   // [T x S], excludes the emission at t
  double log_likelihood = kNegInf;
};

Lattice forward_backward(const Tensor& logp, const LabelSequence& target, bool with_beta) {
  const std::size_t frames = logp.rows();
  const std::size_t vocab = logp.cols() - 1;
  const int blank = static_cast<int>(vocab);
  validate_target(target, vocab);
  const std::size_t needed = min_frames_required(target);
  if (frames < needed) {
    throw AlignmentError("ctc: " + std::to_string(frames) + " frames cannot align a target of " +
                         std::to_string(target.size()) + " labels (needs " +
                         std::to_string(needed) + ")");
  }
  Lattice lat;
  lat.ext = extend(target, blank);
  const std::size_t states = lat.ext.size();
  const auto& ext = lat.ext;
  auto emit = [&](std::size_t t, std::size_t s) {
    return logp(t, static_cast<std::size_t>(ext[s]));
  };

  lat.alpha.assign(frames * states, kNegInf);
  auto alpha = [&](std::size_t t, std::size_t s) -> double& { return lat.alpha[t * states + s]; };
  alpha(0, 0) = emit(0, 0);
  if (states > 1) alpha(0, 1) = emit(0, 1);
  for (std::size_t t = 1; t < frames; ++t) {
    for (std::size_t s = 0; s < states; ++s) {
      double acc = alpha(t - 1, s);
      if (s >= 1) acc = log_add(acc, alpha(t - 1, s - 1));
      if (can_skip(ext, s, blank)) acc = log_add(acc, alpha(t - 1, s - 2));
      alpha(t, s) = acc == kNegInf ? kNegInf : acc + emit(t, s);
    }
  }
  lat.log_likelihood = alpha(frames - 1, states - 1);
  if (states > 1) lat.log_likelihood = log_add(lat.log_likelihood, alpha(frames - 1, states - 2));

  if (with_beta) {
    lat.beta.assign(frames * states, kNegInf);
    auto beta = [&](std::size_t t, std::size_t s) -> double& { return lat.beta[t * states + s]; };
    beta(frames - 1, states - 1) = 0.0;
    if (states > 1) beta(frames - 1, states - 2) = 0.0;
    for (std::size_t t = frames - 1; t-- > 0;) {
      for (std::size_t s = 0; s < states; ++s) {
        double acc = beta(t + 1, s) == kNegInf ? kNegInf : beta(t + 1, s) + emit(t + 1, s);
        if (s + 1 < states && beta(t + 1, s + 1) != kNegInf) {
          acc = log_add(acc, beta(t + 1, s + 1) + emit(t + 1, s + 1));
        }
        if (s + 2 < states && can_skip(ext, s + 2, blank) && beta(t + 1, s + 2) != kNegInf) {
          acc = log_add(acc, beta(t + 1, s + 2) + emit(t + 1, s + 2));
        }
        beta(t, s) = acc;
      }
    }
  }
  return lat;
}

}  // namespace

PosteriorGrid::PosteriorGrid(Tensor log_probs, std::size_t vocab, double tolerance)
    : log_probs_(std::move(log_probs)), vocab_(vocab) {
  if (log_probs_.rank() != 2 || log_probs_.cols() != vocab_ + 1) {
    throw DimensionError("posterior grid must be [T x " + std::to_string(vocab_ + 1) + "], got " +
                         log_probs_.shape_string());
  }
  for (std::size_t t = 0; t < log_probs_.rows(); ++t) {
    const double lse = log_sum_exp({log_probs_.row(t), log_probs_.cols()});
    if (!(std::abs(lse) <= tolerance)) {
      throw NumericError("posterior grid row " + std::to_string(t) +
                         " is not normalized (log-sum-exp " + std::to_string(lse) + ")");
    }
  }
}

PosteriorGrid PosteriorGrid::from_logits(const Tensor& logits) {
  return PosteriorGrid(log_softmax_rows(logits), logits.cols() - 1);
}

PosteriorGrid PosteriorGrid::from_probs(const Tensor& probs) {
  Tensor logp = probs;
  for (auto& v : logp.values()) v = std::log(v);
  return PosteriorGrid(std::move(logp), probs.cols() - 1);
}

std::vector<int> PosteriorGrid::argmax() const {
  std::vector<int> out(frames());
  for (std::size_t t = 0; t < frames(); ++t) {
    const double* r = log_probs_.row(t);
    std::size_t best = 0;
    for (std::size_t k = 1; k <= vocab_; ++k) {
      if (r[k] > r[best]) best = k;
    }
    out[t] = static_cast<int>(best);
  }
  return out;
}

std::size_t min_frames_required(const LabelSequence& target) {
  std::size_t repeats = 0;
  for (std::size_t i = 1; i < target.size(); ++i) repeats += target[i] == target[i - 1];
  return target.size() + repeats;
}

double ctc_loss(const PosteriorGrid& grid, const LabelSequence& target) {
  return -forward_backward(grid.log_probs(), target, false).log_likelihood;
}

Var ctc_loss(Var log_probs, const LabelSequence& target) {
  const Tensor& logp = log_probs.value();
  if (logp.rank() != 2 || logp.cols() < 2) {
    throw DimensionError("ctc_loss: expected [T x (V+1)] log-probabilities, got " +
                         logp.shape_string());
  }
  Lattice lat = forward_backward(logp, target, true);
  const double loss = -lat.log_likelihood;
  if (!std::isfinite(loss)) throw NumericError("ctc_loss: target has zero probability");
  return log_probs.tape->record(
      Tensor::scalar(loss), {log_probs},
      [log_probs, lat = std::move(lat)](Tape& tape, const Tensor& g) {
        Tensor& gl = tape.grad(log_probs);
        const std::size_t states = lat.ext.size();
        const std::size_t frames = gl.rows();
        for (std::size_t t = 0; t < frames; ++t) {
          for (std::size_t s = 0; s < states; ++s) {
            const double a = lat.alpha[t * states + s];
            const double b = lat.beta[t * states + s];
            if (a == kNegInf || b == kNegInf) continue;
            const double occupancy = std::exp(a + b - lat.log_likelihood);
            gl(t, static_cast<std::size_t>(lat.ext[s])) -= g[0] * occupancy;
          }
        }
      });
}

LabelSequence collapse_path(const std::vector<int>& path, int blank) {
  LabelSequence out;
  int prev = -1;
  for (int l : path) {
    if (l != prev && l != blank) out.push_back(l);
    prev = l;
  }
  return out;
}

double brute_force_path_sum(const PosteriorGrid& grid, const LabelSequence& target) {
  const std::size_t frames = grid.frames();
  const std::size_t symbols = grid.vocab() + 1;
  double paths = 1.0;
  for (std::size_t t = 0; t < frames; ++t) paths *= static_cast<double>(symbols);
  if (paths > 1e7) {
    throw SizeError("brute_force_path_sum: " + std::to_string(symbols) + "^" +
                    std::to_string(frames) + " paths exceeds the 1e7 limit");
  }
  validate_target(target, grid.vocab());
  std::vector<int> path(frames, 0);
  double total = 0.0;
  while (true) {
    if (collapse_path(path, grid.blank()) == target) {
      double logp = 0.0;
      for (std::size_t t = 0; t < frames; ++t) logp += grid.log_prob(t, path[t]);
      total += std::exp(logp);
    }
    std::size_t t = 0;
    while (t < frames && ++path[t] == static_cast<int>(symbols)) path[t++] = 0;
    if (t == frames) break;
  }
  return total;
}

LabelSequence greedy_decode(const PosteriorGrid& grid) {
  return collapse_path(grid.argmax(), grid.blank());
}

}  // namespace dynq::ctc
