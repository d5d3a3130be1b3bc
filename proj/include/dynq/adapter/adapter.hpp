#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dynq/adapter/layers.hpp"
#include "dynq/ctc/ctc.hpp"
#include "dynq/shrinker/shrinker.hpp"

namespace dynq::adapter {

struct AdapterConfig {
  std::size_t d_audio = 16;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t heads = 4;
  std::size_t ffn = 128;
  std::size_t vocab = 12;  // non-blank ASR labels
  std::size_t max_frames = 512;
  double logit_scale_init = 2.3026;
  bool tie_asr_head = true;

  /// Throws ParameterError on zero extents or d_model % heads != 0.
  void validate() const;
};

/// Fresh adapter parameters under "adapter.". With tie_asr_head set and an
/// embedding table given, the first `vocab` label columns of the ASR head
/// weight are copied from its rows (as [vocab x d_model]).
ParameterSet init_adapter(const AdapterConfig& config, std::uint64_t seed,
                          const Tensor* token_embeddings = nullptr);

/// "linear.w" [d_audio x d_model] and "linear.b".
ParameterSet init_linear_baseline(std::size_t d_audio, std::size_t d_model, std::uint64_t seed);

/// Projection + learned positions + n_layers pre-norm self-attention blocks.
/// Output keeps all T rows.
Var enhance(Tape& tape, ParameterSet& params, const AdapterConfig& config, const Tensor& features);

/// Frame-level log-posteriors [T x (vocab + 1)], blank last.
Var asr_head(Tape& tape, ParameterSet& params, const AdapterConfig& config, Var enhanced);

struct FusionOutput {
  Var z;             // q + pre_residual
  Var pre_residual;  // output projection of the attended values
  Tensor weights;    // [n_q x T], head-averaged
};

FusionOutput cross_attend(Tape& tape, ParameterSet& params, const AdapterConfig& config, Var q,
                          Var kv);

struct AdapterOutput {
  Var enhanced;
  Var log_probs;
  ctc::PosteriorGrid grid;
  shrinker::PeakSelection selection;
  FusionOutput fusion;
};

/// enhance -> asr_head -> select_peak_frames -> gather -> cross_attend.
/// fixed_indices bypasses the selection (used to hold it constant while
/// perturbing parameters).
AdapterOutput adapter_forward(Tape& tape, ParameterSet& params, const AdapterConfig& config,
                              const Tensor& features,
                              const std::optional<std::vector<std::size_t>>& fixed_indices = {});

/// Per-frame affine map, T rows in and out.
Var linear_baseline_forward(Tape& tape, ParameterSet& params, const Tensor& features);

}  // namespace dynq::adapter
