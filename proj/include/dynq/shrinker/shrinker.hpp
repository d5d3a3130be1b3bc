#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "dynq/ctc/ctc.hpp"
#include "dynq/tensorcore/tape.hpp"

namespace dynq::shrinker {

// Frames chosen as dynamic queries. Indices are strictly ascending; labels are
// the per-frame argmax at those indices (blank only when fallback is set).
struct PeakSelection {
  std::vector<std::size_t> indices;
  std::vector<int> labels;
  bool fallback = false;

  std::size_t size() const { return indices.size(); }
};

struct ShrinkResult {
  PeakSelection selection;
  Tensor queries;  // [n_q x d_model]
};

/// Keeps one frame per maximal run of identical non-blank argmax labels: the
/// frame where that label's posterior peaks (earliest on ties). Blank frames
/// are dropped. An all-blank grid yields the single frame whose blank
/// posterior is lowest.
PeakSelection select_peak_frames(const ctc::PosteriorGrid& grid);

/// Row gather of the enhanced sequence at the selected indices.
Tensor build_dynamic_queries(const Tensor& enhanced, const std::vector<std::size_t>& indices);
Var build_dynamic_queries(Var enhanced, const std::vector<std::size_t>& indices);

struct ShrinkDiagnostic {
  std::string utterance_id;
  std::size_t frames = 0;
  std::size_t queries = 0;
  std::size_t transcript_length = 0;
};

void write_diagnostics_csv(const std::filesystem::path& path,
                           const std::vector<ShrinkDiagnostic>& rows);

}  // namespace dynq::shrinker
