#include "dynq/shrinker/shrinker.hpp"

#include <fstream>

#include "dynq/tensorcore/errors.hpp"

namespace dynq::shrinker {

PeakSelection select_peak_frames(const ctc::PosteriorGrid& grid) {
  const std::vector<int> best = grid.argmax();
  const int blank = grid.blank();
  PeakSelection sel;

  std::size_t t = 0;
  while (t < best.size()) {
    if (best[t] == blank) {
      ++t;
      continue;
    }
    const int label = best[t];
    std::size_t peak = t;
    double peak_logp = grid.log_prob(t, label);
    std::size_t end = t + 1;
    for (; end < best.size() && best[end] == label; ++end) {
      const double lp = grid.log_prob(end, label);
      if (lp > peak_logp) {
        peak = end;
        peak_logp = lp;
      }
    }
    sel.indices.push_back(peak);
    sel.labels.push_back(label);
    t = end;
  }

  if (sel.indices.empty() && !best.empty()) {
    std::size_t pick = 0;
    for (std::size_t f = 1; f < best.size(); ++f) {
      if (grid.log_prob(f, blank) < grid.log_prob(pick, blank)) pick = f;
    }
    sel.indices.push_back(pick);
    sel.labels.push_back(blank);
    sel.fallback = true;
  }
  return sel;
}

Tensor build_dynamic_queries(const Tensor& enhanced, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw DimensionError("build_dynamic_queries: no indices");
  Tensor q = Tensor::matrix(indices.size(), enhanced.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= enhanced.rows()) {
      throw BoundsError("build_dynamic_queries: index " + std::to_string(indices[r]) +
                        " out of range for " + std::to_string(enhanced.rows()) + " frames");
    }
    std::copy(enhanced.row(indices[r]), enhanced.row(indices[r]) + enhanced.cols(), q.row(r));
  }
  return q;
}

Var build_dynamic_queries(Var enhanced, const std::vector<std::size_t>& indices) {
  return gather_rows(enhanced, indices);
}

void write_diagnostics_csv(const std::filesystem::path& path,
                           const std::vector<ShrinkDiagnostic>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write shrink diagnostics to " + path.string());
  out << "utterance_id,frames,queries,transcript_length\n";
  for (const auto& r : rows) {
    out << r.utterance_id << ',' << r.frames << ',' << r.queries << ',' << r.transcript_length
        << '\n';
  }
}

}  // namespace dynq::shrinker
