#include "dynq/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dynq/tensorcore/errors.hpp"

namespace dynq::metrics {

template <typename Seq>
EditStats edit_stats(const Seq& reference, const Seq& hypothesis) {
  const std::size_t n = reference.size();
  const std::size_t m = hypothesis.size();
  // Ties between minimal-cost alignments go to the one with fewest indels.
  struct Cell {
    std::size_t cost, s, i, d;
    bool better(const Cell& o) const {
      return cost != o.cost ? cost < o.cost : i + d < o.i + o.d;
    }
  };
  std::vector<Cell> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = {j, 0, j, 0};
  for (std::size_t r = 1; r <= n; ++r) {
    cur[0] = {r, 0, 0, r};
    for (std::size_t j = 1; j <= m; ++j) {
      const bool same = reference[r - 1] == hypothesis[j - 1];
      Cell best = prev[j - 1];
      best.cost += same ? 0 : 1;
      best.s += same ? 0 : 1;
      Cell del = prev[j];
      ++del.cost;
      ++del.d;
      if (del.better(best)) best = del;
      Cell ins = cur[j - 1];
      ++ins.cost;
      ++ins.i;
      if (ins.better(best)) best = ins;
      cur[j] = best;
    }
    std::swap(prev, cur);
  }
  return {prev[m].s, prev[m].i, prev[m].d, n};
}

template EditStats edit_stats(const Tokens&, const Tokens&);
template EditStats edit_stats(const std::string&, const std::string&);

namespace {

ErrorRate rate(const EditStats& st) {
  const double denom = static_cast<double>(std::max<std::size_t>(1, st.reference_length));
  return {100.0 * static_cast<double>(st.errors()) / denom, st};
}

std::map<Tokens, std::size_t> ngram_counts(const Tokens& seq, std::size_t n) {
  std::map<Tokens, std::size_t> counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) {
    ++counts[Tokens(seq.begin() + static_cast<std::ptrdiff_t>(i),
                    seq.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size() / 2;
  return v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
}

}  // namespace

ErrorRate wer(const Tokens& reference, const Tokens& hypothesis) {
  return rate(edit_stats(reference, hypothesis));
}

ErrorRate cer(const std::string& reference, const std::string& hypothesis) {
  return rate(edit_stats(reference, hypothesis));
}

std::string render_glyphs(const Tokens& tokens) {
  static const char kConsonants[] = "kgtdpbmnszrlhwjcfvqx";
  static const char kVowels[] = "aiueo";
  std::string out;
  out.reserve(2 * tokens.size());
  for (int t : tokens) {
    if (t < 0 || t >= 20) throw BoundsError("render_glyphs: token " + std::to_string(t) + " has no glyph");
    out += kConsonants[t];
    out += kVowels[t % 5];
  }
  return out;
}

ErrorRate cer_tokens(const Tokens& reference, const Tokens& hypothesis) {
  return cer(render_glyphs(reference), render_glyphs(hypothesis));
}

double corpus_bleu(const std::vector<Tokens>& references, const std::vector<Tokens>& hypotheses,
                   std::size_t max_n) {
  if (references.size() != hypotheses.size()) {
    throw ParameterError("corpus_bleu: " + std::to_string(references.size()) + " references vs " +
                         std::to_string(hypotheses.size()) + " hypotheses");
  }
  if (references.empty()) throw ParameterError("corpus_bleu: empty corpus");
  if (max_n == 0) throw ParameterError("corpus_bleu: max_n must be positive");

  std::vector<std::size_t> matches(max_n + 1, 0), totals(max_n + 1, 0);
  std::size_t ref_len = 0;
  std::size_t hyp_len = 0;
  for (std::size_t s = 0; s < references.size(); ++s) {
    ref_len += references[s].size();
    hyp_len += hypotheses[s].size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      const auto hyp = ngram_counts(hypotheses[s], n);
      const auto ref = ngram_counts(references[s], n);
      for (const auto& [gram, c] : hyp) {
        totals[n] += c;
        const auto it = ref.find(gram);
        if (it != ref.end()) matches[n] += std::min(c, it->second);
      }
    }
  }
  if (hyp_len == 0 || matches[1] == 0) return 0.0;

  double log_precision = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    double num = static_cast<double>(matches[n]);
    double den = static_cast<double>(totals[n]);
    if (n >= 2 && matches[n] == 0) {
      num += 1.0;
      den += 1.0;
    }
    log_precision += std::log(num / den) / static_cast<double>(max_n);
  }
  const double bp = hyp_len < ref_len
                        ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len))
                        : 1.0;
  return std::min(100.0, 100.0 * bp * std::exp(log_precision));
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ParameterError("pearson: series differ in length");
  if (x.size() < 3) throw ParameterError("pearson: need at least 3 points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericError("pearson: correlation undefined for a constant series");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

EfficiencyRecord make_efficiency_record(std::string utterance_id, std::string system,
                                        std::size_t audio_tokens, std::size_t text_tokens) {
  if (text_tokens == 0) throw ParameterError("efficiency record " + utterance_id + " has no text tokens");
  return {std::move(utterance_id), std::move(system), audio_tokens, text_tokens};
}

double length_correlation(const std::vector<EfficiencyRecord>& records) {
  std::vector<double> audio, text;
  for (const auto& r : records) {
    audio.push_back(static_cast<double>(r.audio_tokens));
    text.push_back(static_cast<double>(r.text_tokens));
  }
  return pearson(audio, text);
}

std::map<std::string, ExpansionSummary> expansion_report(const std::vector<EfficiencyRecord>& records) {
  if (records.empty()) throw ParameterError("expansion_report: no records");
  std::map<std::string, std::vector<EfficiencyRecord>> by_system;
  for (const auto& r : records) by_system[r.system].push_back(r);
  std::map<std::string, ExpansionSummary> out;
  for (const auto& [system, recs] : by_system) {
    ExpansionSummary s;
    s.count = recs.size();
    std::vector<double> ratios;
    for (const auto& r : recs) ratios.push_back(r.ratio());
    for (double v : ratios) s.mean_ratio += v;
    s.mean_ratio /= static_cast<double>(ratios.size());
    s.median_ratio = median(ratios);
    try {
      s.correlation = length_correlation(recs);
      s.correlation_defined = true;
    } catch (const Error&) {
      s.correlation_defined = false;
    }
    out[system] = s;
  }
  return out;
}

nlohmann::json expansion_to_json(const std::map<std::string, ExpansionSummary>& report) {
  nlohmann::json systems = nlohmann::json::object();
  for (const auto& [system, s] : report) {
    systems[system] = {{"count", s.count},
                       {"mean_ratio", s.mean_ratio},
                       {"median_ratio", s.median_ratio},
                       {"length_correlation", s.correlation_defined ? nlohmann::json(s.correlation)
                                                                    : nlohmann::json(nullptr)}};
  }
  // Full-scale reference ratios, kept as annotations only.
  return {{"systems", systems},
          {"annotations", {{"reference_mean_ratio", {{"adapter", 2.0}, {"linear", 17.5}}},
                           {"reference_length_correlation", {{"adapter", 0.86}, {"linear", 0.70}}}}}};
}

std::string expansion_to_csv(const std::map<std::string, ExpansionSummary>& report) {
  std::ostringstream out;
  out.precision(17);
  out << "system,count,mean_ratio,median_ratio,length_correlation\n";
  for (const auto& [system, s] : report) {
    out << system << ',' << s.count << ',' << s.mean_ratio << ',' << s.median_ratio << ',';
    if (s.correlation_defined) out << s.correlation;
    out << '\n';
  }
  return out.str();
}

}  // namespace dynq::metrics
