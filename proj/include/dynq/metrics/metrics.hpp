#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace dynq::metrics {

using Tokens = std::vector<int>;

struct EditStats {
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;
  std::size_t reference_length = 0;

  std::size_t errors() const { return substitutions + insertions + deletions; }
};

struct ErrorRate {
  double percent = 0.0;  // 100 * errors / max(1, |ref|)
  EditStats stats;
};

/// Unit-cost Levenshtein alignment with its S/I/D decomposition.
template <typename Seq>
EditStats edit_stats(const Seq& reference, const Seq& hypothesis);

ErrorRate wer(const Tokens& reference, const Tokens& hypothesis);
ErrorRate cer(const std::string& reference, const std::string& hypothesis);

/// Token i renders as a consonant (indexed by i) followed by a vowel (i mod 5).
std::string render_glyphs(const Tokens& tokens);
ErrorRate cer_tokens(const Tokens& reference, const Tokens& hypothesis);

/// Corpus BLEU on a 0..100 scale: clipped n-gram precisions for n = 1..max_n,
/// add-one smoothing of zero match counts for n >= 2, brevity penalty when the
/// hypotheses are shorter than the references.
double corpus_bleu(const std::vector<Tokens>& references, const std::vector<Tokens>& hypotheses,
                   std::size_t max_n = 4);

/// Throws ParameterError below 3 points, NumericError on a constant series.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

struct EfficiencyRecord {
  std::string utterance_id;
  std::string system;  // "adapter" or "linear"
  std::size_t audio_tokens = 0;
  std::size_t text_tokens = 1;

  double ratio() const { return static_cast<double>(audio_tokens) / static_cast<double>(text_tokens); }
};

/// Throws ParameterError when text_tokens is 0.
EfficiencyRecord make_efficiency_record(std::string utterance_id, std::string system,
                                        std::size_t audio_tokens, std::size_t text_tokens);

double length_correlation(const std::vector<EfficiencyRecord>& records);

struct ExpansionSummary {
  std::size_t count = 0;
  double mean_ratio = 0.0;
  double median_ratio = 0.0;
  double correlation = 0.0;
  bool correlation_defined = false;
};

std::map<std::string, ExpansionSummary> expansion_report(const std::vector<EfficiencyRecord>& records);
nlohmann::json expansion_to_json(const std::map<std::string, ExpansionSummary>& report);
std::string expansion_to_csv(const std::map<std::string, ExpansionSummary>& report);

}  // namespace dynq::metrics
