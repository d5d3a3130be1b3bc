#include "dynq/sampler/sampler.hpp"

#include <cmath>
#include <limits>

#include "dynq/tensorcore/errors.hpp"
#include "dynq/tensorcore/tensor.hpp"

namespace dynq::sampler {

CategoryKey::CategoryKey(std::string d, std::string t) : dialect(std::move(d)), task(std::move(t)) {
  if (dialect.empty() || task.empty()) {
    throw ParameterError("category key needs a dialect and a task");
  }
}

CategoryKey CategoryKey::parse(const std::string& name) {
  const auto pos = name.rfind('_');
  if (pos == std::string::npos) throw ParameterError("malformed category '" + name + "'");
  return CategoryKey(name.substr(0, pos), name.substr(pos + 1));
}

Probabilities category_probabilities(const CategoryStats& stats, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw ParameterError("sampling temperature must be positive and finite, got " +
                         std::to_string(tau));
  }
  if (stats.empty()) throw ParameterError("category_probabilities: no categories");
  std::vector<double> logits;
  logits.reserve(stats.size());
  for (const auto& [key, n] : stats) {
    if (n == 0) throw ParameterError("category " + key.name() + " has zero samples");
    logits.push_back(-std::log(static_cast<double>(n)) / tau);
  }
  const double lse = log_sum_exp(logits);
  Probabilities out;
  std::size_t i = 0;
  for (const auto& [key, n] : stats) out[key] = std::exp(logits[i++] - lse);
  return out;
}

CategoryMembers group_by_category(const corpus::Manifest& manifest) {
  CategoryMembers members;
  const auto& records = manifest.records();
  for (std::size_t i = 0; i < records.size(); ++i) {
    members[CategoryKey(records[i].dialect, corpus::task_name(records[i].task))].push_back(i);
  }
  return members;
}

CategoryStats stats_of(const CategoryMembers& members) {
  CategoryStats stats;
  for (const auto& [key, items] : members) stats[key] = items.size();
  return stats;
}

std::vector<Draw> sample_batch(const CategoryMembers& members, const Probabilities& probs,
                               std::size_t batch_size, Rng& rng) {
  if (probs.empty()) throw ParameterError("sample_batch: empty probability table");
  for (const auto& [key, p] : probs) {
    if (p <= 0.0) continue;
    const auto it = members.find(key);
    if (it == members.end() || it->second.empty()) {
      throw DataError("category " + key.name() + " has positive probability but no utterances");
    }
  }
  std::vector<Draw> batch;
  batch.reserve(batch_size);
  for (std::size_t s = 0; s < batch_size; ++s) {
    const double u = rng.uniform();
    double cum = 0.0;
    const CategoryKey* chosen = nullptr;
    for (const auto& [key, p] : probs) {
      if (p <= 0.0) continue;
      chosen = &key;
      cum += p;
      if (u < cum) break;
    }
    const auto& items = members.at(*chosen);
    batch.push_back({*chosen, items[rng.index(items.size())]});
  }
  return batch;
}

std::vector<std::vector<Draw>> build_schedule(const CategoryMembers& members,
                                              const Probabilities& probs,
                                              const SamplerConfig& config, std::size_t batches) {
  if (config.batch_size == 0) throw ParameterError("batch size must be positive");
  Rng rng(config.seed);
  std::vector<std::vector<Draw>> schedule;
  schedule.reserve(batches);
  for (std::size_t b = 0; b < batches; ++b) {
    schedule.push_back(sample_batch(members, probs, config.batch_size, rng));
  }
  return schedule;
}

FrequencyReport frequency_report(const std::vector<Draw>& draws, const Probabilities& target) {
  if (draws.empty()) throw ParameterError("frequency_report: empty schedule");
  FrequencyReport r;
  r.target = target;
  r.draws = draws.size();
  for (const auto& d : draws) ++r.counts[d.category];
  for (const auto& [key, p] : target) r.counts.try_emplace(key, 0);
  for (const auto& [key, n] : r.counts) {
    const double f = static_cast<double>(n) / static_cast<double>(r.draws);
    r.frequencies[key] = f;
    if (n == 0) continue;
    const auto it = target.find(key);
    const double q = it == target.end() ? 0.0 : it->second;
    r.kl += q > 0.0 ? f * std::log(f / q) : std::numeric_limits<double>::infinity();
  }
  return r;
}

FrequencyReport frequency_report(const std::vector<std::vector<Draw>>& schedule,
                                 const Probabilities& target) {
  std::vector<Draw> flat;
  for (const auto& b : schedule) flat.insert(flat.end(), b.begin(), b.end());
  return frequency_report(flat, target);
}

nlohmann::json report_to_json(const FrequencyReport& report) {
  nlohmann::json cats = nlohmann::json::object();
  for (const auto& [key, n] : report.counts) {
    const auto t = report.target.find(key);
    cats[key.name()] = {{"count", n},
                        {"frequency", report.frequencies.at(key)},
                        {"target", t == report.target.end() ? 0.0 : t->second}};
  }
  return {{"draws", report.draws}, {"kl", report.kl}, {"categories", cats}};
}

}  // namespace dynq::sampler
