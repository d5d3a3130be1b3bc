#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynq/synthcorpus/corpus.hpp"
#include "dynq/tensorcore/rng.hpp"

namespace dynq::sampler {

struct CategoryKey {
  std::string dialect;
  std::string task;

  CategoryKey() = default;
  /// Throws ParameterError when either field is empty.
  CategoryKey(std::string dialect, std::string task);
  /// Parses "dialect_task".
  static CategoryKey parse(const std::string& name);

  std::string name() const { return dialect + "_" + task; }
  auto operator<=>(const CategoryKey&) const = default;
};

using CategoryStats = std::map<CategoryKey, std::size_t>;
using Probabilities = std::map<CategoryKey, double>;
using CategoryMembers = std::map<CategoryKey, std::vector<std::size_t>>;

struct SamplerConfig {
  double tau = 3.0;
  std::uint64_t seed = 0;
  std::size_t batch_size = 16;
};

/// p_c proportional to (1/N_c)^(1/tau), normalized in log space.
/// Zero counts, an empty map, or tau <= 0 throw ParameterError.
Probabilities category_probabilities(const CategoryStats& stats, double tau);

/// Record indices of each (dialect, task) category, in manifest order.
CategoryMembers group_by_category(const corpus::Manifest& manifest);
CategoryStats stats_of(const CategoryMembers& members);

struct Draw {
  CategoryKey category;
  std::size_t item = 0;  // index into the manifest
};

/// One batch: per slot a category from probs, then an item uniformly within
/// it. Advances rng. A category with positive probability and no members is
/// a DataError.
std::vector<Draw> sample_batch(const CategoryMembers& members, const Probabilities& probs,
                               std::size_t batch_size, Rng& rng);

/// Precomputed sequence of batches, all drawn from one generator seeded with
/// config.seed.
std::vector<std::vector<Draw>> build_schedule(const CategoryMembers& members,
                                              const Probabilities& probs,
                                              const SamplerConfig& config, std::size_t batches);

struct FrequencyReport {
  std::map<CategoryKey, std::size_t> counts;
  std::map<CategoryKey, double> frequencies;
  std::map<CategoryKey, double> target;
  std::size_t draws = 0;
  double kl = 0.0;  // KL(empirical || target)
};

/// Throws ParameterError on an empty schedule.
FrequencyReport frequency_report(const std::vector<Draw>& draws, const Probabilities& target);
FrequencyReport frequency_report(const std::vector<std::vector<Draw>>& schedule,
                                 const Probabilities& target);

nlohmann::json report_to_json(const FrequencyReport& report);

}  // namespace dynq::sampler
