#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynq/adapter/adapter.hpp"
#include "dynq/synthcorpus/corpus.hpp"
#include "dynq/training/decoder.hpp"
#include "dynq/training/model.hpp"

namespace dynq::cli {

struct SamplerSection {
  double tau = 3.0;
  std::size_t draws = 100000;  // sample-stats only
  std::uint64_t seed = 0;
};

// Every section of a run. training.tau mirrors sampler.tau.
struct RunConfig {
  corpus::CorpusConfig corpus = corpus::default_corpus_config();
  adapter::AdapterConfig adapter;
  train::DecoderConfig decoder;
  train::PretrainConfig pretrain;
  train::TrainConfig training;
  SamplerSection sampler;

  nlohmann::json to_json() const;
  /// Overlays j on the defaults; unknown sections or keys throw ParameterError.
  static RunConfig from_json(const nlohmann::json& j);
  /// Cross-section consistency (widths, vocabularies).
  void validate() const;
};

/// "a.b.c=value": value is parsed as JSON when possible, else kept as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Reads the file (if given), applies overrides in order, then parses.
RunConfig load_run_config(const std::optional<std::filesystem::path>& path,
                          const std::vector<std::string>& overrides);

/// Hex SHA-256 of the compact dump.
std::string digest(const nlohmann::json& j);
std::string file_digest(const std::filesystem::path& path);

}  // namespace dynq::cli
