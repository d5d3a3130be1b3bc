#pragma once

#include <json.hpp>

#include "dynq/adapter/adapter.hpp"
#include "dynq/synthcorpus/corpus.hpp"
#include "dynq/training/decoder.hpp"
#include "dynq/training/model.hpp"

namespace dynq::train {

// to_json emits every field. apply_json overrides the fields present in an
// object and throws ParameterError on unknown keys or mistyped values.

nlohmann::json to_json(const corpus::CorpusConfig& config);
nlohmann::json to_json(const adapter::AdapterConfig& config);
nlohmann::json to_json(const DecoderConfig& config);
nlohmann::json to_json(const PretrainConfig& config);
nlohmann::json to_json(const TrainConfig& config);

void apply_json(const nlohmann::json& j, corpus::CorpusConfig& config);
void apply_json(const nlohmann::json& j, adapter::AdapterConfig& config);
void apply_json(const nlohmann::json& j, DecoderConfig& config);
void apply_json(const nlohmann::json& j, PretrainConfig& config);
void apply_json(const nlohmann::json& j, TrainConfig& config);

}  // namespace dynq::train
