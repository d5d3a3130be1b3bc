#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "dynq/tensorcore/params.hpp"

namespace dynq {

// Checkpoint layout:
//   u64 little-endian  header length H
//   H bytes            JSON index {"__metadata__": {...},
//                                  name: {"offset", "shape", "frozen"}, ...}
//   payload            little-endian float64 values, offsets in bytes from
//                      the start of the payload
struct Checkpoint {
  ParameterSet params;
  nlohmann::json metadata = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params,
                     const nlohmann::json& metadata = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const ParameterSet& params, const nlohmann::json& metadata);
Checkpoint decode_checkpoint(const std::string& bytes);

}  // namespace dynq
