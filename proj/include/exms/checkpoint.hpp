#pragma once

#include <string>

#include <json.hpp>

#include "exms/model.hpp"

namespace exms {

// Container layout (little-endian):
//   bytes 0..3   magic "EXMS"
//   bytes 4..7   u32 format version
//   bytes 8..15  u64 manifest length in bytes
//   manifest     UTF-8 JSON: format_version, config, params (name-sorted,
//                each {name, shape, offset}; offset in bytes into the payload)
//   payload      raw float64 data, concatenated in manifest order
inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  Weights weights;
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
// Exhaustive: unknown or missing keys raise ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j);

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const Weights& w);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace exms
