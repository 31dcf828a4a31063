#pragma once

#include <cstdint>
#include <filesystem>

#include "json.hpp"
#include "sparseattn/denoiser.h"

namespace sparseattn {

struct CheckpointInfo {
  std::size_t step = 0;
  std::uint64_t seed = 0;
};

struct LoadedCheckpoint {
  DenoiserModel model;
  CheckpointInfo info;
};

// JSON views of the configuration structs. Parsing starts from the defaults,
// overrides present keys and rejects unknown ones with ConfigError.
nlohmann::json to_json(const DenoiserConfig& arch);
nlohmann::json to_json(const SparsityConfig& cfg);
nlohmann::json to_json(const AttentionMode& mode);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j);
SparsityConfig sparsity_config_from_json(const nlohmann::json& j);
AttentionMode attention_mode_from_json(const nlohmann::json& j);

// Layout: <dir>/manifest.json (architecture, attention mode, step, seed,
// parameter names and shapes) and <dir>/params/<name>.spt2.
void save_checkpoint(const std::filesystem::path& dir, const DenoiserModel& model, const CheckpointInfo& info);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace sparseattn
