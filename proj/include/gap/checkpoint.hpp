#pragma once

// Checkpoints reuse the GAPF container with kind 2:
//   17-byte header, rows = 1, cols = total parameter count
//   payload: every parameter flattened, concatenated in registry order
//   u32 little-endian manifest length, then that many bytes of UTF-8 JSON:
//     {"format": "gap-checkpoint", "model": {<ModelConfig fields>},
//      "tensors": [{"name": str, "shape": [int, ...]}, ...]}
// The manifest lists tensors in payload order.

#include <filesystem>

#include <nlohmann/json_fwd.hpp>

#include "gap/model.hpp"

namespace gap::model {

struct Checkpoint {
    ModelConfig config;
    ModelParams<float> params;
};

void save_checkpoint(const ModelConfig& config, const ModelParams<float>& params, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json model_config_to_json(const ModelConfig& config);
// Fields absent from `j` keep their value from `defaults`.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig defaults = {});

}  // namespace gap::model
