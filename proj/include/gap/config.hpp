#pragma once

// Run configuration: one JSON document,
//   {"data": {...}, "model": {...}, "loss": {...}, "optimizer": {...},
//    "inference": {...}, "eval": {...}, "synth": {...}, "seed": N}
// Every field except the dataset paths has a default. Relative paths are
// resolved against the directory of the config file.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "gap/adamw.hpp"
#include "gap/losses.hpp"
#include "gap/model.hpp"
#include "gap/synthetic.hpp"

namespace gap::cli {

struct DataConfig {
    std::filesystem::path features_dir;
    std::filesystem::path annotations;
    std::filesystem::path split;
    std::filesystem::path text_embeddings;
    // Used for durations when a video has no annotation entry.
    double seconds_per_frame = 1.0;
    // Share of training videos held out for checkpoint selection.
    double validation_fraction = 0.1;
};

struct OptimizerConfig {
    tensor::AdamWOptions adamw;
    std::size_t batch_size = 16;  // videos accumulated per update
    std::size_t epochs = 50;
};

struct EvalConfig {
    std::vector<double> map_iou_grid;   // default 0.3:0.1:0.7
    std::vector<double> tiou_grid;      // default 0.5:0.05:1.0
    std::vector<std::size_t> an_grid = {10, 25, 40};
    std::size_t an_max = 40;

    EvalConfig();
};

enum class Ablation { full, no_rectify, no_rectify_no_actionness };

Ablation parse_ablation(const std::string& s);
std::string to_string(Ablation a);
void apply_ablation(model::ModelConfig& config, Ablation a);

struct RunConfig {
    DataConfig data;
    model::ModelConfig model;
    loss::LossWeights loss;
    OptimizerConfig optimizer;
    double tau = 0.01;
    EvalConfig eval;
    io::SyntheticSpec synth;
    std::uint64_t seed = 0;

    // Checks everything except dataset paths.
    void validate() const;
    // Throws ConfigError naming the first missing dataset file.
    void require_data_paths() const;
};

RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json run_config_to_json(const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& config, const std::filesystem::path& path);

}  // namespace gap::cli
