#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "gap/config.hpp"
#include "gap/gradcheck.hpp"

namespace gap::cli {

struct CommandOptions {
    std::filesystem::path config;
    std::optional<std::filesystem::path> checkpoint;
    std::filesystem::path out = "gap_out";
    std::optional<std::uint64_t> seed;
    std::optional<std::filesystem::path> detections;  // eval: score this dump instead of running the model
    std::optional<Ablation> ablation;
    std::optional<std::filesystem::path> features;    // infer: one .gapf file or a directory of them
};

// Loads --config and applies --seed / --ablation.
RunConfig resolve_config(const CommandOptions& options);

// Each command returns the process exit code; failures surface as
// exceptions from the gap error hierarchy.
int cmd_train(const CommandOptions& options, std::ostream& out);
int cmd_eval(const CommandOptions& options, std::ostream& out);
int cmd_infer(const CommandOptions& options, std::ostream& out);
int cmd_synth(const CommandOptions& options, std::ostream& out);
int cmd_gradcheck(const CommandOptions& options, std::ostream& out);

std::string gradcheck_table(const std::vector<check::GradcheckResult>& results, double tolerance);

}  // namespace gap::cli
