#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "gap/config.hpp"
#include "gap/eval.hpp"
#include "gap/feature_io.hpp"
#include "gap/model.hpp"
#include "gap/zeroshot.hpp"

namespace gap::cli {

struct VideoSample {
    io::VideoFeatures features;
    io::AnnotationSet annotation;
};

// Annotated videos of one phase with their features. Throws ConfigError
// when a feature file is missing or its width differs from `expected_dim`.
std::vector<VideoSample> load_samples(const RunConfig& config, io::Phase phase, std::size_t expected_dim);

// Splits off round(fraction * n) samples (at most n - 1) for validation,
// chosen by a seeded shuffle; both parts keep their original order.
void hold_out(std::vector<VideoSample>& train, std::vector<VideoSample>& validation, double fraction,
              std::uint64_t seed);

struct EpochStats {
    std::size_t epoch = 0;  // 1-based
    double loss = 0.0;      // mean total objective per video
    double detection = 0.0;
    double cls = 0.0;
    double l1 = 0.0;
    double tiou = 0.0;
    double actionness = 0.0;
    std::optional<double> validation_ar;  // mean AR over the AN grid
    bool best = false;
};

struct TrainResult {
    model::ModelParams<float> last;
    model::ModelParams<float> best;
    std::vector<EpochStats> epochs;
    std::size_t best_epoch = 0;
};

struct TrainSinks {
    std::ostream* log = nullptr;           // one JSON object per epoch
    std::filesystem::path checkpoint_dir;  // checkpoint_{last,best}.gapf when set
};

// Single-threaded and fully determined by `config` (seed included).
TrainResult train_model(const RunConfig& config, const std::vector<VideoSample>& train,
                        const std::vector<VideoSample>& validation, const TrainSinks& sinks = {});

std::string epoch_log_line(const EpochStats& stats);

// Worker count from GAP_THREADS, else the hardware concurrency.
std::size_t worker_count();
// Runs fn(0..n-1) on up to `workers` threads; rethrows the first failure.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

zeroshot::DetectionMap infer_all(const model::ModelParams<float>& params, const model::ModelConfig& config,
                                 const std::vector<io::VideoFeatures>& videos, const io::TextEmbeddings& text,
                                 double tau, std::size_t workers);

// Category-agnostic proposals per video ranked by foreground score.
std::map<std::string, std::vector<Interval>> ranked_proposals(const zeroshot::DetectionMap& detections);

eval::EvalReport evaluate(const zeroshot::DetectionMap& detections, const std::vector<io::AnnotationSet>& annotations,
                          const EvalConfig& config);

// Mean AR over the AN grid of the model's foreground-ranked proposals.
double proposal_recall(const model::ModelParams<float>& params, const model::ModelConfig& config,
                       const std::vector<VideoSample>& samples, const EvalConfig& eval_config);

}  // namespace gap::cli
