#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gap/feature_io.hpp"
#include "gap/interval.hpp"
#include "gap/model.hpp"

namespace gap::zeroshot {

struct Detection {
    std::string video_id;
    double start = 0.0;  // normalized, start <= end
    double end = 0.0;
    std::string label;
    double score = 0.0;       // foreground * class probability
    double foreground = 0.0;  // category-agnostic proposal confidence

    Interval interval() const { return {start, end}; }
};

struct Classification {
    std::size_t num_classes = 0;
    std::vector<std::size_t> labels;  // argmax per proposal, lowest index on ties
    std::vector<double> probs;        // proposals x classes, softmax over classes

    double prob(std::size_t proposal, std::size_t cls) const { return probs[proposal * num_classes + cls]; }
};

// RoIAlign the frame features over each proposal, average the bins, and
// compare with each class embedding by cosine similarity / tau. A pooled
// vector of zero norm scores cosine 0 against every class.
Classification classify(const io::VideoFeatures& features, std::span<const Interval> proposals,
                        const io::TextEmbeddings& text, std::size_t bins, double tau);

// All N_q detections for one video, score-descending (stable in query order).
std::vector<Detection> infer_video(const model::ModelParams<float>& params, const model::ModelConfig& config,
                                   const io::VideoFeatures& features, const io::TextEmbeddings& text, double tau);

// Detections keyed by video id.
using DetectionMap = std::map<std::string, std::vector<Detection>>;

// Segments are written in seconds: normalized * durations[video_id].
void write_detections(const DetectionMap& detections, const std::map<std::string, double>& durations,
                      const std::filesystem::path& path);
// Inverse of write_detections; each entry is sorted by score descending.
DetectionMap read_detections(const std::filesystem::path& path, const std::map<std::string, double>& durations);
DetectionMap parse_detections(const std::string& json_text, const std::map<std::string, double>& durations);

}  // namespace gap::zeroshot
