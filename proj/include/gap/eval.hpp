#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "gap/feature_io.hpp"
#include "gap/interval.hpp"
#include "gap/zeroshot.hpp"

namespace gap::eval {

struct ScoredSegment {
    std::string video_id;
    Interval segment;
    double score = 0.0;
};

struct GroundTruth {
    std::string video_id;
    Interval segment;
};

// Inclusive arithmetic grid lo, lo + step, ..., hi with values rounded to
// 1e-9 so that e.g. 0.5 + 2 * 0.05 compares equal to 0.6.
std::vector<double> make_grid(double lo, double hi, double step);

// Detections of one class in score-descending order (ties keep input order).
// Each detection takes the highest-tIoU unmatched ground truth of its video
// when that tIoU reaches the threshold. Returns 0 when there is no ground
// truth.
double interpolated_ap(std::span<const ScoredSegment> detections, std::span<const GroundTruth> ground_truth,
                       double iou_threshold);

struct MapResult {
    std::vector<double> thresholds;
    std::vector<double> map;  // per threshold
    double average_map = 0.0;
    // Classes with at least one ground-truth instance, AP per threshold.
    std::map<std::string, std::vector<double>> per_class;
};

MapResult map_suite(const zeroshot::DetectionMap& detections, std::span<const io::AnnotationSet> annotations,
                    std::span<const double> iou_grid);

struct RecallResult {
    std::vector<std::size_t> an_grid;
    std::vector<double> ar_at_an;  // per entry of an_grid
    std::vector<double> ar_curve;  // AR at AN = 1..an_max
    double auc = 0.0;
    double miou = 0.0;
};

// `proposals` maps video id to category-agnostic proposals, best first.
RecallResult recall_auc(const std::map<std::string, std::vector<Interval>>& proposals,
                        std::span<const io::AnnotationSet> annotations, std::span<const double> tiou_grid,
                        std::span<const std::size_t> an_grid, std::size_t an_max);

// Ground-truth instances recovered by greedy one-to-one matching (highest
// tIoU pair first) at one threshold.
std::size_t greedy_matches(std::span<const Interval> proposals, std::span<const Interval> ground_truth,
                           double threshold);

struct EvalReport {
    MapResult map;
    RecallResult recall;
};

nlohmann::json report_to_json(const EvalReport& report);
std::string report_table(const EvalReport& report);

}  // namespace gap::eval
