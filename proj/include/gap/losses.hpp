#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "gap/feature_io.hpp"
#include "gap/hungarian.hpp"
#include "gap/interval.hpp"
#include "gap/tensor.hpp"

namespace gap::loss {

using tensor::Tensor;

struct LossWeights {
    // Matching cost.
    double match_alpha = 5.0;
    double match_beta = 2.0;
    double match_gamma = 2.0;
    // Detection loss balance.
    double cls = 3.0;
    double l1 = 5.0;
    double tiou = 2.0;
    double lambda_ad = 3.0;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;

    void validate() const;
};

// Probabilities are clamped to this range before any log.
inline constexpr double prob_floor = 1e-7;

using FrameMask = std::vector<std::uint8_t>;

// Frame i (1-based) is foreground iff i/T lies inside some instance, both
// endpoints inclusive.
FrameMask build_mask(std::span<const io::ActionInstance> instances, std::size_t frames);

// Binary cross-entropy summed over frames.
template <typename T>
Tensor<T> actionness_loss(const Tensor<T>& logits, const FrameMask& mask);

double focal_loss(double score, bool target, double alpha, double gamma);
// Elementwise focal loss, [N] -> [N].
template <typename T>
Tensor<T> focal_loss(const Tensor<T>& scores, std::span<const std::uint8_t> targets, double alpha, double gamma);

// Mean absolute endpoint difference.
double endpoint_l1(const Interval& a, const Interval& b);
// tiou that scores a reversed prediction as 0, matching the tensor op.
double proposal_tiou(const Interval& pred, const Interval& target);

// Rows are queries, the first `targets.size()` columns are real targets and
// the rest are the empty target (cost 0). The matrix is padded to
// max(N_q, N_gt) with zero-cost dummy rows.
CostMatrix cost_matrix(std::span<const Interval> proposals, std::span<const double> scores,
                       std::span<const Interval> targets, const LossWeights& weights);

struct Matching {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (query, real target), sorted by query
    std::vector<std::size_t> unmatched_queries;
};

Matching match(std::span<const Interval> proposals, std::span<const double> scores,
               std::span<const Interval> targets, const LossWeights& weights);

template <typename T>
struct DetectionLoss {
    Tensor<T> total;
    Tensor<T> cls;   // mean focal over queries
    Tensor<T> l1;    // mean over matched real targets, 0 if none
    Tensor<T> tiou;  // mean (1 - IoU) over matched real targets, 0 if none
    Matching matching;
};

// proposals [N_q, 2], scores [N_q].
template <typename T>
DetectionLoss<T> detection_loss(const Tensor<T>& proposals, const Tensor<T>& scores,
                                std::span<const Interval> targets, const LossWeights& weights);

template <typename T>
struct TotalLoss {
    Tensor<T> total;
    DetectionLoss<T> detection;
    Tensor<T> actionness;  // undefined when the term is disabled
};

template <typename T>
TotalLoss<T> total_loss(const Tensor<T>& proposals, const Tensor<T>& scores, const Tensor<T>& actionness_logits,
                        std::span<const Interval> targets, const FrameMask& mask, const LossWeights& weights,
                        bool use_actionness);

std::vector<Interval> target_intervals(std::span<const io::ActionInstance> instances);

}  // namespace gap::loss
