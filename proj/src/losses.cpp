#include "gap/losses.hpp"

#include <algorithm>
#include <cmath>

#include "gap/errors.hpp"

namespace gap::loss {

using tensor::Shape;

void LossWeights::validate() const {
    const double all[] = {match_alpha, match_beta, match_gamma, cls, l1, tiou, lambda_ad, focal_alpha, focal_gamma};
    for (double w : all) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and non-negative");
    }
    if (focal_alpha > 1.0) throw ConfigError("focal_alpha must lie in [0, 1]");
}

FrameMask build_mask(std::span<const io::ActionInstance> instances, std::size_t frames) {
    FrameMask mask(frames, 0);
    for (std::size_t i = 1; i <= frames; ++i) {
        const double pos = double(i) / double(frames);
        for (const auto& inst : instances) {
            if (pos >= inst.start && pos <= inst.end) {
                mask[i - 1] = 1;
                break;
            }
        }
    }
    return mask;
}

namespace {

// p_t = t ? p : 1 - p, as (1 - t) + (2t - 1) p.
template <typename T>
Tensor<T> target_prob(const Tensor<T>& p, std::span<const std::uint8_t> targets) {
    const std::size_t n = p.numel();
    std::vector<T> offset(n), sign(n);
    for (std::size_t i = 0; i < n; ++i) {
        offset[i] = targets[i] ? T(0) : T(1);
        sign[i] = targets[i] ? T(1) : T(-1);
    }
    return tensor::add(tensor::mul(p, Tensor<T>(p.shape(), std::move(sign))), Tensor<T>(p.shape(), std::move(offset)));
}

template <typename T>
Tensor<T> clamped_log(const Tensor<T>& p) {
    return tensor::log(tensor::clamp(p, T(prob_floor), T(1.0 - prob_floor)));
}

}  // namespace

template <typename T>
Tensor<T> actionness_loss(const Tensor<T>& logits, const FrameMask& mask) {
    if (logits.numel() != mask.size()) {
        throw ShapeError("actionness_loss: " + std::to_string(logits.numel()) + " logits for a mask of " +
                         std::to_string(mask.size()) + " frames");
    }
    const auto flat = logits.reshape({logits.numel()});
    const auto pt = target_prob(tensor::sigmoid(flat), std::span<const std::uint8_t>(mask));
    return tensor::scale(tensor::sum(clamped_log(pt)), T(-1));
}

double focal_loss(double score, bool target, double alpha, double gamma) {
    const double pt = target ? score : 1.0 - score;
    const double at = target ? alpha : 1.0 - alpha;
    return -at * std::pow(1.0 - pt, gamma) * std::log(std::clamp(pt, prob_floor, 1.0 - prob_floor));
}

template <typename T>
Tensor<T> focal_loss(const Tensor<T>& scores, std::span<const std::uint8_t> targets, double alpha, double gamma) {
    if (scores.numel() != targets.size()) throw ShapeError("focal_loss: scores and targets differ in length");
    const auto flat = scores.reshape({scores.numel()});
    const auto pt = target_prob(flat, targets);
    std::vector<T> at(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) at[i] = T(-(targets[i] ? alpha : 1.0 - alpha));
    const auto modulator = tensor::pow(tensor::add_scalar(tensor::scale(pt, T(-1)), T(1)), T(gamma));
    return tensor::mul(tensor::mul(modulator, clamped_log(pt)), Tensor<T>(flat.shape(), std::move(at)));
}

double endpoint_l1(const Interval& a, const Interval& b) {
    return 0.5 * (std::abs(a.start - b.start) + std::abs(a.end - b.end));
}

double proposal_tiou(const Interval& pred, const Interval& target) {
    if (pred.start > pred.end) return 0.0;
    return tiou(pred, target);
}

CostMatrix cost_matrix(std::span<const Interval> proposals, std::span<const double> scores,
                       std::span<const Interval> targets, const LossWeights& weights) {
    if (proposals.size() != scores.size()) throw ShapeError("cost_matrix: proposals and scores differ in length");
    const std::size_t n = std::max(proposals.size(), targets.size());
    CostMatrix cost(n, 0.0);
    for (std::size_t i = 0; i < proposals.size(); ++i) {
        for (std::size_t j = 0; j < targets.size(); ++j) {
            cost(i, j) = weights.match_alpha * endpoint_l1(proposals[i], targets[j]) -
                         weights.match_beta * proposal_tiou(proposals[i], targets[j]) -
                         weights.match_gamma * scores[i];
        }
    }
    return cost;
}

Matching match(std::span<const Interval> proposals, std::span<const double> scores,
               std::span<const Interval> targets, const LossWeights& weights) {
    const auto assignment = hungarian(cost_matrix(proposals, scores, targets, weights));
    Matching result;
    for (std::size_t q = 0; q < proposals.size(); ++q) {
        const std::size_t t = assignment.column_of(q);
        if (t < targets.size()) {
            result.pairs.emplace_back(q, t);
        } else {
            result.unmatched_queries.push_back(q);
        }
    }
    return result;
}

template <typename T>
DetectionLoss<T> detection_loss(const Tensor<T>& proposals, const Tensor<T>& scores,
                                std::span<const Interval> targets, const LossWeights& weights) {
    if (proposals.rank() != 2 || proposals.dim(1) != 2 || scores.numel() != proposals.dim(0)) {
        throw ShapeError("detection_loss: expected proposals [N, 2] and scores [N], got " +
                         tensor::shape_str(proposals.shape()) + " and " + tensor::shape_str(scores.shape()));
    }
    const std::size_t nq = proposals.dim(0);
    std::vector<Interval> props(nq);
    std::vector<double> xi(nq);
    for (std::size_t i = 0; i < nq; ++i) {
        props[i] = {double(proposals.at(i, 0)), double(proposals.at(i, 1))};
        xi[i] = double(scores[i]);
    }

    DetectionLoss<T> out;
    out.matching = match(props, xi, targets, weights);

    std::vector<std::uint8_t> is_fg(nq, 0);
    for (const auto& [q, t] : out.matching.pairs) is_fg[q] = 1;
    out.cls = tensor::mean(focal_loss(scores, is_fg, weights.focal_alpha, weights.focal_gamma));

    const std::size_t m = out.matching.pairs.size();
    if (m == 0) {
        out.l1 = Tensor<T>::scalar(T(0));
        out.tiou = Tensor<T>::scalar(T(0));
    } else {
        std::vector<std::size_t> rows(m);
        std::vector<T> tgt(2 * m);
        for (std::size_t k = 0; k < m; ++k) {
            const auto& [q, t] = out.matching.pairs[k];
            rows[k] = q;
            tgt[2 * k] = T(targets[t].start);
            tgt[2 * k + 1] = T(targets[t].end);
        }
        const auto pred = tensor::gather_rows(proposals, std::span<const std::size_t>(rows));
        const Tensor<T> target(Shape{m, 2}, std::move(tgt));
        out.l1 = tensor::mean(tensor::abs(tensor::sub(pred, target)));
        out.tiou = tensor::add_scalar(tensor::scale(tensor::mean(tensor::interval_iou(pred, target)), T(-1)), T(1));
    }
    out.total = tensor::add(tensor::add(tensor::scale(out.cls, T(weights.cls)), tensor::scale(out.l1, T(weights.l1))),
                            tensor::scale(out.tiou, T(weights.tiou)));
    return out;
}

template <typename T>
TotalLoss<T> total_loss(const Tensor<T>& proposals, const Tensor<T>& scores, const Tensor<T>& actionness_logits,
                        std::span<const Interval> targets, const FrameMask& mask, const LossWeights& weights,
                        bool use_actionness) {
    TotalLoss<T> out;
    out.detection = detection_loss(proposals, scores, targets, weights);
    out.total = out.detection.total;
    if (use_actionness) {
        out.actionness = actionness_loss(actionness_logits, mask);
        out.total = tensor::add(out.total, tensor::scale(out.actionness, T(weights.lambda_ad)));
    }
    return out;
}

std::vector<Interval> target_intervals(std::span<const io::ActionInstance> instances) {
    std::vector<Interval> out;
    out.reserve(instances.size());
    for (const auto& inst : instances) out.push_back(inst.interval());
    return out;
}

#define GAP_INSTANTIATE_LOSSES(T)                                                                                 \
    template Tensor<T> actionness_loss(const Tensor<T>&, const FrameMask&);                                       \
    template Tensor<T> focal_loss(const Tensor<T>&, std::span<const std::uint8_t>, double, double);               \
    template DetectionLoss<T> detection_loss(const Tensor<T>&, const Tensor<T>&, std::span<const Interval>,       \
                                             const LossWeights&);                                                 \
    template TotalLoss<T> total_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                        \
                                     std::span<const Interval>, const FrameMask&, const LossWeights&, bool);

GAP_INSTANTIATE_LOSSES(float)
GAP_INSTANTIATE_LOSSES(double)

}  // namespace gap::loss
