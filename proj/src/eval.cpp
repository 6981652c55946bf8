#include "gap/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gap/errors.hpp"

namespace gap::eval {

using json = nlohmann::json;

std::vector<double> make_grid(double lo, double hi, double step) {
    if (!(step > 0.0) || hi < lo) throw ConfigError("grid: need step > 0 and hi >= lo");
    const auto n = static_cast<std::size_t>(std::llround((hi - lo) / step)) + 1;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::round((lo + double(i) * step) * 1e9) / 1e9;
    return out;
}

double interpolated_ap(std::span<const ScoredSegment> detections, std::span<const GroundTruth> ground_truth,
                       double iou_threshold) {
    if (ground_truth.empty()) return 0.0;

    std::map<std::string, std::vector<std::size_t>> gt_by_video;
    for (std::size_t g = 0; g < ground_truth.size(); ++g) gt_by_video[ground_truth[g].video_id].push_back(g);

    std::vector<std::size_t> order(detections.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });

    std::vector<bool> locked(ground_truth.size(), false);
    std::vector<double> precision;
    std::vector<double> recall;
    std::size_t tp = 0, fp = 0;
    for (std::size_t idx : order) {
        const auto& det = detections[idx];
        bool hit = false;
        if (auto it = gt_by_video.find(det.video_id); it != gt_by_video.end()) {
            std::vector<std::pair<double, std::size_t>> cand;
            for (std::size_t g : it->second) cand.emplace_back(tiou(det.segment, ground_truth[g].segment), g);
            std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
            for (const auto& [iou, g] : cand) {
                if (iou < iou_threshold) break;
                if (locked[g]) continue;
                locked[g] = true;
                hit = true;
                break;
            }
        }
        hit ? ++tp : ++fp;
        precision.push_back(double(tp) / double(tp + fp));
        recall.push_back(double(tp) / double(ground_truth.size()));
    }

    // Precision envelope, integrated over the recall steps.
    std::vector<double> mprec = {0.0}, mrec = {0.0};
    mprec.insert(mprec.end(), precision.begin(), precision.end());
    mrec.insert(mrec.end(), recall.begin(), recall.end());
    mprec.push_back(0.0);
    mrec.push_back(1.0);
    for (std::size_t i = mprec.size() - 1; i-- > 0;) mprec[i] = std::max(mprec[i], mprec[i + 1]);
    double ap = 0.0;
    for (std::size_t i = 1; i < mrec.size(); ++i) {
        if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mprec[i];
    }
    return ap;
}

MapResult map_suite(const zeroshot::DetectionMap& detections, std::span<const io::AnnotationSet> annotations,
                    std::span<const double> iou_grid) {
    std::map<std::string, std::vector<GroundTruth>> gt;
    for (const auto& set : annotations) {
        for (const auto& inst : set.instances) gt[inst.label].push_back({set.video_id, inst.interval()});
    }
    std::map<std::string, std::vector<ScoredSegment>> det;
    for (const auto& [video, list] : detections) {
        for (const auto& d : list) det[d.label].push_back({video, d.interval(), d.score});
    }

    MapResult out;
    out.thresholds.assign(iou_grid.begin(), iou_grid.end());
    out.map.assign(iou_grid.size(), 0.0);
    for (const auto& [label, truths] : gt) {
        auto& row = out.per_class[label];
        const auto it = det.find(label);
        const std::span<const ScoredSegment> mine =
            it == det.end() ? std::span<const ScoredSegment>() : std::span<const ScoredSegment>(it->second);
        for (std::size_t k = 0; k < iou_grid.size(); ++k) row.push_back(interpolated_ap(mine, truths, iou_grid[k]));
    }
    if (!out.per_class.empty()) {
        for (std::size_t k = 0; k < iou_grid.size(); ++k) {
            double s = 0.0;
            for (const auto& [label, row] : out.per_class) s += row[k];
            out.map[k] = s / double(out.per_class.size());
        }
    }
    if (!out.map.empty()) {
        out.average_map = std::accumulate(out.map.begin(), out.map.end(), 0.0) / double(out.map.size());
    }
    return out;
}

std::size_t greedy_matches(std::span<const Interval> proposals, std::span<const Interval> ground_truth,
                           double threshold) {
    struct Pair {
        double iou;
        std::size_t p, g;
    };
    std::vector<Pair> pairs;
    for (std::size_t p = 0; p < proposals.size(); ++p) {
        for (std::size_t g = 0; g < ground_truth.size(); ++g) {
            const double iou = tiou(proposals[p], ground_truth[g]);
            if (iou >= threshold) pairs.push_back({iou, p, g});
        }
    }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });
    std::vector<bool> used_p(proposals.size(), false), used_g(ground_truth.size(), false);
    std::size_t matched = 0;
    for (const auto& pr : pairs) {
        if (used_p[pr.p] || used_g[pr.g]) continue;
        used_p[pr.p] = used_g[pr.g] = true;
        ++matched;
    }
    return matched;
}

RecallResult recall_auc(const std::map<std::string, std::vector<Interval>>& proposals,
                        std::span<const io::AnnotationSet> annotations, std::span<const double> tiou_grid,
                        std::span<const std::size_t> an_grid, std::size_t an_max) {
    if (an_max == 0) throw ConfigError("recall_auc: an_max must be positive");
    if (tiou_grid.empty()) throw ConfigError("recall_auc: empty tIoU grid");

    struct VideoCase {
        std::vector<Interval> gt;
        std::span<const Interval> ranked;
    };
    std::vector<VideoCase> videos;
    std::size_t total_gt = 0;
    for (const auto& set : annotations) {
        if (set.instances.empty()) continue;
        VideoCase v;
        for (const auto& inst : set.instances) v.gt.push_back(inst.interval());
        if (const auto it = proposals.find(set.video_id); it != proposals.end()) v.ranked = it->second;
        total_gt += v.gt.size();
        videos.push_back(std::move(v));
    }

    auto ar_at = [&](std::size_t an) {
        if (total_gt == 0) return 0.0;
        double acc = 0.0;
        for (double thr : tiou_grid) {
            std::size_t hits = 0;
            for (const auto& v : videos) hits += greedy_matches(v.ranked.first(std::min(an, v.ranked.size())), v.gt, thr);
            acc += double(hits) / double(total_gt);
        }
        return acc / double(tiou_grid.size());
    };

    RecallResult out;
    out.an_grid.assign(an_grid.begin(), an_grid.end());
    out.ar_curve.resize(an_max);
    for (std::size_t an = 1; an <= an_max; ++an) out.ar_curve[an - 1] = ar_at(an);
    for (std::size_t an : an_grid) out.ar_at_an.push_back(an >= 1 && an <= an_max ? out.ar_curve[an - 1] : ar_at(an));
    double area = 0.0;
    for (std::size_t i = 1; i < an_max; ++i) area += 0.5 * (out.ar_curve[i - 1] + out.ar_curve[i]);
    out.auc = area / double(an_max);

    if (total_gt > 0) {
        double sum = 0.0;
        for (const auto& v : videos) {
            const auto top = v.ranked.first(std::min(an_max, v.ranked.size()));
            for (const auto& g : v.gt) {
                double best = 0.0;
                for (const auto& p : top) best = std::max(best, tiou(p, g));
                sum += best;
            }
        }
        out.miou = sum / double(total_gt);
    }
    return out;
}

namespace {

std::string key(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

}  // namespace

json report_to_json(const EvalReport& report) {
    json map = json::object();
    for (std::size_t k = 0; k < report.map.thresholds.size(); ++k) map[key(report.map.thresholds[k])] = report.map.map[k];
    json per_class = json::object();
    for (const auto& [label, row] : report.map.per_class) {
        json r = json::object();
        for (std::size_t k = 0; k < row.size(); ++k) r[key(report.map.thresholds[k])] = row[k];
        per_class[label] = std::move(r);
    }
    json ar = json::object();
    for (std::size_t k = 0; k < report.recall.an_grid.size(); ++k) {
        ar[std::to_string(report.recall.an_grid[k])] = report.recall.ar_at_an[k];
    }
    return {{"map_per_iou", map},
            {"average_map", report.map.average_map},
            {"ar_at_an", ar},
            {"auc", report.recall.auc},
            {"miou", report.recall.miou},
            {"per_class_ap", per_class}};
}

std::string report_table(const EvalReport& report) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << std::left << std::setw(12) << "tIoU";
    for (double t : report.map.thresholds) os << std::right << std::setw(8) << key(t);
    os << std::right << std::setw(8) << "AVG" << '\n';
    os << std::left << std::setw(12) << "mAP (%)";
    for (double m : report.map.map) os << std::right << std::setw(8) << 100.0 * m;
    os << std::right << std::setw(8) << 100.0 * report.map.average_map << '\n';
    os << '\n' << std::left << std::setw(12) << "AN";
    for (std::size_t an : report.recall.an_grid) os << std::right << std::setw(8) << ("@" + std::to_string(an));
    os << std::right << std::setw(8) << "AUC" << std::setw(8) << "mIoU" << '\n';
    os << std::left << std::setw(12) << "AR (%)";
    for (double ar : report.recall.ar_at_an) os << std::right << std::setw(8) << 100.0 * ar;
    os << std::right << std::setw(8) << 100.0 * report.recall.auc << std::setw(8) << 100.0 * report.recall.miou
       << '\n';
    return os.str();
}

}  // namespace gap::eval
