#pragma once

// Reference AP/mAP written directly from the metric definition, sharing no
// code with the library. Quadratic everywhere; only meant for micro-cases.

#include <algorithm>
#include <random>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "gap/feature_io.hpp"
#include "gap/interval.hpp"
#include "gap/zeroshot.hpp"

namespace gap::testing {

struct OracleDet {
    std::string video;
    double start, end, score;
};

struct OracleGt {
    std::string video;
    double start, end;
};

inline double oracle_iou(double s1, double e1, double s2, double e2) {
    const double lo = std::max(s1, s2), hi = std::min(e1, e2);
    const double inter = hi > lo ? hi - lo : 0.0;
    const double uni = (e1 - s1) + (e2 - s2) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

inline double oracle_ap(std::vector<OracleDet> dets, const std::vector<OracleGt>& gts, double thr) {
    if (gts.empty()) return 0.0;
    std::stable_sort(dets.begin(), dets.end(), [](const OracleDet& a, const OracleDet& b) { return a.score > b.score; });
    std::vector<int> is_tp;
    std::set<std::size_t> used;
    for (const auto& d : dets) {
        std::size_t pick = gts.size();
        double best = -1;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (gts[g].video != d.video || used.count(g)) continue;
            const double iou = oracle_iou(d.start, d.end, gts[g].start, gts[g].end);
            if (iou >= thr && iou > best) {
                best = iou;
                pick = g;
            }
        }
        if (pick < gts.size()) used.insert(pick);
        is_tp.push_back(pick < gts.size() ? 1 : 0);
    }
    const std::size_t n = is_tp.size();
    std::vector<double> prec(n);
    int tp = 0;
    for (std::size_t k = 0; k < n; ++k) {
        tp += is_tp[k];
        prec[k] = double(tp) / double(k + 1);
    }
    double ap = 0;
    for (std::size_t k = 0; k < n; ++k) {
        if (!is_tp[k]) continue;
        double envelope = 0;
        for (std::size_t j = k; j < n; ++j) envelope = std::max(envelope, prec[j]);
        ap += envelope / double(gts.size());
    }
    return ap;
}

// Mean AP over classes that have ground truth, per threshold.
inline std::vector<double> oracle_map(const zeroshot::DetectionMap& detections,
                                      const std::vector<io::AnnotationSet>& annotations,
                                      const std::vector<double>& thresholds) {
    std::map<std::string, std::vector<OracleGt>> gt;
    for (const auto& a : annotations)
        for (const auto& i : a.instances) gt[i.label].push_back({a.video_id, i.start, i.end});
    std::map<std::string, std::vector<OracleDet>> by_class;
    for (const auto& [video, dets] : detections)
        for (const auto& d : dets) by_class[d.label].push_back({video, d.start, d.end, d.score});
    std::vector<double> out;
    for (double thr : thresholds) {
        double total = 0;
        for (const auto& [label, g] : gt) total += oracle_ap(by_class[label], g, thr);
        out.push_back(gt.empty() ? 0.0 : total / double(gt.size()));
    }
    return out;
}

// Up to 5 videos, 4 classes, 3 ground-truth and 6 detections per video.
struct MicroCase {
    zeroshot::DetectionMap detections;
    std::vector<io::AnnotationSet> annotations;
};

inline MicroCase random_micro_case(std::mt19937_64& rng) {
    std::uniform_int_distribution<int> nvid(1, 5), ncls(1, 4), ngt(0, 3), ndet(0, 6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    // Coarse scores so that ties occur and the input-order rule is exercised.
    std::uniform_int_distribution<int> score(1, 8);
    MicroCase c;
    const int classes = ncls(rng);
    auto label = [&] { return "k" + std::to_string(std::uniform_int_distribution<int>(0, classes - 1)(rng)); };
    const int videos = nvid(rng);
    for (int v = 0; v < videos; ++v) {
        const std::string id = "v" + std::to_string(v);
        io::AnnotationSet set{id, 100.0, {}};
        for (int g = ngt(rng); g > 0; --g) {
            const auto iv = ordered({u(rng), u(rng)});
            set.instances.push_back({iv.start, iv.end, label()});
        }
        c.annotations.push_back(set);
        auto& dets = c.detections[id];
        for (int d = ndet(rng); d > 0; --d) {
            Interval iv;
            // Half the detections are jittered copies of ground truth.
            if (!set.instances.empty() && u(rng) < 0.5) {
                const auto& g = set.instances[std::uniform_int_distribution<std::size_t>(0, set.instances.size() - 1)(rng)];
                iv = ordered({std::clamp(g.start + 0.1 * (u(rng) - 0.5), 0.0, 1.0),
                              std::clamp(g.end + 0.1 * (u(rng) - 0.5), 0.0, 1.0)});
            } else {
                iv = ordered({u(rng), u(rng)});
            }
            dets.push_back({id, iv.start, iv.end, label(), score(rng) / 8.0, 0.5});
        }
    }
    return c;
}

}  // namespace gap::testing
