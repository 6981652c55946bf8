#include "gap/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "gap/errors.hpp"

namespace gap::io {

void SyntheticSpec::validate() const {
    if (num_classes < 2 || videos_per_class == 0 || frames == 0 || dim == 0) {
        throw ConfigError("synthetic spec: counts must be positive and num_classes >= 2");
    }
    if (min_instances == 0 || min_instances > max_instances) throw ConfigError("synthetic spec: bad instance range");
    if (!(min_length > 0) || min_length > max_length || max_length > 1) {
        throw ConfigError("synthetic spec: bad instance length range");
    }
    if (!(snr > 0)) throw ConfigError("synthetic spec: snr must be positive");
    if (!(seen_fraction > 0 && seen_fraction < 1)) throw ConfigError("synthetic spec: seen_fraction must be in (0, 1)");
    if (!(seconds_per_frame > 0)) throw ConfigError("synthetic spec: seconds_per_frame must be positive");
}

double trapezoid_envelope(double r) {
    if (r < 0.0 || r > 1.0) return 0.0;
    if (r < 0.2) return r / 0.2;
    if (r > 0.8) return (1.0 - r) / 0.2;
    return 1.0;
}

namespace {

std::string class_name(std::size_t k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "class_%02zu", k);
    return buf;
}

// Non-overlapping segments with sampled lengths and random gaps.
std::vector<Interval> place_segments(std::size_t count, const SyntheticSpec& spec, std::mt19937_64& rng) {
    if (double(count) * spec.min_length > 1.0) {
        throw GenerationError("synthetic: " + std::to_string(count) + " instances of length >= " +
                              std::to_string(spec.min_length) + " cannot fit without overlap");
    }
    std::uniform_real_distribution<double> len_dist(spec.min_length, spec.max_length);
    std::vector<double> lengths(count);
    double total = 0;
    for (int attempt = 0;; ++attempt) {
        total = 0;
        for (auto& l : lengths) {
            l = len_dist(rng);
            total += l;
        }
        if (total <= 1.0) break;
        if (attempt == 100) {
            throw GenerationError("synthetic: could not fit " + std::to_string(count) + " instances without overlap");
        }
    }
    std::exponential_distribution<double> gap_dist(1.0);
    std::vector<double> gaps(count + 1);
    for (auto& g : gaps) g = gap_dist(rng);
    const double gap_total = std::accumulate(gaps.begin(), gaps.end(), 0.0);
    const double free_space = 1.0 - total;
    std::vector<Interval> segments;
    double cursor = 0;
    for (std::size_t i = 0; i < count; ++i) {
        cursor += free_space * gaps[i] / gap_total;
        segments.push_back({cursor, std::min(1.0, cursor + lengths[i])});
        cursor += lengths[i];
    }
    return segments;
}

}  // namespace

SyntheticDataset synth_generate(const SyntheticSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    SyntheticDataset data;
    data.text.dim = spec.dim;
    std::vector<std::vector<double>> prototypes(spec.num_classes, std::vector<double>(spec.dim));
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
        double sq = 0;
        for (auto& v : prototypes[k]) {
            v = gauss(rng);
            sq += v * v;
        }
        const double norm = std::sqrt(sq);
        for (auto& v : prototypes[k]) v /= norm;
        data.text.class_names.push_back(class_name(k));
        for (double v : prototypes[k]) data.text.values.push_back(static_cast<float>(v));
    }

    std::vector<std::size_t> order(spec.num_classes);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    auto num_seen = static_cast<std::size_t>(std::llround(spec.seen_fraction * double(spec.num_classes)));
    num_seen = std::clamp<std::size_t>(num_seen, 1, spec.num_classes - 1);
    std::vector<std::size_t> seen_ids(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(num_seen));
    std::vector<std::size_t> unseen_ids(order.begin() + static_cast<std::ptrdiff_t>(num_seen), order.end());
    std::sort(seen_ids.begin(), seen_ids.end());
    std::sort(unseen_ids.begin(), unseen_ids.end());
    for (auto k : seen_ids) data.split.seen.push_back(class_name(k));
    for (auto k : unseen_ids) data.split.unseen.push_back(class_name(k));

    const double noise_std = std::isinf(spec.snr) ? 0.0 : 1.0 / (spec.snr * std::sqrt(double(spec.dim)));
    std::uniform_int_distribution<std::size_t> count_dist(spec.min_instances, spec.max_instances);
    const double duration = double(spec.frames) * spec.seconds_per_frame;

    for (std::size_t k = 0; k < spec.num_classes; ++k) {
        for (std::size_t v = 0; v < spec.videos_per_class; ++v) {
            char id[48];
            std::snprintf(id, sizeof id, "synth_c%02zu_v%03zu", k, v);
            const auto segments = place_segments(count_dist(rng), spec, rng);

            VideoFeatures vf{id, spec.frames, spec.dim, std::vector<float>(spec.frames * spec.dim)};
            for (std::size_t t = 0; t < spec.frames; ++t) {
                const double center = (double(t) + 0.5) / double(spec.frames);
                double env = 0;
                for (const auto& seg : segments) {
                    if (center >= seg.start && center <= seg.end) {
                        env = trapezoid_envelope((center - seg.start) / seg.length());
                    }
                }
                for (std::size_t d = 0; d < spec.dim; ++d) {
                    const double noise = noise_std > 0 ? noise_std * gauss(rng) : 0.0;
                    vf.values[t * spec.dim + d] = static_cast<float>(env * prototypes[k][d] + noise);
                }
            }
            AnnotationSet ann{id, duration, {}};
            for (const auto& seg : segments) ann.instances.push_back({seg.start, seg.end, class_name(k)});
            data.features.push_back(std::move(vf));
            data.annotations.push_back(std::move(ann));
        }
    }
    return data;
}

void write_dataset(const SyntheticDataset& data, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "features");
    for (const auto& vf : data.features) write_features(vf, dir / "features" / (vf.video_id + ".gapf"));
    write_annotations(data.annotations, dir / "annotations.json");
    write_split(data.split, dir / "split.json");
    write_text_embeddings(data.text, dir / "text_embeddings.gapf");
}

}  // namespace gap::io
