#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <vector>

#include "gap/feature_io.hpp"

namespace gap::io {

// Desk-scale seen/unseen dataset. Every class owns a random unit prototype
// that doubles as its text embedding; a video holds one to a few
// non-overlapping instances of a single class, each rendered as the
// prototype under a trapezoidal envelope (20% ramp, 60% plateau, 20% ramp)
// on top of Gaussian noise.
struct SyntheticSpec {
    std::size_t num_classes = 8;
    std::size_t videos_per_class = 12;
    std::size_t frames = 32;  // T
    std::size_t dim = 16;     // D
    // Prototype norm over noise norm; infinity gives noiseless frames.
    double snr = 4.0;
    std::uint64_t seed = 0;
    std::size_t min_instances = 1;
    std::size_t max_instances = 2;
    double min_length = 0.15;  // normalized instance length
    double max_length = 0.35;
    double seen_fraction = 0.5;
    double seconds_per_frame = 1.0;

    void validate() const;
};

struct SyntheticDataset {
    std::vector<VideoFeatures> features;
    std::vector<AnnotationSet> annotations;  // all classes, normalized times
    TextEmbeddings text;
    ClassSplit split;
};

SyntheticDataset synth_generate(const SyntheticSpec& spec);

// Envelope weight at relative position r in [0, 1] of an instance.
double trapezoid_envelope(double r);

// Materializes features/<id>.gapf, annotations.json, split.json and
// text_embeddings.gapf (+ .json manifest) under `dir`.
void write_dataset(const SyntheticDataset& data, const std::filesystem::path& dir);

}  // namespace gap::io
