#pragma once

// GAPF containers, annotation/split JSON and the class-vocabulary types.
//
// GAPF layout (all integers and floats little-endian):
//   offset 0   4 bytes  magic "GAPF"
//   offset 4   u32      version (1)
//   offset 8   u8       kind (0 frame features, 1 text embeddings, 2 checkpoint)
//   offset 9   u32      rows
//   offset 13  u32      cols
//   offset 17  rows*cols f32, row-major
// Kinds 0 and 1 end right after the payload. Kind 2 appends a manifest
// trailer, see checkpoint.hpp.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "gap/interval.hpp"

namespace gap::io {

inline constexpr std::uint32_t kGapfVersion = 1;
inline constexpr std::size_t kGapfHeaderBytes = 17;

enum class PayloadKind : std::uint8_t { frame_features = 0, text_embeddings = 1, checkpoint = 2 };

struct GapfMatrix {
    PayloadKind kind = PayloadKind::frame_features;
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::vector<float> values;  // rows * cols, row-major
};

void write_gapf(std::ostream& out, const GapfMatrix& matrix);
// Reads header and payload; leaves the stream positioned after the payload.
GapfMatrix read_gapf(std::istream& in);

struct VideoFeatures {
    std::string video_id;
    std::size_t frames = 0;  // T
    std::size_t dim = 0;     // D
    std::vector<float> values;

    float at(std::size_t t, std::size_t d) const { return values[t * dim + d]; }
    void validate() const;
};

// The file name stem is the video id: <dir>/<video_id>.gapf
void write_features(const VideoFeatures& features, const std::filesystem::path& path);
VideoFeatures read_features(const std::filesystem::path& path);

struct TextEmbeddings {
    std::vector<std::string> class_names;
    std::size_t dim = 0;
    std::vector<float> values;  // class_names.size() x dim

    std::size_t num_classes() const { return class_names.size(); }
    void validate() const;
    // Rows for `names`, in that order; unknown names are a ValidationError.
    TextEmbeddings subset(const std::vector<std::string>& names) const;
};

// Writes the kind-1 file and its sibling manifest (same stem, .json).
void write_text_embeddings(const TextEmbeddings& text, const std::filesystem::path& path);
TextEmbeddings read_text_embeddings(const std::filesystem::path& path);
std::filesystem::path manifest_path_for(const std::filesystem::path& gapf_path);

struct ActionInstance {
    double start = 0.0;  // normalized
    double end = 0.0;
    std::string label;

    Interval interval() const { return {start, end}; }
};

struct AnnotationSet {
    std::string video_id;
    double duration_seconds = 0.0;
    std::vector<ActionInstance> instances;
};

struct ClassSplit {
    std::vector<std::string> seen;
    std::vector<std::string> unseen;

    void validate() const;
    bool is_seen(const std::string& label) const;
    bool is_unseen(const std::string& label) const;
};

enum class Phase { train, test };

ClassSplit read_split(const std::filesystem::path& path);
void write_split(const ClassSplit& split, const std::filesystem::path& path);

// Seconds in the file become normalized times. Train keeps seen labels and
// drops videos left without instances; test keeps unseen labels and keeps
// empty videos as negatives.
std::vector<AnnotationSet> read_annotations(const std::filesystem::path& path, const ClassSplit& split, Phase phase);
std::vector<AnnotationSet> parse_annotations(const std::string& json_text, const ClassSplit& split, Phase phase);
void write_annotations(const std::vector<AnnotationSet>& sets, const std::filesystem::path& path);

}  // namespace gap::io
