#include "gap/feature_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gap/errors.hpp"

namespace gap::io {

using nlohmann::json;

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
    const char bytes[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                           static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
    out.write(bytes, 4);
}

std::uint32_t get_u32(std::istream& in, const char* field) {
    unsigned char bytes[4];
    if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
        throw FormatError(std::string("GAPF: truncated header field '") + field + "'");
    }
    return std::uint32_t(bytes[0]) | (std::uint32_t(bytes[1]) << 8) | (std::uint32_t(bytes[2]) << 16) |
           (std::uint32_t(bytes[3]) << 24);
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    return out;
}

void expect_end(std::istream& in, const std::filesystem::path& path) {
    if (in.peek() != std::char_traits<char>::eof()) {
        throw FormatError("GAPF: trailing bytes after payload in " + path.string());
    }
}

json load_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void check_finite(const std::vector<float>& values, const std::string& what) {
    for (float v : values) {
        if (!std::isfinite(v)) throw ValidationError(what + ": non-finite value");
    }
}

}  // namespace

void write_gapf(std::ostream& out, const GapfMatrix& m) {
    if (m.values.size() != std::size_t(m.rows) * m.cols) {
        throw FormatError("GAPF: payload length does not match rows x cols");
    }
    out.write("GAPF", 4);
    put_u32(out, kGapfVersion);
    const char kind = static_cast<char>(m.kind);
    out.write(&kind, 1);
    put_u32(out, m.rows);
    put_u32(out, m.cols);
    for (float v : m.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
    if (!out) throw FormatError("GAPF: write failed");
}

GapfMatrix read_gapf(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4)) throw FormatError("GAPF: truncated header field 'magic'");
    if (std::string(magic, 4) != "GAPF") throw FormatError("GAPF: bad magic");
    const auto version = get_u32(in, "version");
    if (version != kGapfVersion) {
        throw FormatError("GAPF: version mismatch (file " + std::to_string(version) + ", expected " +
                          std::to_string(kGapfVersion) + ")");
    }
    char kind = 0;
    if (!in.read(&kind, 1)) throw FormatError("GAPF: truncated header field 'kind'");
    if (static_cast<unsigned char>(kind) > 2) {
        throw FormatError("GAPF: unknown kind " + std::to_string(static_cast<unsigned char>(kind)));
    }
    GapfMatrix m;
    m.kind = static_cast<PayloadKind>(kind);
    m.rows = get_u32(in, "rows");
    m.cols = get_u32(in, "cols");
    const std::size_t count = std::size_t(m.rows) * m.cols;
    std::vector<unsigned char> raw(count * 4);
    if (count > 0 && !in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
        throw FormatError("GAPF: truncated payload (expected " + std::to_string(count) + " floats)");
    }
    m.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const unsigned char* b = raw.data() + 4 * i;
        const std::uint32_t bits = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
                                   (std::uint32_t(b[3]) << 24);
        m.values[i] = std::bit_cast<float>(bits);
    }
    return m;
}

// ---------------------------------------------------------------------------

void VideoFeatures::validate() const {
    if (frames == 0 || dim == 0) throw ValidationError("features " + video_id + ": T and D must be positive");
    if (values.size() != frames * dim) throw ValidationError("features " + video_id + ": payload size mismatch");
    check_finite(values, "features " + video_id);
}

void write_features(const VideoFeatures& features, const std::filesystem::path& path) {
    features.validate();
    auto out = open_out(path);
    write_gapf(out, {PayloadKind::frame_features, static_cast<std::uint32_t>(features.frames),
                     static_cast<std::uint32_t>(features.dim), features.values});
}

VideoFeatures read_features(const std::filesystem::path& path) {
    auto in = open_in(path);
    auto m = read_gapf(in);
    if (m.kind != PayloadKind::frame_features) throw FormatError("GAPF: " + path.string() + " is not a frame-feature file");
    expect_end(in, path);
    VideoFeatures vf{path.stem().string(), m.rows, m.cols, std::move(m.values)};
    vf.validate();
    return vf;
}

// ---------------------------------------------------------------------------

void TextEmbeddings::validate() const {
    if (class_names.empty() || dim == 0) throw ValidationError("text embeddings: empty vocabulary or zero width");
    if (values.size() != class_names.size() * dim) throw ValidationError("text embeddings: payload size mismatch");
    check_finite(values, "text embeddings");
    for (std::size_t c = 0; c < class_names.size(); ++c) {
        double sq = 0;
        for (std::size_t d = 0; d < dim; ++d) sq += double(values[c * dim + d]) * values[c * dim + d];
        if (sq == 0.0) throw ValidationError("text embeddings: zero row for class '" + class_names[c] + "'");
    }
}

TextEmbeddings TextEmbeddings::subset(const std::vector<std::string>& names) const {
    TextEmbeddings out;
    out.dim = dim;
    for (const auto& name : names) {
        auto it = std::find(class_names.begin(), class_names.end(), name);
        if (it == class_names.end()) throw ValidationError("text embeddings: no row for class '" + name + "'");
        const auto row = static_cast<std::size_t>(it - class_names.begin());
        out.class_names.push_back(name);
        out.values.insert(out.values.end(), values.begin() + static_cast<std::ptrdiff_t>(row * dim),
                          values.begin() + static_cast<std::ptrdiff_t>((row + 1) * dim));
    }
    return out;
}

std::filesystem::path manifest_path_for(const std::filesystem::path& gapf_path) {
    auto p = gapf_path;
    p.replace_extension(".json");
    return p;
}

void write_text_embeddings(const TextEmbeddings& text, const std::filesystem::path& path) {
    text.validate();
    {
        auto out = open_out(path);
        write_gapf(out, {PayloadKind::text_embeddings, static_cast<std::uint32_t>(text.num_classes()),
                         static_cast<std::uint32_t>(text.dim), text.values});
    }
    std::ofstream manifest(manifest_path_for(path));
    manifest << json{{"classes", text.class_names}}.dump(2) << '\n';
}

TextEmbeddings read_text_embeddings(const std::filesystem::path& path) {
    auto in = open_in(path);
    auto m = read_gapf(in);
    if (m.kind != PayloadKind::text_embeddings) throw FormatError("GAPF: " + path.string() + " is not a text-embedding file");
    expect_end(in, path);
    const auto manifest = load_json(manifest_path_for(path));
    if (!manifest.contains("classes") || !manifest["classes"].is_array()) {
        throw FormatError("text manifest: missing 'classes' array");
    }
    TextEmbeddings text;
    text.class_names = manifest["classes"].get<std::vector<std::string>>();
    if (text.class_names.size() != m.rows) {
        throw FormatError("text manifest: " + std::to_string(text.class_names.size()) + " classes for " +
                          std::to_string(m.rows) + " rows");
    }
    text.dim = m.cols;
    text.values = std::move(m.values);
    text.validate();
    return text;
}

// ---------------------------------------------------------------------------

void ClassSplit::validate() const {
    if (seen.empty() || unseen.empty()) throw ValidationError("class split: seen and unseen must both be non-empty");
    std::set<std::string> s(seen.begin(), seen.end());
    for (const auto& c : unseen) {
        if (s.count(c)) throw ValidationError("class split: '" + c + "' is both seen and unseen");
    }
}

bool ClassSplit::is_seen(const std::string& label) const {
    return std::find(seen.begin(), seen.end(), label) != seen.end();
}

bool ClassSplit::is_unseen(const std::string& label) const {
    return std::find(unseen.begin(), unseen.end(), label) != unseen.end();
}

ClassSplit read_split(const std::filesystem::path& path) {
    const auto j = load_json(path);
    ClassSplit split;
    try {
        split.seen = j.at("seen").get<std::vector<std::string>>();
        split.unseen = j.at("unseen").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw FormatError("split " + path.string() + ": " + e.what());
    }
    split.validate();
    return split;
}

void write_split(const ClassSplit& split, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write " + path.string());
    out << json{{"seen", split.seen}, {"unseen", split.unseen}}.dump(2) << '\n';
}

std::vector<AnnotationSet> parse_annotations(const std::string& json_text, const ClassSplit& split, Phase phase) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("annotations: ") + e.what());
    }
    if (!root.contains("videos") || !root["videos"].is_array()) throw FormatError("annotations: missing 'videos' array");

    std::vector<AnnotationSet> result;
    std::vector<std::string> dropped;
    for (const auto& v : root["videos"]) {
        AnnotationSet set;
        double duration = 0;
        try {
            set.video_id = v.at("video_id").get<std::string>();
            duration = v.at("duration_seconds").get<double>();
        } catch (const json::exception& e) {
            throw FormatError(std::string("annotations: ") + e.what());
        }
        if (!(duration > 0) || !std::isfinite(duration)) {
            throw ValidationError("annotations: video " + set.video_id + " has non-positive duration");
        }
        set.duration_seconds = duration;
        for (const auto& inst : v.value("instances", json::array())) {
            double s = 0, e = 0;
            std::string label;
            try {
                s = inst.at("start_seconds").get<double>();
                e = inst.at("end_seconds").get<double>();
                label = inst.at("label").get<std::string>();
            } catch (const json::exception& ex) {
                throw FormatError("annotations: video " + set.video_id + ": " + ex.what());
            }
            if (!split.is_seen(label) && !split.is_unseen(label)) {
                throw ValidationError("annotations: video " + set.video_id + " has unknown label '" + label + "'");
            }
            if (!(s < e)) throw ValidationError("annotations: video " + set.video_id + " has start >= end");
            if (s < 0 || e > duration) {
                throw ValidationError("annotations: video " + set.video_id + " has an instance outside [0, duration]");
            }
            const bool keep = phase == Phase::train ? split.is_seen(label) : split.is_unseen(label);
            if (keep) set.instances.push_back({s / duration, e / duration, label});
        }
        if (phase == Phase::train && set.instances.empty()) {
            dropped.push_back(set.video_id);
            continue;
        }
        result.push_back(std::move(set));
    }
    if (!dropped.empty()) {
        std::cerr << "warning: dropped " << dropped.size() << " training video(s) without seen-class instances ("
                  << dropped.front();
        if (dropped.size() > 1) std::cerr << ", ..., " << dropped.back();
        std::cerr << ")\n";
    }
    return result;
}

std::vector<AnnotationSet> read_annotations(const std::filesystem::path& path, const ClassSplit& split, Phase phase) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_annotations(buffer.str(), split, phase);
}

void write_annotations(const std::vector<AnnotationSet>& sets, const std::filesystem::path& path) {
    json videos = json::array();
    for (const auto& set : sets) {
        json instances = json::array();
        for (const auto& inst : set.instances) {
            instances.push_back({{"start_seconds", inst.start * set.duration_seconds},
                                 {"end_seconds", inst.end * set.duration_seconds},
                                 {"label", inst.label}});
        }
        videos.push_back(
            {{"video_id", set.video_id}, {"duration_seconds", set.duration_seconds}, {"instances", instances}});
    }
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write " + path.string());
    out << json{{"videos", videos}}.dump(2) << '\n';
}

}  // namespace gap::io
