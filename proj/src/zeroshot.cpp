#include "gap/zeroshot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gap/errors.hpp"

namespace gap::zeroshot {

using json = nlohmann::json;
using tensor::Tensor;

Classification classify(const io::VideoFeatures& features, std::span<const Interval> proposals,
                        const io::TextEmbeddings& text, std::size_t bins, double tau) {
    if (features.dim != text.dim) {
        throw ShapeError("classify: feature width " + std::to_string(features.dim) +
                         " does not match text embedding width " + std::to_string(text.dim));
    }
    if (!(tau > 0.0)) throw ContractError("classify: tau must be positive");
    const std::size_t n = proposals.size(), nc = text.num_classes(), d = features.dim;

    Classification out;
    out.num_classes = nc;
    out.labels.assign(n, 0);
    out.probs.assign(n * nc, 0.0);
    if (n == 0 || nc == 0) return out;

    std::vector<double> coords(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        coords[2 * i] = proposals[i].start;
        coords[2 * i + 1] = proposals[i].end;
    }
    tensor::Tape<double> quiet(tensor::TapeMode::forward_only);
    tensor::Tape<double>::Scope scope(quiet);
    const auto pooled =
        tensor::mean_axis(tensor::roi_align(model::features_tensor<double>(features), Tensor<double>({n, 2}, coords), bins), 1);

    std::vector<double> text_norm(nc, 0.0);
    for (std::size_t c = 0; c < nc; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += double(text.values[c * d + k]) * text.values[c * d + k];
        text_norm[c] = std::sqrt(s);
    }

    auto pd = pooled.data();
    std::vector<double> logits(nc);
    for (std::size_t i = 0; i < n; ++i) {
        const double* v = pd.data() + i * d;
        double vn = 0.0;
        for (std::size_t k = 0; k < d; ++k) vn += v[k] * v[k];
        vn = std::sqrt(vn);
        for (std::size_t c = 0; c < nc; ++c) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += v[k] * text.values[c * d + k];
            const double cosine = (vn > 0.0 && text_norm[c] > 0.0) ? dot / (vn * text_norm[c]) : 0.0;
            logits[c] = cosine / tau;
        }
        const double top = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (std::size_t c = 0; c < nc; ++c) {
            out.probs[i * nc + c] = std::exp(logits[c] - top);
            z += out.probs[i * nc + c];
        }
        std::size_t best = 0;
        for (std::size_t c = 0; c < nc; ++c) {
            out.probs[i * nc + c] /= z;
            if (out.probs[i * nc + c] > out.probs[i * nc + best]) best = c;
        }
        out.labels[i] = best;
    }
    return out;
}

std::vector<Detection> infer_video(const model::ModelParams<float>& params, const model::ModelConfig& config,
                                   const io::VideoFeatures& features, const io::TextEmbeddings& text, double tau) {
    tensor::Tape<float> quiet(tensor::TapeMode::forward_only);
    tensor::Tape<float>::Scope scope(quiet);
    const auto batch = model::forward(params, config, model::features_tensor<float>(features));

    const std::size_t n = batch.proposals.dim(0);
    std::vector<Interval> proposals(n);
    for (std::size_t i = 0; i < n; ++i) {
        proposals[i] = ordered({double(batch.proposals.at(i, 0)), double(batch.proposals.at(i, 1))});
    }
    const auto cls = classify(features, proposals, text, config.roi_bins, tau);

    std::vector<Detection> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto& det = out[i];
        det.video_id = features.video_id;
        det.start = proposals[i].start;
        det.end = proposals[i].end;
        det.foreground = double(batch.scores[i]);
        if (cls.num_classes > 0) {
            det.label = text.class_names[cls.labels[i]];
            det.score = det.foreground * cls.prob(i, cls.labels[i]);
        }
    }
    std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    return out;
}

void write_detections(const DetectionMap& detections, const std::map<std::string, double>& durations,
                      const std::filesystem::path& path) {
    json results = json::object();
    for (const auto& [video, dets] : detections) {
        const auto it = durations.find(video);
        if (it == durations.end()) throw ValidationError("no duration known for video '" + video + "'");
        json list = json::array();
        for (const auto& d : dets) {
            list.push_back({{"segment_seconds", {d.start * it->second, d.end * it->second}},
                            {"label", d.label},
                            {"score", d.score}});
        }
        results[video] = std::move(list);
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << json{{"results", results}}.dump(2) << '\n';
}

namespace {

void parse_results(const json& results, const std::map<std::string, double>& durations, DetectionMap& out) {
    for (const auto& [video, list] : results.items()) {
        const auto it = durations.find(video);
        if (it == durations.end()) throw ValidationError("detection dump: unknown video '" + video + "'");
        if (!list.is_array()) throw FormatError("detection dump: results for '" + video + "' must be an array");
        auto& dets = out[video];
        for (const auto& e : list) {
            const auto& seg = e.at("segment_seconds");
            if (!seg.is_array() || seg.size() != 2) {
                throw FormatError("detection dump: segment_seconds must hold two numbers (video '" + video + "')");
            }
            Detection d;
            d.video_id = video;
            const auto iv = ordered({seg[0].get<double>() / it->second, seg[1].get<double>() / it->second});
            d.start = iv.start;
            d.end = iv.end;
            d.label = e.at("label").get<std::string>();
            d.score = e.at("score").get<double>();
            d.foreground = d.score;
            dets.push_back(std::move(d));
        }
        std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    }
}

}  // namespace

DetectionMap parse_detections(const std::string& json_text, const std::map<std::string, double>& durations) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("detection dump: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("results") || !doc["results"].is_object()) {
        throw FormatError("detection dump: expected an object with a \"results\" object");
    }
    DetectionMap out;
    try {
        parse_results(doc["results"], durations, out);
    } catch (const json::exception& e) {
        throw FormatError(std::string("detection dump: ") + e.what());
    }
    return out;
}

DetectionMap read_detections(const std::filesystem::path& path, const std::map<std::string, double>& durations) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_detections(buffer.str(), durations);
}

}  // namespace gap::zeroshot
