#include "gap/checkpoint.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "gap/errors.hpp"
#include "gap/feature_io.hpp"

namespace gap::model {

using nlohmann::json;

json model_config_to_json(const ModelConfig& c) {
    return {{"dim", c.dim},
            {"num_queries", c.num_queries},
            {"encoder_layers", c.encoder_layers},
            {"decoder_layers", c.decoder_layers},
            {"heads", c.heads},
            {"ffn_multiplier", c.ffn_multiplier},
            {"roi_bins", c.roi_bins},
            {"dropout", c.dropout},
            {"use_rectifying", c.use_rectifying},
            {"use_actionness", c.use_actionness},
            {"rectify_aggregation", to_string(c.rectify_aggregation)},
            {"rectify_scope", to_string(c.rectify_scope)}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
    try {
        c.dim = j.value("dim", c.dim);
        c.num_queries = j.value("num_queries", c.num_queries);
        c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
        c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
        c.heads = j.value("heads", c.heads);
        c.ffn_multiplier = j.value("ffn_multiplier", c.ffn_multiplier);
        c.roi_bins = j.value("roi_bins", c.roi_bins);
        c.dropout = j.value("dropout", c.dropout);
        c.use_rectifying = j.value("use_rectifying", c.use_rectifying);
        c.use_actionness = j.value("use_actionness", c.use_actionness);
        c.rectify_aggregation = parse_aggregation(j.value("rectify_aggregation", to_string(c.rectify_aggregation)));
        c.rectify_scope = parse_scope(j.value("rectify_scope", to_string(c.rectify_scope)));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

void save_checkpoint(const ModelConfig& config, const ModelParams<float>& params, const std::filesystem::path& path) {
    io::GapfMatrix m;
    m.kind = io::PayloadKind::checkpoint;
    json tensors = json::array();
    for (const auto& p : params.named()) {
        tensors.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
        m.values.insert(m.values.end(), p.tensor.data().begin(), p.tensor.data().end());
    }
    m.rows = 1;
    m.cols = static_cast<std::uint32_t>(m.values.size());
    const std::string manifest =
        json{{"format", "gap-checkpoint"}, {"model", model_config_to_json(config)}, {"tensors", tensors}}.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    io::write_gapf(out, m);
    const auto len = static_cast<std::uint32_t>(manifest.size());
    const char bytes[4] = {static_cast<char>(len & 0xFF), static_cast<char>((len >> 8) & 0xFF),
                           static_cast<char>((len >> 16) & 0xFF), static_cast<char>((len >> 24) & 0xFF)};
    out.write(bytes, 4);
    out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    if (!out) throw FormatError("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    auto m = io::read_gapf(in);
    if (m.kind != io::PayloadKind::checkpoint) throw FormatError("GAPF: " + path.string() + " is not a checkpoint");
    unsigned char lb[4];
    if (!in.read(reinterpret_cast<char*>(lb), 4)) throw FormatError("checkpoint: truncated manifest length");
    const std::uint32_t len =
        std::uint32_t(lb[0]) | (std::uint32_t(lb[1]) << 8) | (std::uint32_t(lb[2]) << 16) | (std::uint32_t(lb[3]) << 24);
    std::string text(len, '\0');
    if (!in.read(text.data(), len)) throw FormatError("checkpoint: truncated manifest");
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes after manifest");

    json manifest;
    try {
        manifest = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("checkpoint manifest: ") + e.what());
    }
    if (manifest.value("format", "") != "gap-checkpoint") throw FormatError("checkpoint manifest: wrong format tag");

    Checkpoint ck;
    ck.config = model_config_from_json(manifest.at("model"));
    std::mt19937_64 scratch(0);
    ck.params = init_params<float>(ck.config, scratch);
    auto named = ck.params.named();
    const auto& entries = manifest.at("tensors");
    if (entries.size() != named.size()) throw FormatError("checkpoint manifest: tensor count mismatch");
    std::size_t offset = 0;
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto name = entries[i].at("name").get<std::string>();
        const auto shape = entries[i].at("shape").get<tensor::Shape>();
        if (name != named[i].name || shape != named[i].tensor.shape()) {
            throw FormatError("checkpoint manifest: tensor " + std::to_string(i) + " is '" + name + "' " +
                              tensor::shape_str(shape) + ", expected '" + named[i].name + "' " +
                              tensor::shape_str(named[i].tensor.shape()));
        }
        auto dst = named[i].tensor.mutable_data();
        if (offset + dst.size() > m.values.size()) throw FormatError("checkpoint: payload shorter than manifest");
        std::copy_n(m.values.begin() + static_cast<std::ptrdiff_t>(offset), dst.size(), dst.begin());
        offset += dst.size();
    }
    if (offset != m.values.size()) throw FormatError("checkpoint: payload longer than manifest");
    return ck;
}

}  // namespace gap::model
