#include "gap/model.hpp"

#include <cmath>

#include "gap/errors.hpp"

namespace gap::model {

using namespace gap::tensor;

std::string to_string(RectifyAggregation a) {
    switch (a) {
        case RectifyAggregation::cross_attention: return "cross_attention";
        case RectifyAggregation::mean: return "mean";
        case RectifyAggregation::max: return "max";
    }
    return "?";
}

std::string to_string(RectifyScope s) {
    return s == RectifyScope::per_query ? "per_query" : "joint";
}

RectifyAggregation parse_aggregation(const std::string& s) {
    if (s == "cross_attention") return RectifyAggregation::cross_attention;
    if (s == "mean") return RectifyAggregation::mean;
    if (s == "max") return RectifyAggregation::max;
    throw ConfigError("unknown rectify_aggregation '" + s + "'");
}

RectifyScope parse_scope(const std::string& s) {
    if (s == "per_query") return RectifyScope::per_query;
    if (s == "joint") return RectifyScope::joint;
    throw ConfigError("unknown rectify_scope '" + s + "'");
}

void ModelConfig::validate() const {
    if (dim == 0 || num_queries == 0 || encoder_layers == 0 || decoder_layers == 0 || heads == 0 ||
        ffn_multiplier == 0 || roi_bins == 0) {
        throw ConfigError("model config: sizes and layer counts must be positive");
    }
    if (dim % heads != 0) throw ConfigError("model config: dim must be divisible by heads");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model config: dropout must be in [0, 1)");
}

// ---------------------------------------------------------------------------
// Parameter registry

namespace {

// Calls f(name, tensor) for every parameter in a fixed order. P is
// ModelParams<T> or const ModelParams<T>.
template <typename P, typename F>
void visit(P& p, F&& f) {
    auto lin = [&](const std::string& n, auto& l) {
        f(n + ".weight", l.weight);
        f(n + ".bias", l.bias);
    };
    auto norm = [&](const std::string& n, auto& l) {
        f(n + ".gamma", l.gamma);
        f(n + ".beta", l.beta);
    };
    auto mha = [&](const std::string& n, auto& a) {
        lin(n + ".query", a.query);
        lin(n + ".key", a.key);
        lin(n + ".value", a.value);
        lin(n + ".output", a.output);
    };
    auto ffn = [&](const std::string& n, auto& m) {
        lin(n + ".expand", m.expand);
        lin(n + ".contract", m.contract);
    };
    f(std::string("query_embeddings"), p.query_embeddings);
    lin("input_proj", p.input_proj);
    for (std::size_t i = 0; i < p.encoder.size(); ++i) {
        const auto n = "encoder." + std::to_string(i);
        norm(n + ".attn_norm", p.encoder[i].attn_norm);
        mha(n + ".self_attn", p.encoder[i].self_attn);
        norm(n + ".ffn_norm", p.encoder[i].ffn_norm);
        ffn(n + ".ffn", p.encoder[i].ffn);
    }
    norm("encoder_norm", p.encoder_norm);
    lin("actionness_hidden", p.actionness_hidden);
    lin("actionness_out", p.actionness_out);
    for (std::size_t i = 0; i < p.decoder.size(); ++i) {
        const auto n = "decoder." + std::to_string(i);
        norm(n + ".self_norm", p.decoder[i].self_norm);
        mha(n + ".self_attn", p.decoder[i].self_attn);
        norm(n + ".cross_norm", p.decoder[i].cross_norm);
        mha(n + ".cross_attn", p.decoder[i].cross_attn);
        norm(n + ".ffn_norm", p.decoder[i].ffn_norm);
        ffn(n + ".ffn", p.decoder[i].ffn);
    }
    norm("decoder_norm", p.decoder_norm);
    norm("rectifier.query_norm", p.rectifier.query_norm);
    mha("rectifier.cross_attn", p.rectifier.cross_attn);
    lin("rectifier.pool_proj", p.rectifier.pool_proj);
    norm("rectifier.mix_norm", p.rectifier.mix_norm);
    mha("rectifier.self_attn", p.rectifier.self_attn);
    lin("gen_hidden1", p.gen_hidden1);
    lin("gen_hidden2", p.gen_hidden2);
    lin("gen_out", p.gen_out);
    lin("cls_head", p.cls_head);
}

template <typename T>
Linear<T> make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    const T bound = static_cast<T>(std::sqrt(1.0 / double(in)));
    auto w = Tensor<T>::uniform({in, out}, bound, rng);
    auto b = Tensor<T>::uniform({out}, bound, rng);
    return {w, b};
}

template <typename T>
Conv1d<T> make_conv(std::size_t kernel, std::size_t in, std::size_t out, std::mt19937_64& rng) {
    const T bound = static_cast<T>(std::sqrt(1.0 / double(kernel * in)));
    auto w = Tensor<T>::uniform({kernel, in, out}, bound, rng);
    auto b = Tensor<T>::uniform({out}, bound, rng);
    return {w, b};
}

template <typename T>
LayerNorm<T> make_norm(std::size_t d) {
    return {Tensor<T>::full({d}, T(1)), Tensor<T>::zeros({d})};
}

template <typename T>
MultiHeadAttention<T> make_mha(std::size_t d, std::mt19937_64& rng) {
    auto q = make_linear<T>(d, d, rng);
    auto k = make_linear<T>(d, d, rng);
    auto v = make_linear<T>(d, d, rng);
    auto o = make_linear<T>(d, d, rng);
    return {q, k, v, o};
}

template <typename T>
FeedForward<T> make_ffn(std::size_t d, std::size_t mult, std::mt19937_64& rng) {
    auto e = make_linear<T>(d, d * mult, rng);
    auto c = make_linear<T>(d * mult, d, rng);
    return {e, c};
}

}  // namespace

template <typename T>
std::vector<NamedTensor<T>> ModelParams<T>::named() const {
    std::vector<NamedTensor<T>> out;
    visit(*this, [&](const std::string& name, const Tensor<T>& t) { out.push_back({name, t}); });
    return out;
}

template <typename T>
void ModelParams<T>::set_requires_grad(bool value) const {
    for (auto& p : named()) p.tensor.set_requires_grad(value);
}

template <typename T>
void ModelParams<T>::zero_grad() const {
    for (auto& p : named()) p.tensor.zero_grad();
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::mt19937_64& rng) {
    config.validate();
    const std::size_t d = config.dim;
    ModelParams<T> p;
    p.query_embeddings = Tensor<T>::normal({config.num_queries, d}, T(0.02), rng);
    p.input_proj = make_linear<T>(d, d, rng);
    for (std::size_t i = 0; i < config.encoder_layers; ++i) {
        EncoderLayer<T> layer;
        layer.attn_norm = make_norm<T>(d);
        layer.self_attn = make_mha<T>(d, rng);
        layer.ffn_norm = make_norm<T>(d);
        layer.ffn = make_ffn<T>(d, config.ffn_multiplier, rng);
        p.encoder.push_back(std::move(layer));
    }
    p.encoder_norm = make_norm<T>(d);
    p.actionness_hidden = make_conv<T>(3, d, d, rng);
    p.actionness_out = make_conv<T>(3, d, 1, rng);
    for (std::size_t i = 0; i < config.decoder_layers; ++i) {
        DecoderLayer<T> layer;
        layer.self_norm = make_norm<T>(d);
        layer.self_attn = make_mha<T>(d, rng);
        layer.cross_norm = make_norm<T>(d);
        layer.cross_attn = make_mha<T>(d, rng);
        layer.ffn_norm = make_norm<T>(d);
        layer.ffn = make_ffn<T>(d, config.ffn_multiplier, rng);
        p.decoder.push_back(std::move(layer));
    }
    p.decoder_norm = make_norm<T>(d);
    p.rectifier.query_norm = make_norm<T>(d);
    p.rectifier.cross_attn = make_mha<T>(d, rng);
    p.rectifier.pool_proj = make_linear<T>(d, d, rng);
    p.rectifier.mix_norm = make_norm<T>(d);
    p.rectifier.self_attn = make_mha<T>(d, rng);
    p.gen_hidden1 = make_linear<T>(d, d, rng);
    p.gen_hidden2 = make_linear<T>(d, d, rng);
    p.gen_out = make_linear<T>(d, 2, rng);
    p.cls_head = make_linear<T>(d, 1, rng);
    p.set_requires_grad(true);
    return p;
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& params) {
    ModelParams<To> out;
    out.encoder.resize(params.encoder.size());
    out.decoder.resize(params.decoder.size());
    const auto src = params.named();
    std::size_t i = 0;
    visit(out, [&](const std::string&, Tensor<To>& t) {
        const auto& s = src[i++].tensor;
        t = tensor::cast<To>(s);
        t.set_requires_grad(s.requires_grad());
    });
    return out;
}

// ---------------------------------------------------------------------------
// Blocks

namespace {

template <typename T>
Tensor<T> apply(const Linear<T>& l, const Tensor<T>& x) {
    return linear(x, l.weight, l.bias);
}

template <typename T>
Tensor<T> apply(const LayerNorm<T>& n, const Tensor<T>& x) {
    return layer_norm(x, n.gamma, n.beta);
}

template <typename T>
Tensor<T> apply(const FeedForward<T>& f, const Tensor<T>& x) {
    return apply(f.contract, gelu(apply(f.expand, x)));
}

// Multi-head attention with input/output projections.
template <typename T>
Tensor<T> apply(const MultiHeadAttention<T>& a, const Tensor<T>& xq, const Tensor<T>& xkv, std::size_t heads) {
    auto q = apply(a.query, xq);
    auto k = apply(a.key, xkv);
    auto v = apply(a.value, xkv);
    return apply(a.output, attention(q, k, v, heads));
}

template <typename T>
Tensor<T> drop(const Tensor<T>& x, const ModelConfig& config, const RunMode<T>& mode) {
    if (!mode.training || config.dropout <= 0.0) return x;
    if (mode.rng == nullptr) throw ContractError("training mode requires a random generator");
    return dropout(x, static_cast<T>(config.dropout), *mode.rng);
}

void require_dim(std::size_t got, std::size_t want, const char* what) {
    if (got != want) {
        throw ShapeError(std::string(what) + ": feature width " + std::to_string(got) + " does not match model width " +
                         std::to_string(want));
    }
}

}  // namespace

template <typename T>
Tensor<T> positional_encoding(std::size_t frames, std::size_t dim) {
    std::vector<T> pe(frames * dim);
    for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t i = 0; i < dim; ++i) {
            const double rate = std::pow(10000.0, -double(2 * (i / 2)) / double(dim));
            const double angle = double(t) * rate;
            pe[t * dim + i] = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    }
    return Tensor<T>({frames, dim}, std::move(pe));
}

template <typename T>
Tensor<T> features_tensor(const io::VideoFeatures& features) {
    features.validate();
    std::vector<T> data(features.values.begin(), features.values.end());
    return Tensor<T>({features.frames, features.dim}, std::move(data));
}

template <typename T>
EncodedFeatures<T> encode(const ModelParams<T>& params, const ModelConfig& config, const Tensor<T>& frames,
                          const RunMode<T>& mode) {
    if (frames.rank() != 2) throw ShapeError("encode: frames must be [T, D]");
    require_dim(frames.dim(1), config.dim, "encode");
    const std::size_t len = frames.dim(0);
    auto h = add(apply(params.input_proj, frames), positional_encoding<T>(len, config.dim));
    for (const auto& layer : params.encoder) {
        auto a = apply(layer.attn_norm, h);
        h = add(h, drop(apply(layer.self_attn, a, a, config.heads), config, mode));
        h = add(h, drop(apply(layer.ffn, apply(layer.ffn_norm, h)), config, mode));
    }
    auto features = apply(params.encoder_norm, h);
    auto hidden = gelu(conv1d(features, params.actionness_hidden.weight, params.actionness_hidden.bias));
    auto logits = conv1d(hidden, params.actionness_out.weight, params.actionness_out.bias).reshape({len});
    return {features, logits};
}

template <typename T>
Tensor<T> decode(const ModelParams<T>& params, const ModelConfig& config, const Tensor<T>& encoded,
                 const RunMode<T>& mode) {
    require_dim(encoded.dim(1), config.dim, "decode");
    auto q = params.query_embeddings;
    for (const auto& layer : params.decoder) {
        auto a = apply(layer.self_norm, q);
        q = add(q, drop(apply(layer.self_attn, a, a, config.heads), config, mode));
        q = add(q, drop(apply(layer.cross_attn, apply(layer.cross_norm, q), encoded, config.heads), config, mode));
        q = add(q, drop(apply(layer.ffn, apply(layer.ffn_norm, q)), config, mode));
    }
    return apply(params.decoder_norm, q);
}

template <typename T>
Tensor<T> rectify(const ModelParams<T>& params, const ModelConfig& config, const Tensor<T>& queries,
                  const Tensor<T>& bins, const RunMode<T>& mode) {
    const std::size_t nq = queries.dim(0), d = config.dim;
    if (bins.rank() != 3 || bins.dim(0) != nq || bins.dim(2) != d) {
        throw ShapeError("rectify: bins " + shape_str(bins.shape()) + " do not match queries " +
                         shape_str(queries.shape()));
    }
    const auto& r = params.rectifier;
    Tensor<T> gathered;
    switch (config.rectify_aggregation) {
        case RectifyAggregation::cross_attention: {
            auto q = apply(r.cross_attn.query, apply(r.query_norm, queries));
            auto k = apply(r.cross_attn.key, bins);
            auto v = apply(r.cross_attn.value, bins);
            Tensor<T> attended;
            if (config.rectify_scope == RectifyScope::per_query) {
                attended = attention(q.reshape({nq, 1, d}), k, v, config.heads).reshape({nq, d});
            } else {
                const std::size_t total = nq * bins.dim(1);
                attended = attention(q, k.reshape({total, d}), v.reshape({total, d}), config.heads);
            }
            gathered = apply(r.cross_attn.output, attended);
            break;
        }
        case RectifyAggregation::mean:
            gathered = apply(r.pool_proj, mean_axis(bins, 1));
            break;
        case RectifyAggregation::max:
            gathered = apply(r.pool_proj, max_axis(bins, 1));
            break;
    }
    auto mixed_in = apply(r.mix_norm, gathered);
    auto mixed = apply(r.self_attn, mixed_in, mixed_in, config.heads);
    return add(queries, drop(mixed, config, mode));
}

template <typename T>
Tensor<T> generate_proposals(const ModelParams<T>& params, const Tensor<T>& queries) {
    auto h = gelu(apply(params.gen_hidden1, queries));
    h = gelu(apply(params.gen_hidden2, h));
    return sigmoid(apply(params.gen_out, h));
}

template <typename T>
Tensor<T> foreground_scores(const ModelParams<T>& params, const Tensor<T>& queries) {
    auto logits = apply(params.cls_head, queries);
    return sigmoid(logits.reshape({queries.dim(0)}));
}

template <typename T>
ProposalBatch<T> forward(const ModelParams<T>& params, const ModelConfig& config, const Tensor<T>& frames,
                         const RunMode<T>& mode) {
    config.validate();
    auto encoded = encode(params, config, frames, mode);
    auto decoded = decode(params, config, encoded.features, mode);

    ProposalBatch<T> batch;
    batch.actionness_logits = encoded.actionness_logits;
    batch.decoder_queries = decoded;
    Tensor<T> queries = decoded;
    if (config.use_rectifying) {
        // Pre-pass: RoIAlign treats the coordinates as constants, so nothing
        // below flows back into this branch.
        if (mode.prepass_override != nullptr) {
            batch.prepass_proposals = *mode.prepass_override;
        } else {
            auto prepass_in = mode.prepass_probe != nullptr ? add(decoded, *mode.prepass_probe) : decoded;
            batch.prepass_proposals = generate_proposals(params, prepass_in);
        }
        auto bins = roi_align(frames, batch.prepass_proposals, config.roi_bins);
        queries = rectify(params, config, decoded, bins, mode);
    }
    batch.rectified_queries = queries;
    batch.proposals = generate_proposals(params, queries);
    batch.scores = foreground_scores(params, queries);
    return batch;
}

// ---------------------------------------------------------------------------

#define GAP_INSTANTIATE(T)                                                                                    \
    template struct ModelParams<T>;                                                                           \
    template ModelParams<T> init_params<T>(const ModelConfig&, std::mt19937_64&);                             \
    template Tensor<T> positional_encoding<T>(std::size_t, std::size_t);                                      \
    template Tensor<T> features_tensor<T>(const io::VideoFeatures&);                                          \
    template EncodedFeatures<T> encode<T>(const ModelParams<T>&, const ModelConfig&, const Tensor<T>&,        \
                                          const RunMode<T>&);                                                 \
    template Tensor<T> decode<T>(const ModelParams<T>&, const ModelConfig&, const Tensor<T>&,                 \
                                 const RunMode<T>&);                                                          \
    template Tensor<T> rectify<T>(const ModelParams<T>&, const ModelConfig&, const Tensor<T>&,                \
                                  const Tensor<T>&, const RunMode<T>&);                                       \
    template Tensor<T> generate_proposals<T>(const ModelParams<T>&, const Tensor<T>&);                        \
    template Tensor<T> foreground_scores<T>(const ModelParams<T>&, const Tensor<T>&);                         \
    template ProposalBatch<T> forward<T>(const ModelParams<T>&, const ModelConfig&, const Tensor<T>&,         \
                                         const RunMode<T>&);

GAP_INSTANTIATE(float)
GAP_INSTANTIATE(double)
#undef GAP_INSTANTIATE

template ModelParams<double> cast_params<double, float>(const ModelParams<float>&);
template ModelParams<float> cast_params<float, double>(const ModelParams<double>&);
template ModelParams<float> cast_params<float, float>(const ModelParams<float>&);
template ModelParams<double> cast_params<double, double>(const ModelParams<double>&);

}  // namespace gap::model
