#pragma once

// The proposal generator: temporal encoder with an actionness head, a
// query-based decoder, a gradient-stopped proposal pre-pass feeding a
// temporal RoIAlign over the raw frame features, the static-dynamic
// rectifier, and the generation / foreground heads.

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "gap/feature_io.hpp"
#include "gap/tensor.hpp"

namespace gap::model {

using tensor::NamedTensor;
using tensor::Tensor;

enum class RectifyAggregation { cross_attention, mean, max };
// Whether each query's cross-attention sees only its own bins or all bins.
enum class RectifyScope { per_query, joint };

std::string to_string(RectifyAggregation a);
std::string to_string(RectifyScope s);
RectifyAggregation parse_aggregation(const std::string& s);
RectifyScope parse_scope(const std::string& s);

struct ModelConfig {
    std::size_t dim = 512;
    std::size_t num_queries = 40;
    std::size_t encoder_layers = 2;
    std::size_t decoder_layers = 5;
    std::size_t heads = 8;
    std::size_t ffn_multiplier = 4;
    std::size_t roi_bins = 16;
    double dropout = 0.1;
    bool use_rectifying = true;
    bool use_actionness = true;
    RectifyAggregation rectify_aggregation = RectifyAggregation::cross_attention;
    RectifyScope rectify_scope = RectifyScope::per_query;

    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct Linear {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]
};

template <typename T>
struct LayerNorm {
    Tensor<T> gamma;
    Tensor<T> beta;
};

template <typename T>
struct Conv1d {
    Tensor<T> weight;  // [K, in, out]
    Tensor<T> bias;
};

template <typename T>
struct MultiHeadAttention {
    Linear<T> query, key, value, output;
};

template <typename T>
struct FeedForward {
    Linear<T> expand, contract;
};

template <typename T>
struct EncoderLayer {
    LayerNorm<T> attn_norm;
    MultiHeadAttention<T> self_attn;
    LayerNorm<T> ffn_norm;
    FeedForward<T> ffn;
};

template <typename T>
struct DecoderLayer {
    LayerNorm<T> self_norm;
    MultiHeadAttention<T> self_attn;
    LayerNorm<T> cross_norm;
    MultiHeadAttention<T> cross_attn;
    LayerNorm<T> ffn_norm;
    FeedForward<T> ffn;
};

template <typename T>
struct Rectifier {
    LayerNorm<T> query_norm;
    MultiHeadAttention<T> cross_attn;  // used by the cross_attention aggregation
    Linear<T> pool_proj;               // used by the mean / max aggregations
    LayerNorm<T> mix_norm;
    MultiHeadAttention<T> self_attn;
};

template <typename T>
struct ModelParams {
    Tensor<T> query_embeddings;  // [N_q, D]
    Linear<T> input_proj;
    std::vector<EncoderLayer<T>> encoder;
    LayerNorm<T> encoder_norm;
    Conv1d<T> actionness_hidden;  // D -> D
    Conv1d<T> actionness_out;     // D -> 1
    std::vector<DecoderLayer<T>> decoder;
    LayerNorm<T> decoder_norm;
    Rectifier<T> rectifier;
    Linear<T> gen_hidden1, gen_hidden2, gen_out;  // F_gen: D -> D -> D -> 2
    Linear<T> cls_head;                           // F_cls: D -> 1

    // Stable-ordered handles sharing storage with the fields above.
    std::vector<NamedTensor<T>> named() const;
    void set_requires_grad(bool value) const;
    void zero_grad() const;
};

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::mt19937_64& rng);

// Deep copy with element conversion (float training weights -> double checks).
template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& params);

template <typename T>
struct EncodedFeatures {
    Tensor<T> features;           // X-hat [T, D]
    Tensor<T> actionness_logits;  // a [T], pre-sigmoid
};

template <typename T>
struct ProposalBatch {
    Tensor<T> proposals;           // [N_q, 2] (start, end) in [0, 1]
    Tensor<T> scores;              // foreground probabilities [N_q]
    Tensor<T> actionness_logits;   // [T]
    Tensor<T> decoder_queries;     // Q-hat [N_q, D]
    Tensor<T> rectified_queries;   // Q-tilde [N_q, D]
    Tensor<T> prepass_proposals;   // t-hat [N_q, 2], undefined without rectifying
};

// Training mode enables dropout driven by `rng`; evaluation mode is
// deterministic and needs no generator.
template <typename T>
struct RunMode {
    bool training = false;
    std::mt19937_64* rng = nullptr;
    // Added to Q-hat on the pre-pass branch only. Lets tests observe the
    // gradient that reaches the pre-pass (it must be zero).
    const Tensor<T>* prepass_probe = nullptr;
    // Replaces the computed pre-pass proposals. Finite-difference checks use
    // it to hold the stop-gradient branch constant.
    const Tensor<T>* prepass_override = nullptr;
};

// Sinusoidal position table [T, D].
template <typename T>
Tensor<T> positional_encoding(std::size_t frames, std::size_t dim);

template <typename T>
Tensor<T> features_tensor(const io::VideoFeatures& features);

template <typename T>
EncodedFeatures<T> encode(const ModelParams<T>& params, const ModelConfig& config, const Tensor<T>& frames,
                          const RunMode<T>& mode = {});

template <typename T>
Tensor<T> decode(const ModelParams<T>& params, const ModelConfig& config, const Tensor<T>& encoded,
                 const RunMode<T>& mode = {});

// Rectified queries Q-hat + SA(CA(Q-hat, Z)); `bins` is Z [N_q, L, D].
template <typename T>
Tensor<T> rectify(const ModelParams<T>& params, const ModelConfig& config, const Tensor<T>& queries,
                  const Tensor<T>& bins, const RunMode<T>& mode = {});

// sigmoid(F_gen(q)) -> [N_q, 2]
template <typename T>
Tensor<T> generate_proposals(const ModelParams<T>& params, const Tensor<T>& queries);

template <typename T>
Tensor<T> foreground_scores(const ModelParams<T>& params, const Tensor<T>& queries);

template <typename T>
ProposalBatch<T> forward(const ModelParams<T>& params, const ModelConfig& config, const Tensor<T>& frames,
                         const RunMode<T>& mode = {});

}  // namespace gap::model
