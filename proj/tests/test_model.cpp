#include <cmath>
#include <cstring>
#include <random>

#include <doctest.h>

#include "gap/checkpoint.hpp"
#include "gap/errors.hpp"
#include "gap/losses.hpp"
#include "gap/model.hpp"
#include "test_util.hpp"

using namespace gap;
using namespace gap::model;
using tensor::Tape;
using tensor::Tensor;

namespace {

ModelConfig micro() {
    ModelConfig c;
    c.dim = 16;
    c.num_queries = 5;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.heads = 4;
    c.ffn_multiplier = 2;
    c.roi_bins = 4;
    c.dropout = 0.0;
    return c;
}

template <typename T>
void zero(Tensor<T> t) {
    for (auto& v : t.mutable_data()) v = T(0);
}

template <typename T>
void zero(const Linear<T>& l) {
    zero(l.weight);
    zero(l.bias);
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(T)) == 0;
}

Tensor<double> random_frames(std::size_t t, std::size_t d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return Tensor<double>::normal({t, d}, 1.0, rng);
}

}  // namespace

TEST_CASE("shape contracts") {
    auto cfg = micro();
    std::mt19937_64 rng(1);
    const auto p = init_params<double>(cfg, rng);
    const auto x = random_frames(8, 16, 2);

    const auto enc = encode(p, cfg, x);
    CHECK(enc.features.shape() == tensor::Shape{8, 16});
    CHECK(enc.actionness_logits.shape() == tensor::Shape{8});
    CHECK(decode(p, cfg, enc.features).shape() == tensor::Shape{5, 16});

    const auto batch = forward(p, cfg, x);
    CHECK(batch.proposals.shape() == tensor::Shape{5, 2});
    CHECK(batch.scores.shape() == tensor::Shape{5});
    for (double v : batch.proposals.data()) CHECK((v >= 0.0 && v <= 1.0));
    for (double v : batch.scores.data()) CHECK((v > 0.0 && v < 1.0));

    std::mt19937_64 r2(3);
    const auto bins = Tensor<double>::normal({5, 16, 16}, 1.0, r2);
    cfg.roi_bins = 16;
    CHECK(rectify(p, cfg, batch.decoder_queries, bins).shape() == tensor::Shape{5, 16});

    CHECK_THROWS_AS(encode(p, cfg, random_frames(8, 12, 2)), ShapeError);
}

TEST_CASE("config validation") {
    auto cfg = micro();
    cfg.heads = 3;
    CHECK_THROWS(cfg.validate());
    cfg = micro();
    cfg.roi_bins = 0;
    CHECK_THROWS(cfg.validate());
    cfg = micro();
    cfg.num_queries = 0;
    CHECK_THROWS(cfg.validate());
}

TEST_CASE("initialization ranges") {
    ModelConfig cfg = micro();
    cfg.dim = 64;
    cfg.num_queries = 40;
    std::mt19937_64 rng(5);
    const auto p = init_params<double>(cfg, rng);
    const double bound = std::sqrt(1.0 / 64.0);
    for (double v : p.input_proj.weight.data()) CHECK(std::abs(v) <= bound);
    double sq = 0;
    for (double v : p.query_embeddings.data()) sq += v * v;
    const double sd = std::sqrt(sq / double(p.query_embeddings.numel()));
    CHECK(sd == doctest::Approx(0.02).epsilon(0.1));
}

TEST_CASE("positional encoding breaks frame-order symmetry") {
    auto cfg = micro();
    std::mt19937_64 rng(7);
    const auto p = init_params<double>(cfg, rng);
    auto x = random_frames(8, 16, 3);
    std::vector<double> swapped(x.data().begin(), x.data().end());
    for (std::size_t d = 0; d < 16; ++d) std::swap(swapped[d], swapped[16 + d]);
    const auto y = Tensor<double>({8, 16}, swapped);
    CHECK_FALSE(bit_equal(encode(p, cfg, x).features, encode(p, cfg, y).features));
}

TEST_CASE("zero conv head weights give the bias as logits") {
    auto cfg = micro();
    std::mt19937_64 rng(9);
    auto p = init_params<double>(cfg, rng);
    zero(p.actionness_out.weight);
    const double bias = p.actionness_out.bias[0];
    const auto logits = encode(p, cfg, random_frames(8, 16, 4)).actionness_logits;
    for (double v : logits.data()) CHECK(v == bias);
}

TEST_CASE("decoder with zeroed residual branches returns normalized queries") {
    auto cfg = micro();
    std::mt19937_64 rng(11);
    auto p = init_params<double>(cfg, rng);
    for (auto& layer : p.decoder) {
        zero(layer.self_attn.output);
        zero(layer.cross_attn.output);
        zero(layer.ffn.contract);
    }
    const auto out = decode(p, cfg, encode(p, cfg, random_frames(8, 16, 5)).features);
    const auto expected = tensor::layer_norm(p.query_embeddings, p.decoder_norm.gamma, p.decoder_norm.beta);
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("identical queries stay identical through the decoder") {
    auto cfg = micro();
    std::mt19937_64 rng(13);
    auto p = init_params<double>(cfg, rng);
    auto q = p.query_embeddings.mutable_data();
    for (std::size_t d = 0; d < 16; ++d) q[16 + d] = q[d];
    const auto out = decode(p, cfg, encode(p, cfg, random_frames(8, 16, 6)).features);
    for (std::size_t d = 0; d < 16; ++d) CHECK(out.at(0, d) == out.at(1, d));
}

TEST_CASE("zeroed rectifier output projection reproduces the no-rectify model bit for bit") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto cfg = micro();
        std::mt19937_64 rng(seed);
        auto p = init_params<float>(cfg, rng);
        zero(p.rectifier.self_attn.output);
        std::mt19937_64 xr(seed + 100);
        const auto x = Tensor<float>::normal({12, 16}, 1.0f, xr);
        const auto full = forward(p, cfg, x);
        auto plain_cfg = cfg;
        plain_cfg.use_rectifying = false;
        const auto plain = forward(p, plain_cfg, x);
        CHECK(bit_equal(full.proposals, plain.proposals));
        CHECK(bit_equal(full.scores, plain.scores));
        CHECK(bit_equal(full.rectified_queries, plain.decoder_queries));
    }
}

TEST_CASE("no gradient reaches the pre-pass proposals") {
    auto cfg = micro();
    std::mt19937_64 rng(17);
    const auto p = init_params<double>(cfg, rng);
    const auto x = random_frames(8, 16, 7);
    const std::vector<Interval> targets{{0.1, 0.4}, {0.5, 0.9}};
    const auto mask = loss::build_mask(std::vector<io::ActionInstance>{{0.1, 0.4, "a"}, {0.5, 0.9, "a"}}, 8);

    auto probe = Tensor<double>::zeros({5, 16}, true);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    RunMode<double> mode;
    mode.prepass_probe = &probe;
    const auto b = forward(p, cfg, x, mode);
    const auto l = loss::total_loss(b.proposals, b.scores, b.actionness_logits, targets, mask, loss::LossWeights{}, true);
    tape.backward(l.total);
    CHECK(p.query_embeddings.has_grad());
    CHECK(b.prepass_proposals.defined());
    if (probe.has_grad()) {
        for (double g : probe.grad()) CHECK(g == 0.0);
    }
}

TEST_CASE("permuting the queries permutes proposals and scores") {
    auto cfg = micro();
    std::mt19937_64 rng(19);
    auto p = init_params<double>(cfg, rng);
    const auto x = random_frames(10, 16, 8);
    const auto before = forward(p, cfg, x);

    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<double> q(p.query_embeddings.data().begin(), p.query_embeddings.data().end());
    auto dst = p.query_embeddings.mutable_data();
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t d = 0; d < 16; ++d) dst[i * 16 + d] = q[perm[i] * 16 + d];
    const auto after = forward(p, cfg, x);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(after.scores[i] == doctest::Approx(before.scores[perm[i]]).epsilon(1e-10));
        CHECK(after.proposals.at(i, 0) == doctest::Approx(before.proposals.at(perm[i], 0)).epsilon(1e-10));
        CHECK(after.proposals.at(i, 1) == doctest::Approx(before.proposals.at(perm[i], 1)).epsilon(1e-10));
    }
}

TEST_CASE("rectifier aggregation variants") {
    auto cfg = micro();
    std::mt19937_64 rng(23);
    const auto p = init_params<double>(cfg, rng);
    const auto q = Tensor<double>::normal({5, 16}, 1.0, rng);
    // Constant bins per query: mean and max pooling agree.
    std::vector<double> z(5 * 4 * 16);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t l = 0; l < 4; ++l)
            for (std::size_t d = 0; d < 16; ++d) z[(i * 4 + l) * 16 + d] = double(i) - 0.1 * double(d);
    const Tensor<double> bins({5, 4, 16}, z);
    auto mean_cfg = cfg;
    mean_cfg.rectify_aggregation = RectifyAggregation::mean;
    auto max_cfg = cfg;
    max_cfg.rectify_aggregation = RectifyAggregation::max;
    const auto a = rectify(p, mean_cfg, q, bins);
    const auto b = rectify(p, max_cfg, q, bins);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));

    auto zeroed = cast_params<double>(p);
    zero(zeroed.rectifier.self_attn.output);
    const auto id = rectify(zeroed, mean_cfg, q, bins);
    for (std::size_t i = 0; i < id.numel(); ++i) CHECK(id[i] == q[i]);

    auto joint = cfg;
    joint.rectify_scope = RectifyScope::joint;
    CHECK(rectify(p, joint, q, bins).shape() == tensor::Shape{5, 16});
    CHECK_THROWS_AS(rectify(p, cfg, q, Tensor<double>::zeros({4, 4, 16})), ShapeError);
}

TEST_CASE("checkpoint round trip is bit-exact") {
    auto cfg = micro();
    cfg.rectify_aggregation = RectifyAggregation::max;
    cfg.use_actionness = false;
    std::mt19937_64 rng(29);
    const auto p = init_params<float>(cfg, rng);
    gap::testing::TempDir dir;
    save_checkpoint(cfg, p, dir / "ckpt.gapf");
    const auto back = load_checkpoint(dir / "ckpt.gapf");
    CHECK(back.config == cfg);
    const auto a = p.named(), b = back.params.named();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        CHECK(bit_equal(a[i].tensor, b[i].tensor));
    }
    save_checkpoint(back.config, back.params, dir / "again.gapf");
    CHECK(gap::testing::read_bytes(dir / "ckpt.gapf") == gap::testing::read_bytes(dir / "again.gapf"));

    auto bytes = gap::testing::read_bytes(dir / "ckpt.gapf");
    gap::testing::write_bytes(dir / "cut.gapf", bytes.substr(0, bytes.size() - 5));
    CHECK_THROWS_AS(load_checkpoint(dir / "cut.gapf"), FormatError);
}
