#include "gap/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "gap/losses.hpp"
#include "gap/model.hpp"

namespace gap::check {

using tensor::Shape;
using Tape = tensor::Tape<double>;
using T = Tensor<double>;

GradcheckResult gradcheck(const std::string& name, const std::function<T()>& loss,
                          const std::vector<NamedTensor<double>>& inputs, const GradcheckOptions& options) {
    const auto started = std::chrono::steady_clock::now();
    GradcheckResult result;
    result.name = name;

    for (const auto& in : inputs) {
        T t = in.tensor;
        t.zero_grad();
        t.set_requires_grad(true);
    }
    {
        Tape tape;
        Tape::Scope scope(tape);
        tape.backward(loss());
    }
    std::vector<std::vector<double>> analytic;
    for (const auto& in : inputs) {
        std::vector<double> g(in.tensor.numel(), 0.0);
        if (in.tensor.has_grad()) std::copy(in.tensor.grad().begin(), in.tensor.grad().end(), g.begin());
        analytic.push_back(std::move(g));
    }

    std::mt19937_64 rng(options.seed);
    Tape quiet(tensor::TapeMode::forward_only);
    Tape::Scope scope(quiet);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        T t = inputs[k].tensor;
        auto values = t.mutable_data();
        std::vector<std::size_t> idx(values.size());
        std::iota(idx.begin(), idx.end(), 0);
        if (options.samples_per_input != 0 && idx.size() > options.samples_per_input) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(options.samples_per_input);
            std::sort(idx.begin(), idx.end());
        }
        for (std::size_t i : idx) {
            const double saved = values[i];
            auto at = [&](double offset) {
                values[i] = saved + offset;
                return loss().item();
            };
            const double h = options.step;
            // Five-point central stencil, fourth-order accurate.
            const double numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            values[i] = saved;
            const double a = analytic[k][i];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
            ++result.checked;
            if (!(rel <= result.max_rel_error)) {
                result.max_rel_error = std::isnan(rel) ? INFINITY : rel;
                result.worst_input = inputs[k].name;
                result.worst_index = i;
                result.worst_analytic = a;
                result.worst_numeric = numeric;
            }
        }
    }
    for (const auto& in : inputs) {
        T t = in.tensor;
        t.zero_grad();
    }
    result.passed = result.max_rel_error < options.tolerance;
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return result;
}

namespace {

// Micro configuration shared by the model blocks.
constexpr std::size_t kFrames = 8;
constexpr std::size_t kDim = 16;
constexpr std::size_t kQueries = 4;

model::ModelConfig micro_config() {
    model::ModelConfig c;
    c.dim = kDim;
    c.num_queries = kQueries;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.heads = 2;
    c.ffn_multiplier = 2;
    c.roi_bins = 4;
    c.dropout = 0.0;
    return c;
}

T randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
    return T::normal(std::move(shape), stddev, rng);
}

T uniform01(Shape shape, std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(tensor::numel_of(shape));
    for (auto& x : v) x = dist(rng);
    return T(std::move(shape), std::move(v));
}

// Sorted [n, 2] intervals inside [lo, hi] with a minimum length.
T intervals(std::size_t n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> start(0.05, 0.55), len(0.15, 0.4);
    std::vector<double> v(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        v[2 * i] = start(rng);
        v[2 * i + 1] = v[2 * i] + len(rng);
    }
    return T({n, 2}, std::move(v));
}

// Scalar probe of a tensor-valued block: sum(out * w) with fixed weights.
T project(const T& out, const T& weights) {
    return tensor::sum(tensor::mul(out, weights));
}

std::vector<NamedTensor<double>> params_of(const model::ModelParams<double>& p, const std::string& prefix) {
    std::vector<NamedTensor<double>> out;
    for (auto& n : p.named()) {
        if (n.name.rfind(prefix, 0) == 0) out.push_back(n);
    }
    return out;
}

void append(std::vector<NamedTensor<double>>& a, const std::vector<NamedTensor<double>>& b) {
    a.insert(a.end(), b.begin(), b.end());
}

std::vector<Interval> random_targets(std::size_t n, std::mt19937_64& rng) {
    const auto t = intervals(n, rng);
    std::vector<Interval> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back({t.at(i, 0), t.at(i, 1)});
    return out;
}

}  // namespace

std::vector<GradcheckResult> primitive_suite(std::uint64_t seed, const GradcheckOptions& options) {
    std::mt19937_64 rng(seed);
    std::vector<GradcheckResult> out;
    auto run = [&](const std::string& name, const std::function<T()>& f, std::vector<NamedTensor<double>> in) {
        out.push_back(gradcheck(name, f, in, options));
    };

    {
        auto a = randn({3, 4}, rng), b = randn({4}, rng), w = randn({3, 4}, rng);
        run("add_broadcast", [=] { return project(tensor::add(a, b), w); }, {{"a", a}, {"b", b}});
        run("sub_broadcast", [=] { return project(tensor::sub(a, b), w); }, {{"a", a}, {"b", b}});
        run("mul_broadcast", [=] { return project(tensor::mul(a, b), w); }, {{"a", a}, {"b", b}});
    }
    {
        auto x = randn({5}, rng), w = randn({5}, rng);
        run("scale_add_scalar", [=] { return project(tensor::add_scalar(tensor::scale(x, 1.7), 0.3), w); },
            {{"x", x}});
        run("sigmoid", [=] { return project(tensor::sigmoid(x), w); }, {{"x", x}});
        run("gelu", [=] { return project(tensor::gelu(x), w); }, {{"x", x}});
        run("abs", [=] { return project(tensor::abs(x), w); }, {{"x", x}});
        run("clamp", [=] { return project(tensor::clamp(x, -0.5, 0.5), w); }, {{"x", x}});
        auto p = uniform01({5}, rng, 0.2, 2.0);
        run("log", [=] { return project(tensor::log(p), w); }, {{"x", p}});
        run("pow", [=] { return project(tensor::pow(p, 2.5), w); }, {{"x", p}});
    }
    {
        auto a = randn({3, 4}, rng), b = randn({4, 2}, rng), bias = randn({2}, rng), w = randn({3, 2}, rng);
        run("matmul", [=] { return project(tensor::matmul(a, b), w); }, {{"a", a}, {"b", b}});
        auto x3 = randn({2, 3, 4}, rng), w3 = randn({2, 3, 2}, rng);
        run("linear", [=] { return project(tensor::linear(x3, b, bias), w3); },
            {{"x", x3}, {"weight", b}, {"bias", bias}});
    }
    {
        auto x = randn({3, 5}, rng), w = randn({3, 5}, rng);
        run("softmax_last", [=] { return project(tensor::softmax(x, 1), w); }, {{"x", x}});
        run("softmax_first", [=] { return project(tensor::softmax(x, 0), w); }, {{"x", x}});
        auto g = randn({5}, rng), b = randn({5}, rng);
        run("layer_norm", [=] { return project(tensor::layer_norm(x, g, b), w); },
            {{"x", x}, {"gamma", g}, {"beta", b}});
        run("l2_normalize", [=] { return project(tensor::l2_normalize(x), w); }, {{"x", x}});
        auto wc = randn({5}, rng);
        run("mean_axis", [=] { return project(tensor::mean_axis(x, 0), wc); }, {{"x", x}});
    }
    {
        auto x = randn({kFrames, 3}, rng), k = randn({3, 3, 2}, rng), b = randn({2}, rng);
        auto w = randn({kFrames, 2}, rng);
        run("conv1d", [=] { return project(tensor::conv1d(x, k, b), w); }, {{"x", x}, {"weight", k}, {"bias", b}});
    }
    {
        auto x = randn({2, 4, 3}, rng), w = randn({2, 3}, rng), wm = randn({2, 3}, rng);
        run("mean_axis_mid", [=] { return project(tensor::mean_axis(x, 1), wm); }, {{"x", x}});
        run("max_axis", [=] { return project(tensor::max_axis(x, 1), w); }, {{"x", x}});
        run("sum_mean", [=] { return tensor::add(tensor::sum(x), tensor::scale(tensor::mean(x), 3.0)); },
            {{"x", x}});
    }
    {
        auto q = randn({2, 3, 4}, rng), k = randn({2, 5, 4}, rng), v = randn({2, 5, 4}, rng);
        auto w = randn({2, 3, 4}, rng);
        run("attention", [=] { return project(tensor::attention(q, k, v, 2), w); }, {{"q", q}, {"k", k}, {"v", v}});
    }
    {
        auto x = randn({kFrames, 3}, rng);
        auto props = intervals(3, rng);
        auto w = randn({3, 4, 3}, rng);
        run("roi_align", [=] { return project(tensor::roi_align(x, props, 4), w); }, {{"x", x}});
    }
    {
        auto p = intervals(4, rng), t = intervals(4, rng), w = randn({4}, rng);
        run("interval_iou", [=] { return project(tensor::interval_iou(p, t), w); }, {{"pred", p}, {"target", t}});
    }
    {
        auto a = randn({2, 3}, rng), b = randn({2, 2}, rng), w = randn({2, 5}, rng), ws = randn({2, 2}, rng);
        run("concat", [=] { return project(tensor::concat<double>({a, b}, 1), w); }, {{"a", a}, {"b", b}});
        run("slice_last", [=] { return project(tensor::slice_last(a, 1, 2), ws); }, {{"a", a}});
        const std::vector<std::size_t> rows = {1, 0, 1};
        auto wg = randn({3, 3}, rng);
        run("gather_rows", [=] { return project(tensor::gather_rows<double>(a, rows), wg); }, {{"table", a}});
        auto wr = randn({3, 2}, rng);
        run("reshape", [=] { return project(a.reshape({3, 2}), wr); }, {{"a", a}});
    }
    return out;
}

std::vector<GradcheckResult> block_suite(std::uint64_t seed, const GradcheckOptions& options) {
    std::mt19937_64 rng(seed);
    GradcheckOptions sampled = options;
    if (sampled.samples_per_input == 0) sampled.samples_per_input = 6;
    std::vector<GradcheckResult> out;
    auto run = [&](const std::string& name, const std::function<T()>& f, std::vector<NamedTensor<double>> in) {
        out.push_back(gradcheck(name, f, in, sampled));
    };

    auto config = micro_config();
    const auto params = model::init_params<double>(config, rng);
    const auto frames = randn({kFrames, kDim}, rng);
    const auto targets = random_targets(2, rng);
    std::vector<io::ActionInstance> instances;
    for (const auto& t : targets) instances.push_back({t.start, t.end, "a"});
    const auto mask = loss::build_mask(instances, kFrames);
    const loss::LossWeights weights;

    {
        auto wf = randn({kFrames, kDim}, rng), wa = randn({kFrames}, rng);
        std::vector<NamedTensor<double>> in = {{"frames", frames}};
        append(in, params_of(params, "input_proj"));
        append(in, params_of(params, "encoder"));
        append(in, params_of(params, "actionness"));
        run("encoder", [=] {
            auto e = model::encode(params, config, frames);
            return tensor::add(project(e.features, wf), project(e.actionness_logits, wa));
        }, in);
    }
    {
        auto memory = randn({kFrames, kDim}, rng), w = randn({kQueries, kDim}, rng);
        std::vector<NamedTensor<double>> in = {{"memory", memory}};
        append(in, params_of(params, "query_embeddings"));
        append(in, params_of(params, "decoder"));
        run("decoder", [=] { return project(model::decode(params, config, memory), w); }, in);
    }
    {
        auto queries = randn({kQueries, kDim}, rng);
        auto bins = randn({kQueries, config.roi_bins, kDim}, rng);
        auto w = randn({kQueries, kDim}, rng);
        std::vector<NamedTensor<double>> in = {{"queries", queries}, {"bins", bins}};
        append(in, params_of(params, "rectifier."));
        const std::pair<model::RectifyAggregation, model::RectifyScope> variants[] = {
            {model::RectifyAggregation::cross_attention, model::RectifyScope::per_query},
            {model::RectifyAggregation::cross_attention, model::RectifyScope::joint},
            {model::RectifyAggregation::mean, model::RectifyScope::per_query},
            {model::RectifyAggregation::max, model::RectifyScope::per_query},
        };
        for (const auto& [agg, scope] : variants) {
            auto c = config;
            c.rectify_aggregation = agg;
            c.rectify_scope = scope;
            std::string name = "rectifier." + model::to_string(agg);
            if (agg == model::RectifyAggregation::cross_attention) name += "." + model::to_string(scope);
            run(name, [=] { return project(model::rectify(params, c, queries, bins), w); }, in);
        }
        auto wg = randn({kQueries, 2}, rng), ws = randn({kQueries}, rng);
        std::vector<NamedTensor<double>> gen = {{"queries", queries}};
        append(gen, params_of(params, "gen_"));
        run("generation_head", [=] { return project(model::generate_proposals(params, queries), wg); }, gen);
        std::vector<NamedTensor<double>> cls = {{"queries", queries}};
        append(cls, params_of(params, "cls_head"));
        run("foreground_head", [=] { return project(model::foreground_scores(params, queries), ws); }, cls);
    }
    {
        auto logits = randn({kFrames}, rng);
        run("loss.actionness", [=] { return loss::actionness_loss(logits, mask); }, {{"logits", logits}});
        auto scores = uniform01({kQueries}, rng, 0.05, 0.95);
        const std::vector<std::uint8_t> fg = {1, 0, 1, 0};
        run("loss.focal", [=] {
            return tensor::sum(loss::focal_loss(scores, fg, weights.focal_alpha, weights.focal_gamma));
        }, {{"scores", scores}});

        auto proposals = intervals(kQueries, rng);
        std::vector<NamedTensor<double>> det = {{"proposals", proposals}, {"scores", scores}};
        run("loss.detection.cls", [=] { return loss::detection_loss(proposals, scores, targets, weights).cls; }, det);
        run("loss.detection.l1", [=] { return loss::detection_loss(proposals, scores, targets, weights).l1; }, det);
        run("loss.detection.tiou", [=] { return loss::detection_loss(proposals, scores, targets, weights).tiou; },
            det);
        run("loss.detection", [=] { return loss::detection_loss(proposals, scores, targets, weights).total; }, det);
        det.push_back({"actionness_logits", logits});
        run("loss.total", [=] {
            return loss::total_loss(proposals, scores, logits, targets, mask, weights, true).total;
        }, det);
    }
    {
        std::vector<NamedTensor<double>> in = {{"frames", frames}};
        append(in, params.named());
        // The pre-pass coordinates are a stop-gradient input; hold them at
        // their unperturbed values so both sides differentiate the same graph.
        const auto prepass = model::forward(params, config, frames).prepass_proposals.detach();
        run("model.total_loss", [=] {
            model::RunMode<double> mode;
            mode.prepass_override = &prepass;
            auto b = model::forward(params, config, frames, mode);
            return loss::total_loss(b.proposals, b.scores, b.actionness_logits, targets, mask, weights, true).total;
        }, in);
    }
    return out;
}

std::vector<GradcheckResult> gradient_suite(std::uint64_t seed, const GradcheckOptions& options) {
    auto out = primitive_suite(seed, options);
    auto blocks = block_suite(seed, options);
    out.insert(out.end(), blocks.begin(), blocks.end());
    return out;
}

}  // namespace gap::check
