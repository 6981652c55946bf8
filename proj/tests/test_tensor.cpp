#include <cmath>
#include <random>

#include <doctest.h>

#include "gap/adamw.hpp"
#include "gap/errors.hpp"
#include "gap/gradcheck.hpp"
#include "gap/tensor.hpp"

using namespace gap;
using namespace gap::tensor;

namespace {

Tensor<double> mat(Shape shape, std::vector<double> v, bool grad = false) {
    return Tensor<double>(std::move(shape), std::move(v), grad);
}

}  // namespace

TEST_CASE("matmul examples") {
    auto eye = mat({2, 2}, {1, 0, 0, 1});
    auto m = mat({2, 2}, {1, 2, 3, 4});
    auto r = matmul(eye, m);
    for (std::size_t i = 0; i < 4; ++i) CHECK(r[i] == m[i]);

    CHECK(matmul(mat({1, 2}, {1, 2}), mat({2, 1}, {3, 4})).item() == 11.0);

    std::mt19937_64 rng(3);
    auto z = matmul(Tensor<double>::zeros({2, 3}), Tensor<double>::normal({3, 2}, 1.0, rng));
    CHECK(z.shape() == Shape{2, 2});
    for (double v : z.data()) CHECK(v == 0.0);

    CHECK_THROWS_AS(matmul(mat({2, 3}, std::vector<double>(6)), mat({2, 3}, std::vector<double>(6))), ShapeError);
}

TEST_CASE("softmax examples and invariants") {
    auto a = softmax(mat({2}, {0, 0}), 0);
    CHECK(a[0] == doctest::Approx(0.5));
    auto b = softmax(mat({2}, {std::log(2.0), 0}), 0);
    CHECK(b[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(b[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = Tensor<float>::normal({5, 7}, 3.0f, rng);
        auto s = softmax(x, 1);
        auto shifted = softmax(add_scalar(x, 41.5f), 1);
        for (std::size_t r = 0; r < 5; ++r) {
            double total = 0;
            for (std::size_t c = 0; c < 7; ++c) {
                total += s.at(r, c);
                CHECK(shifted.at(r, c) == doctest::Approx(s.at(r, c)).epsilon(1e-5));
            }
            CHECK(std::abs(total - 1.0) <= 1e-6);
        }
    }
}

TEST_CASE("layer norm output statistics") {
    std::mt19937_64 rng(5);
    const std::size_t rows = 6, d = 32;
    for (int trial = 0; trial < 10; ++trial) {
        auto x = Tensor<double>::normal({rows, d}, 4.0, rng);
        auto y = layer_norm(x, Tensor<double>::full({d}, 1.0), Tensor<double>::zeros({d}));
        for (std::size_t r = 0; r < rows; ++r) {
            double mu = 0, var = 0;
            for (std::size_t c = 0; c < d; ++c) mu += y.at(r, c);
            mu /= double(d);
            for (std::size_t c = 0; c < d; ++c) var += (y.at(r, c) - mu) * (y.at(r, c) - mu);
            var /= double(d);
            CHECK(std::abs(mu) < 1e-5);
            CHECK(std::abs(var - 1.0) < 1e-4);
        }
    }
}

TEST_CASE("backward basics") {
    SUBCASE("x squared") {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        auto x = Tensor<double>::scalar(3.0, true);
        tape.backward(mul(x, x));
        CHECK(x.grad()[0] == 6.0);
    }
    SUBCASE("constant loss leaves a zero gradient") {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        auto p = Tensor<double>::scalar(2.0, true);
        auto c = Tensor<double>::scalar(5.0, true);
        tape.backward(mul(c, c));
        CHECK((!p.has_grad() || p.grad()[0] == 0.0));
    }
    SUBCASE("non-scalar loss is a contract error") {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        auto x = mat({2}, {1, 2}, true);
        CHECK_THROWS_AS(tape.backward(mul(x, x)), ContractError);
    }
    SUBCASE("sigmoid of a dot product against finite differences") {
        std::mt19937_64 rng(2);
        auto w = Tensor<double>::normal({1, 4}, 1.0, rng, true);
        auto x = Tensor<double>::normal({4, 1}, 1.0, rng);
        auto r = check::gradcheck("sigmoid(w.x)", [&] { return sum(sigmoid(matmul(w, x))); }, {{"w", w}});
        CHECK(r.passed);
        CHECK(r.max_rel_error < 1e-4);
    }
    SUBCASE("forward-only tape records nothing") {
        Tape<double> tape(TapeMode::forward_only);
        Tape<double>::Scope scope(tape);
        auto x = mat({2}, {1, 2}, true);
        auto y = mul(x, x);
        CHECK(tape.size() == 0);
        CHECK_FALSE(y.requires_grad());
    }
}

TEST_CASE("nodes are recorded in topological order") {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    auto x = mat({3}, {1, 2, 3}, true);
    auto y = sum(mul(sigmoid(x), x));
    (void)y;
    const auto& nodes = tape.nodes();
    for (std::size_t k = 0; k < nodes.size(); ++k) {
        for (const auto& in : nodes[k].inputs) {
            for (std::size_t later = k; later < nodes.size(); ++later) {
                CHECK_FALSE(nodes[later].output.same_storage(in));
            }
        }
    }
}

TEST_CASE("every primitive passes finite differences on 20 seeds") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        for (const auto& r : check::primitive_suite(seed)) {
            INFO("seed " << seed << " op " << r.name << " worst " << r.worst_input << "[" << r.worst_index
                         << "] analytic " << r.worst_analytic << " numeric " << r.worst_numeric);
            CHECK(r.checked > 0);
            CHECK(r.max_rel_error < 1e-4);
        }
    }
}

TEST_CASE("a wrong derivative is caught") {
    // x^3 recorded with the derivative of x^2.
    auto broken = [](const Tensor<double>& x) {
        std::vector<double> out(x.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i] * x[i];
        return record_op<double>("broken_cube", x.shape(), out, {x}, [x](std::span<const double> g) {
            auto dst = const_cast<Tensor<double>&>(x).grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * 2.0 * x[i];
        });
    };
    auto x = mat({3}, {0.5, -1.2, 2.0}, true);
    auto r = check::gradcheck("broken", [&] { return sum(broken(x)); }, {{"x", x}});
    CHECK_FALSE(r.passed);
    CHECK(r.max_rel_error > 1e-2);
}

TEST_CASE("roi_align closed forms") {
    SUBCASE("constant field") {
        std::vector<double> v(10 * 3);
        for (std::size_t t = 0; t < 10; ++t)
            for (std::size_t d = 0; d < 3; ++d) v[t * 3 + d] = 1.5 - double(d);
        auto x = mat({10, 3}, v);
        auto bins = roi_align(x, mat({2, 2}, {0.13, 0.71, 0.9, 0.2}), 5);
        CHECK(bins.shape() == Shape{2, 5, 3});
        for (std::size_t i = 0; i < bins.numel(); ++i) CHECK(std::abs(bins[i] - (1.5 - double(i % 3))) < 1e-6);
    }
    SUBCASE("ramp") {
        std::vector<double> v(16);
        for (std::size_t t = 0; t < 16; ++t) v[t] = double(t);
        auto bins = roi_align(mat({16, 1}, v), mat({1, 2}, {0.0, 1.0}), 16);
        for (std::size_t i = 0; i < 16; ++i) CHECK(std::abs(bins[i] - double(i)) < 1e-6);
    }
    SUBCASE("zero width samples one point") {
        std::vector<double> v(16);
        for (std::size_t t = 0; t < 16; ++t) v[t] = double(t) * double(t);
        auto bins = roi_align(mat({16, 1}, v), mat({1, 2}, {0.5, 0.5}), 4);
        // u = 8, so frames 7 and 8 at fraction 0.5.
        for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(bins[i] - 0.5 * (49.0 + 64.0)) < 1e-9);
    }
    SUBCASE("coordinates get no gradient") {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        std::mt19937_64 rng(9);
        auto x = Tensor<double>::normal({12, 4}, 1.0, rng, true);
        auto props = mat({3, 2}, {0.1, 0.4, 0.3, 0.95, 0.7, 0.2}, true);
        tape.backward(sum(mul(roi_align(x, props, 6), roi_align(x, props, 6))));
        REQUIRE(x.has_grad());
        for (double g : props.grad()) CHECK(g == 0.0);
    }
    SUBCASE("non-finite coordinates") {
        auto x = mat({4, 1}, {1, 2, 3, 4});
        CHECK_THROWS_AS(roi_align(x, mat({1, 2}, {0.1, std::nan("")}), 2), NumericError);
    }
}

TEST_CASE("adamw closed forms") {
    SUBCASE("zero gradient and no decay") {
        auto p = mat({2}, {0.3, -0.7}, true);
        std::vector<NamedTensor<double>> params{{"p", p}};
        AdamWOptions o;
        o.weight_decay = 0;
        auto state = make_adamw_state(params, o);
        p.grad_buffer();
        adamw_step(params, state);
        CHECK(p[0] == 0.3);
        CHECK(p[1] == -0.7);
        CHECK(state.step_count == 1);
    }
    SUBCASE("first step moves by the learning rate") {
        auto p = Tensor<double>::scalar(1.0, true);
        std::vector<NamedTensor<double>> params{{"p", p}};
        AdamWOptions o;
        o.learning_rate = 0.1;
        o.weight_decay = 0;
        auto state = make_adamw_state(params, o);
        p.grad_buffer()[0] = 1.0;
        adamw_step(params, state);
        CHECK(p[0] - 1.0 == doctest::Approx(-0.1).epsilon(1e-6));
    }
    SUBCASE("decoupled decay") {
        auto p = Tensor<double>::scalar(2.0, true);
        std::vector<NamedTensor<double>> params{{"p", p}};
        AdamWOptions o;
        o.learning_rate = 0.01;
        o.weight_decay = 0.1;
        auto state = make_adamw_state(params, o);
        adamw_step(params, state);
        CHECK(p[0] == doctest::Approx(2.0 - 0.01 * 0.1 * 2.0).epsilon(1e-12));
    }
    SUBCASE("non-finite gradient names the parameter and changes nothing") {
        auto p = mat({2}, {1, 2}, true);
        std::vector<NamedTensor<double>> params{{"encoder.w", p}};
        auto state = make_adamw_state(params, AdamWOptions{});
        p.grad_buffer()[1] = std::nan("");
        try {
            adamw_step(params, state);
            FAIL("expected NumericError");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("encoder.w") != std::string::npos);
        }
        CHECK(p[0] == 1.0);
        CHECK(state.step_count == 0);
    }
}

TEST_CASE("single-threaded runs are bit-identical") {
    auto run = [] {
        std::mt19937_64 rng(77);
        Tape<float> tape;
        Tape<float>::Scope scope(tape);
        auto w = Tensor<float>::normal({6, 6}, 0.5f, rng, true);
        auto x = Tensor<float>::normal({4, 6}, 1.0f, rng);
        auto y = sum(gelu(layer_norm(matmul(x, w), Tensor<float>::full({6}, 1.0f), Tensor<float>::zeros({6}))));
        tape.backward(y);
        std::vector<float> out(w.grad().begin(), w.grad().end());
        out.push_back(y.item());
        return out;
    };
    CHECK(run() == run());
}
