#include "gap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace gap::tensor {

std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "x" : "") << shape[i];
    }
    out << ']';
    return out.str();
}

namespace {

template <typename T>
thread_local Tape<T>* g_active_tape = nullptr;

void check_shape(const Shape& shape) {
    for (auto d : shape) {
        if (d == 0) {
            throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        }
    }
}

// Splits `shape` around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
    std::size_t outer = 1;
    std::size_t extent = 1;
    std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    }
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

template <typename T>
bool is_suffix(const Shape& full, const Shape& suffix) {
    if (suffix.size() > full.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

template <typename T>
void require_finite(std::span<const T> values, const char* op) {
    for (T v : values) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + ": non-finite input");
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) : impl_(std::make_shared<TensorImpl<T>>()) {
    check_shape(shape);
    if (numel_of(shape) != data.size()) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    check_shape(shape);
    auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return Tensor({1}, {value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::uniform(Shape shape, T bound, std::mt19937_64& rng, bool requires_grad) {
    check_shape(shape);
    std::uniform_real_distribution<double> dist(-double(bound), double(bound));
    std::vector<T> data(numel_of(shape));
    for (auto& v : data) v = static_cast<T>(dist(rng));
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::normal(Shape shape, T stddev, std::mt19937_64& rng, bool requires_grad) {
    check_shape(shape);
    std::normal_distribution<double> dist(0.0, double(stddev));
    std::vector<T> data(numel_of(shape));
    for (auto& v : data) v = static_cast<T>(dist(rng));
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl_->data[0];
}

template <typename T>
T Tensor<T>::at(std::size_t row, std::size_t col) const {
    if (rank() != 2) throw ShapeError("at(row, col) needs a rank-2 tensor");
    return impl_->data.at(row * impl_->shape[1] + col);
}

template <typename T>
std::span<T> Tensor<T>::grad_buffer() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return Tensor(impl_->shape, impl_->data, false);
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) const {
    check_shape(shape);
    if (numel_of(shape) != numel()) {
        throw ShapeError("cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
    }
    Tensor src = *this;
    return record_op<T>("reshape", std::move(shape), impl_->data, {src}, [src](std::span<const T> g) mutable {
        if (!src.requires_grad()) return;
        auto gi = src.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
void Tape<T>::record(Node node) {
    if (mode_ == TapeMode::recording) nodes_.push_back(std::move(node));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward() requires a scalar loss");
    }
    Tensor<T> seed = loss;
    if (!seed.requires_grad()) return;
    auto g = seed.grad_buffer();
    g[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (!it->output.has_grad()) continue;
        it->backward(it->output.grad());
    }
}

template <typename T>
Tape<T>* Tape<T>::active() {
    return g_active_tape<T>;
}

template <typename T>
Tape<T>::Scope::Scope(Tape& tape) : previous_(g_active_tape<T>) {
    g_active_tape<T> = &tape;
}

template <typename T>
Tape<T>::Scope::~Scope() {
    g_active_tape<T> = previous_;
}

template <typename T>
Tensor<T> record_op(std::string op, Shape shape, std::vector<T> data, std::vector<Tensor<T>> inputs,
                    typename Tape<T>::BackwardFn backward) {
    Tensor<T> out(std::move(shape), std::move(data), false);
    auto* tape = Tape<T>::active();
    if (tape == nullptr || tape->mode() != TapeMode::recording) return out;
    bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
    if (!needs) return out;
    out.set_requires_grad(true);
    tape->record({std::move(op), std::move(inputs), out, std::move(backward)});
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_broadcast(const char* op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Bwd bwd) {
    if (a.shape() != b.shape() && !is_suffix<T>(a.shape(), b.shape())) {
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " do not broadcast");
    }
    const std::size_t n = a.numel();
    const std::size_t nb = b.numel();
    auto ad = a.data();
    auto bd = b.data();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i], bd[i % nb]);
    Tensor<T> ca = a, cb = b;
    return record_op<T>(op, a.shape(), std::move(out), {a, b}, [ca, cb, bwd](std::span<const T> g) mutable {
        const std::size_t nb = cb.numel();
        auto ad = ca.data();
        auto bd = cb.data();
        std::span<T> ga, gb;
        if (ca.requires_grad()) ga = ca.grad_buffer();
        if (cb.requires_grad()) gb = cb.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            auto [da, db] = bwd(ad[i], bd[i % nb]);
            if (!ga.empty()) ga[i] += g[i] * da;
            if (!gb.empty()) gb[i % nb] += g[i] * db;
        }
    });
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const char* op, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
    auto xd = x.data();
    std::vector<T> out(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
    Tensor<T> cx = x;
    auto y = std::make_shared<std::vector<T>>(out);
    return record_op<T>(op, x.shape(), std::move(out), {x}, [cx, y, deriv](std::span<const T> g) mutable {
        if (!cx.requires_grad()) return;
        auto gx = cx.grad_buffer();
        auto xd = cx.data();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xd[i], (*y)[i]);
    });
}

template <typename T>
T stable_sigmoid(T x) {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_broadcast<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return std::pair<T, T>{1, 1}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_broadcast<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return std::pair<T, T>{1, -1}; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_broadcast<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T x, T y) { return std::pair<T, T>{y, x}; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    return unary<T>(
        "scale", a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
    return unary<T>(
        "add_scalar", a, [value](T x) { return x + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return unary<T>(
        "sigmoid", x, [](T v) { return stable_sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    return unary<T>(
        "gelu", x, [](T v) { return static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2))); },
        [](T v, T) {
            double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            double pdf = inv_sqrt_2pi * std::exp(-0.5 * double(v) * v);
            return static_cast<T>(cdf + v * pdf);
        });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
    for (T v : x.data()) {
        if (!(v > 0)) throw NumericError("log: non-positive input");
    }
    return unary<T>(
        "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
    return unary<T>(
        "abs", x, [](T v) { return std::abs(v); }, [](T v, T) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> pow(const Tensor<T>& x, T exponent) {
    return unary<T>(
        "pow", x, [exponent](T v) { return std::pow(v, exponent); },
        [exponent](T v, T) { return exponent == T(0) ? T(0) : exponent * std::pow(v, exponent - T(1)); });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    return unary<T>(
        "clamp", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
        [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto ad = a.data();
    auto bd = b.data();
    std::vector<T> out(m * n, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            T av = ad[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * bd[p * n + j];
        }
    }
    Tensor<T> ca = a, cb = b;
    return record_op<T>("matmul", {m, n}, std::move(out), {a, b}, [ca, cb, m, k, n](std::span<const T> g) mutable {
        auto ad = ca.data();
        auto bd = cb.data();
        if (ca.requires_grad()) {
            auto ga = ca.grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    T acc = 0;
                    for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bd[p * n + j];
                    ga[i * k + p] += acc;
                }
        }
        if (cb.requires_grad()) {
            auto gb = cb.grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    T av = ad[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
                }
        }
    });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (weight.rank() != 2 || x.shape().back() != weight.dim(0)) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
    }
    const std::size_t in = weight.dim(0), out_f = weight.dim(1);
    const bool has_bias = bias.defined();
    if (has_bias && (bias.numel() != out_f)) {
        throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match output width");
    }
    const std::size_t rows = x.numel() / in;
    auto xd = x.data();
    auto wd = weight.data();
    std::vector<T> out(rows * out_f);
    for (std::size_t r = 0; r < rows; ++r) {
        T* o = out.data() + r * out_f;
        for (std::size_t j = 0; j < out_f; ++j) o[j] = has_bias ? bias.data()[j] : T(0);
        for (std::size_t p = 0; p < in; ++p) {
            T xv = xd[r * in + p];
            const T* w = wd.data() + p * out_f;
            for (std::size_t j = 0; j < out_f; ++j) o[j] += xv * w[j];
        }
    }
    Shape shape = x.shape();
    shape.back() = out_f;
    std::vector<Tensor<T>> inputs{x, weight};
    if (has_bias) inputs.push_back(bias);
    Tensor<T> cx = x, cw = weight, cb = bias;
    return record_op<T>("linear", std::move(shape), std::move(out), std::move(inputs),
                        [cx, cw, cb, rows, in, out_f](std::span<const T> g) mutable {
                            auto xd = cx.data();
                            auto wd = cw.data();
                            if (cx.requires_grad()) {
                                auto gx = cx.grad_buffer();
                                for (std::size_t r = 0; r < rows; ++r)
                                    for (std::size_t p = 0; p < in; ++p) {
                                        T acc = 0;
                                        const T* w = wd.data() + p * out_f;
                                        for (std::size_t j = 0; j < out_f; ++j) acc += g[r * out_f + j] * w[j];
                                        gx[r * in + p] += acc;
                                    }
                            }
                            if (cw.requires_grad()) {
                                auto gw = cw.grad_buffer();
                                for (std::size_t r = 0; r < rows; ++r)
                                    for (std::size_t p = 0; p < in; ++p) {
                                        T xv = xd[r * in + p];
                                        for (std::size_t j = 0; j < out_f; ++j) gw[p * out_f + j] += xv * g[r * out_f + j];
                                    }
                            }
                            if (cb.defined() && cb.requires_grad()) {
                                auto gb = cb.grad_buffer();
                                for (std::size_t r = 0; r < rows; ++r)
                                    for (std::size_t j = 0; j < out_f; ++j) gb[j] += g[r * out_f + j];
                            }
                        });
}

// ---------------------------------------------------------------------------
// Normalizations

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    require_finite<T>(x.data(), "softmax");
    const auto s = split_axis(x.shape(), axis);
    auto xd = x.data();
    std::vector<T> out(xd.size());
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.extent * s.inner + in;
            T mx = xd[base];
            for (std::size_t k = 1; k < s.extent; ++k) mx = std::max(mx, xd[base + k * s.inner]);
            T total = 0;
            for (std::size_t k = 0; k < s.extent; ++k) {
                T e = std::exp(xd[base + k * s.inner] - mx);
                out[base + k * s.inner] = e;
                total += e;
            }
            for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= total;
        }
    auto y = std::make_shared<std::vector<T>>(out);
    Tensor<T> cx = x;
    return record_op<T>("softmax", x.shape(), std::move(out), {x}, [cx, y, s](std::span<const T> g) mutable {
        if (!cx.requires_grad()) return;
        auto gx = cx.grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t in = 0; in < s.inner; ++in) {
                const std::size_t base = o * s.extent * s.inner + in;
                T dot = 0;
                for (std::size_t k = 0; k < s.extent; ++k) dot += g[base + k * s.inner] * (*y)[base + k * s.inner];
                for (std::size_t k = 0; k < s.extent; ++k) {
                    const std::size_t idx = base + k * s.inner;
                    gx[idx] += (*y)[idx] * (g[idx] - dot);
                }
            }
    });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    const std::size_t width = x.shape().back();
    if (gamma.numel() != width || beta.numel() != width) {
        throw ShapeError("layer_norm: affine parameters must have width " + std::to_string(width));
    }
    const std::size_t rows = x.numel() / width;
    auto xd = x.data();
    auto gd = gamma.data();
    auto bd = beta.data();
    auto xhat = std::make_shared<std::vector<T>>(xd.size());
    auto rstd = std::make_shared<std::vector<T>>(rows);
    std::vector<T> out(xd.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xd.data() + r * width;
        T mu = 0;
        for (std::size_t j = 0; j < width; ++j) mu += row[j];
        mu /= T(width);
        T var = 0;
        for (std::size_t j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= T(width);
        T rs = T(1) / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::size_t j = 0; j < width; ++j) {
            T h = (row[j] - mu) * rs;
            (*xhat)[r * width + j] = h;
            out[r * width + j] = gd[j] * h + bd[j];
        }
    }
    Tensor<T> cx = x, cg = gamma, cb = beta;
    return record_op<T>("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                        [cx, cg, cb, xhat, rstd, rows, width](std::span<const T> g) mutable {
                            auto gd = cg.data();
                            if (cg.requires_grad()) {
                                auto gg = cg.grad_buffer();
                                for (std::size_t i = 0; i < g.size(); ++i) gg[i % width] += g[i] * (*xhat)[i];
                            }
                            if (cb.requires_grad()) {
                                auto gb = cb.grad_buffer();
                                for (std::size_t i = 0; i < g.size(); ++i) gb[i % width] += g[i];
                            }
                            if (!cx.requires_grad()) return;
                            auto gx = cx.grad_buffer();
                            for (std::size_t r = 0; r < rows; ++r) {
                                T sum_d = 0, sum_dh = 0;
                                for (std::size_t j = 0; j < width; ++j) {
                                    T d = g[r * width + j] * gd[j];
                                    sum_d += d;
                                    sum_dh += d * (*xhat)[r * width + j];
                                }
                                for (std::size_t j = 0; j < width; ++j) {
                                    T d = g[r * width + j] * gd[j];
                                    gx[r * width + j] += (*rstd)[r] / T(width) *
                                                         (T(width) * d - sum_d - (*xhat)[r * width + j] * sum_dh);
                                }
                            }
                        });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps) {
    const std::size_t width = x.shape().back();
    const std::size_t rows = x.numel() / width;
    auto xd = x.data();
    auto norms = std::make_shared<std::vector<T>>(rows);
    std::vector<T> out(xd.size());
    for (std::size_t r = 0; r < rows; ++r) {
        T sq = 0;
        for (std::size_t j = 0; j < width; ++j) sq += xd[r * width + j] * xd[r * width + j];
        T n = std::max(std::sqrt(sq), eps);
        (*norms)[r] = n;
        for (std::size_t j = 0; j < width; ++j) out[r * width + j] = xd[r * width + j] / n;
    }
    auto y = std::make_shared<std::vector<T>>(out);
    Tensor<T> cx = x;
    return record_op<T>("l2_normalize", x.shape(), std::move(out), {x},
                        [cx, y, norms, rows, width, eps](std::span<const T> g) mutable {
                            if (!cx.requires_grad()) return;
                            auto gx = cx.grad_buffer();
                            for (std::size_t r = 0; r < rows; ++r) {
                                T n = (*norms)[r];
                                if (n <= eps) {
                                    for (std::size_t j = 0; j < width; ++j) gx[r * width + j] += g[r * width + j] / n;
                                    continue;
                                }
                                T dot = 0;
                                for (std::size_t j = 0; j < width; ++j) dot += g[r * width + j] * (*y)[r * width + j];
                                for (std::size_t j = 0; j < width; ++j)
                                    gx[r * width + j] += (g[r * width + j] - (*y)[r * width + j] * dot) / n;
                            }
                        });
}

// ---------------------------------------------------------------------------
// Temporal ops

template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (x.rank() != 2 || weight.rank() != 3 || weight.dim(1) != x.dim(1) || weight.dim(0) % 2 == 0) {
        throw ShapeError("conv1d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                         shape_str(weight.shape()));
    }
    const std::size_t len = x.dim(0), cin = x.dim(1), ksize = weight.dim(0), cout = weight.dim(2);
    if (bias.numel() != cout) throw ShapeError("conv1d: bias width mismatch");
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(ksize / 2);
    auto xd = x.data();
    auto wd = weight.data();
    auto bd = bias.data();
    std::vector<T> out(len * cout);
    for (std::size_t t = 0; t < len; ++t) {
        T* o = out.data() + t * cout;
        for (std::size_t j = 0; j < cout; ++j) o[j] = bd[j];
        for (std::size_t k = 0; k < ksize; ++k) {
            std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - pad;
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
            for (std::size_t c = 0; c < cin; ++c) {
                T xv = xd[static_cast<std::size_t>(src) * cin + c];
                const T* w = wd.data() + (k * cin + c) * cout;
                for (std::size_t j = 0; j < cout; ++j) o[j] += xv * w[j];
            }
        }
    }
    Tensor<T> cx = x, cw = weight, cb = bias;
    return record_op<T>(
        "conv1d", {len, cout}, std::move(out), {x, weight, bias},
        [cx, cw, cb, len, cin, ksize, cout, pad](std::span<const T> g) mutable {
            auto xd = cx.data();
            auto wd = cw.data();
            std::span<T> gx, gw;
            if (cx.requires_grad()) gx = cx.grad_buffer();
            if (cw.requires_grad()) gw = cw.grad_buffer();
            if (cb.requires_grad()) {
                auto gb = cb.grad_buffer();
                for (std::size_t t = 0; t < len; ++t)
                    for (std::size_t j = 0; j < cout; ++j) gb[j] += g[t * cout + j];
            }
            for (std::size_t t = 0; t < len; ++t)
                for (std::size_t k = 0; k < ksize; ++k) {
                    std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - pad;
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
                    for (std::size_t c = 0; c < cin; ++c) {
                        const std::size_t xi = static_cast<std::size_t>(src) * cin + c;
                        const std::size_t wi = (k * cin + c) * cout;
                        T acc = 0;
                        for (std::size_t j = 0; j < cout; ++j) {
                            T gv = g[t * cout + j];
                            acc += gv * wd[wi + j];
                            if (!gw.empty()) gw[wi + j] += xd[xi] * gv;
                        }
                        if (!gx.empty()) gx[xi] += acc;
                    }
                }
        });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> rows) {
    if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank 2");
    const std::size_t n = table.dim(0), d = table.dim(1);
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    if (idx.empty()) throw ShapeError("gather_rows: empty index list");
    std::vector<T> out(idx.size() * d);
    auto td = table.data();
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= n) throw ShapeError("gather_rows: index out of range");
        std::copy_n(td.data() + idx[r] * d, d, out.data() + r * d);
    }
    Tensor<T> ct = table;
    return record_op<T>("gather_rows", {idx.size(), d}, std::move(out), {table},
                        [ct, idx, d](std::span<const T> g) mutable {
                            if (!ct.requires_grad()) return;
                            auto gt = ct.grad_buffer();
                            for (std::size_t r = 0; r < idx.size(); ++r)
                                for (std::size_t j = 0; j < d; ++j) gt[idx[r] * d + j] += g[r * d + j];
                        });
}

template <typename T>
Tensor<T> roi_align(const Tensor<T>& x, const Tensor<T>& proposals, std::size_t bins) {
    if (x.rank() != 2 || proposals.rank() != 2 || proposals.dim(1) != 2) {
        throw ShapeError("roi_align: expected features [T, D] and proposals [N, 2], got " + shape_str(x.shape()) +
                         " and " + shape_str(proposals.shape()));
    }
    if (bins == 0) throw ShapeError("roi_align: bin count must be positive");
    require_finite<T>(proposals.data(), "roi_align");
    const std::size_t len = x.dim(0), d = x.dim(1), n = proposals.dim(0);

    // Per (proposal, bin): the two source frames and the weight on the upper one.
    struct Tap {
        std::size_t lo, hi;
        double frac;
    };
    std::vector<Tap> taps(n * bins);
    auto pd = proposals.data();
    for (std::size_t q = 0; q < n; ++q) {
        double s = pd[2 * q], e = pd[2 * q + 1];
        if (s > e) std::swap(s, e);
        for (std::size_t i = 0; i < bins; ++i) {
            double u = (s + (double(i) + 0.5) * (e - s) / double(bins)) * double(len);
            double pos = u - 0.5;
            double base = std::floor(pos);
            auto lo = static_cast<std::ptrdiff_t>(base);
            auto clamp_idx = [len](std::ptrdiff_t v) {
                return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(len) - 1));
            };
            taps[q * bins + i] = {clamp_idx(lo), clamp_idx(lo + 1), pos - base};
        }
    }
    auto xd = x.data();
    std::vector<T> out(n * bins * d);
    for (std::size_t b = 0; b < n * bins; ++b) {
        const auto& tap = taps[b];
        const T w1 = static_cast<T>(tap.frac), w0 = T(1) - w1;
        for (std::size_t j = 0; j < d; ++j) out[b * d + j] = w0 * xd[tap.lo * d + j] + w1 * xd[tap.hi * d + j];
    }
    Tensor<T> cx = x, cp = proposals;
    return record_op<T>("roi_align", {n, bins, d}, std::move(out), {x, proposals},
                        [cx, cp, taps, d](std::span<const T> g) mutable {
                            // Coordinates are a stop-gradient input: their gradient stays exactly zero.
                            if (cp.requires_grad()) cp.grad_buffer();
                            if (!cx.requires_grad()) return;
                            auto gx = cx.grad_buffer();
                            for (std::size_t b = 0; b < taps.size(); ++b) {
                                const T w1 = static_cast<T>(taps[b].frac), w0 = T(1) - w1;
                                for (std::size_t j = 0; j < d; ++j) {
                                    gx[taps[b].lo * d + j] += w0 * g[b * d + j];
                                    gx[taps[b].hi * d + j] += w1 * g[b * d + j];
                                }
                            }
                        });
}

// ---------------------------------------------------------------------------
// Structural ops

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Shape shape = parts.front().shape();
    const auto first = split_axis(shape, axis);
    std::size_t extent = 0;
    std::vector<std::size_t> extents;
    for (const auto& p : parts) {
        if (p.rank() != shape.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i != axis && p.dim(i) != shape[i]) throw ShapeError("concat: shape mismatch off the concat axis");
        }
        extents.push_back(p.dim(axis));
        extent += p.dim(axis);
    }
    shape[axis] = extent;
    const std::size_t outer = first.outer, inner = first.inner;
    std::vector<T> out(outer * extent * inner);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        auto pd = parts[k].data();
        const std::size_t chunk = extents[k] * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(pd.data() + o * chunk, chunk, out.data() + o * extent * inner + offset * inner);
        offset += extents[k];
    }
    std::vector<Tensor<T>> inputs = parts;
    return record_op<T>("concat", std::move(shape), std::move(out), parts,
                        [inputs, extents, outer, inner, extent](std::span<const T> g) mutable {
                            std::size_t offset = 0;
                            for (std::size_t k = 0; k < inputs.size(); ++k) {
                                const std::size_t chunk = extents[k] * inner;
                                if (inputs[k].requires_grad()) {
                                    auto gi = inputs[k].grad_buffer();
                                    for (std::size_t o = 0; o < outer; ++o)
                                        for (std::size_t c = 0; c < chunk; ++c)
                                            gi[o * chunk + c] += g[o * extent * inner + offset * inner + c];
                                }
                                offset += extents[k];
                            }
                        });
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t count) {
    const std::size_t width = x.shape().back();
    if (count == 0 || start + count > width) throw ShapeError("slice_last: range out of bounds");
    const std::size_t rows = x.numel() / width;
    auto xd = x.data();
    std::vector<T> out(rows * count);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(xd.data() + r * width + start, count, out.data() + r * count);
    Shape shape = x.shape();
    shape.back() = count;
    Tensor<T> cx = x;
    return record_op<T>("slice_last", std::move(shape), std::move(out), {x},
                        [cx, rows, width, start, count](std::span<const T> g) mutable {
                            if (!cx.requires_grad()) return;
                            auto gx = cx.grad_buffer();
                            for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t c = 0; c < count; ++c) gx[r * width + start + c] += g[r * count + c];
                        });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T total = 0;
    for (T v : x.data()) total += v;
    Tensor<T> cx = x;
    return record_op<T>("sum", {1}, {total}, {x}, [cx](std::span<const T> g) mutable {
        if (!cx.requires_grad()) return;
        auto gx = cx.grad_buffer();
        for (auto& v : gx) v += g[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
    const auto s = split_axis(x.shape(), axis);
    auto xd = x.data();
    std::vector<T> out(s.outer * s.inner, T(0));
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t k = 0; k < s.extent; ++k)
            for (std::size_t in = 0; in < s.inner; ++in)
                out[o * s.inner + in] += xd[(o * s.extent + k) * s.inner + in];
    for (auto& v : out) v /= T(s.extent);
    Shape shape = x.shape();
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (shape.empty()) shape = {1};
    Tensor<T> cx = x;
    return record_op<T>("mean_axis", std::move(shape), std::move(out), {x}, [cx, s](std::span<const T> g) mutable {
        if (!cx.requires_grad()) return;
        auto gx = cx.grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t k = 0; k < s.extent; ++k)
                for (std::size_t in = 0; in < s.inner; ++in)
                    gx[(o * s.extent + k) * s.inner + in] += g[o * s.inner + in] / T(s.extent);
    });
}

template <typename T>
Tensor<T> max_axis(const Tensor<T>& x, std::size_t axis) {
    const auto s = split_axis(x.shape(), axis);
    auto xd = x.data();
    std::vector<T> out(s.outer * s.inner);
    std::vector<std::size_t> arg(s.outer * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < s.extent; ++k)
                if (xd[(o * s.extent + k) * s.inner + in] > xd[(o * s.extent + best) * s.inner + in]) best = k;
            out[o * s.inner + in] = xd[(o * s.extent + best) * s.inner + in];
            arg[o * s.inner + in] = (o * s.extent + best) * s.inner + in;
        }
    Shape shape = x.shape();
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (shape.empty()) shape = {1};
    Tensor<T> cx = x;
    return record_op<T>("max_axis", std::move(shape), std::move(out), {x}, [cx, arg](std::span<const T> g) mutable {
        if (!cx.requires_grad()) return;
        auto gx = cx.grad_buffer();
        for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads) {
    auto as3 = [](const Tensor<T>& t) -> Shape {
        if (t.rank() == 2) return {1, t.dim(0), t.dim(1)};
        if (t.rank() == 3) return t.shape();
        throw ShapeError("attention: inputs must be rank 2 or 3, got " + shape_str(t.shape()));
    };
    const Shape qs = as3(q), ks = as3(k), vs = as3(v);
    const std::size_t batch = qs[0], n = qs[1], width = qs[2], m = ks[1];
    if (ks[0] != batch || vs[0] != batch || ks[2] != width || vs[2] != width || vs[1] != m) {
        throw ShapeError("attention: incompatible q/k/v shapes " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                         ", " + shape_str(v.shape()));
    }
    if (heads == 0 || width % heads != 0) throw ShapeError("attention: width not divisible by head count");
    const std::size_t dh = width / heads;
    const T inv_scale = T(1) / std::sqrt(T(dh));
    auto qd = q.data();
    auto kd = k.data();
    auto vd = v.data();
    // probs[((b * heads + h) * n + i) * m + j]
    auto probs = std::make_shared<std::vector<T>>(batch * heads * n * m);
    std::vector<T> out(batch * n * width, T(0));
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < n; ++i) {
                T* p = probs->data() + ((b * heads + h) * n + i) * m;
                const T* qi = qd.data() + (b * n + i) * width + h * dh;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < m; ++j) {
                    const T* kj = kd.data() + (b * m + j) * width + h * dh;
                    T dot = 0;
                    for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
                    p[j] = dot * inv_scale;
                    mx = std::max(mx, p[j]);
                }
                T total = 0;
                for (std::size_t j = 0; j < m; ++j) {
                    p[j] = std::exp(p[j] - mx);
                    total += p[j];
                }
                T* o = out.data() + (b * n + i) * width + h * dh;
                for (std::size_t j = 0; j < m; ++j) {
                    p[j] /= total;
                    const T* vj = vd.data() + (b * m + j) * width + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) o[c] += p[j] * vj[c];
                }
            }
    Shape out_shape = q.rank() == 2 ? Shape{n, width} : Shape{batch, n, width};
    Tensor<T> cq = q, ck = k, cv = v;
    return record_op<T>(
        "attention", std::move(out_shape), std::move(out), {q, k, v},
        [cq, ck, cv, probs, batch, heads, n, m, width, dh, inv_scale](std::span<const T> g) mutable {
            auto qd = cq.data();
            auto kd = ck.data();
            auto vd = cv.data();
            std::span<T> gq, gk, gv;
            if (cq.requires_grad()) gq = cq.grad_buffer();
            if (ck.requires_grad()) gk = ck.grad_buffer();
            if (cv.requires_grad()) gv = cv.grad_buffer();
            std::vector<T> dp(m);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t i = 0; i < n; ++i) {
                        const T* p = probs->data() + ((b * heads + h) * n + i) * m;
                        const T* go = g.data() + (b * n + i) * width + h * dh;
                        T dot = 0;
                        for (std::size_t j = 0; j < m; ++j) {
                            const std::size_t vj = (b * m + j) * width + h * dh;
                            T acc = 0;
                            for (std::size_t c = 0; c < dh; ++c) {
                                acc += go[c] * vd[vj + c];
                                if (!gv.empty()) gv[vj + c] += p[j] * go[c];
                            }
                            dp[j] = acc;
                            dot += p[j] * acc;
                        }
                        const std::size_t qi = (b * n + i) * width + h * dh;
                        for (std::size_t j = 0; j < m; ++j) {
                            const T ds = p[j] * (dp[j] - dot) * inv_scale;
                            const std::size_t kj = (b * m + j) * width + h * dh;
                            for (std::size_t c = 0; c < dh; ++c) {
                                if (!gq.empty()) gq[qi + c] += ds * kd[kj + c];
                                if (!gk.empty()) gk[kj + c] += ds * qd[qi + c];
                            }
                        }
                    }
        });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T rate, std::mt19937_64& rng) {
    if (rate <= T(0)) return x;
    if (rate >= T(1)) throw ContractError("dropout: rate must be below 1");
    std::bernoulli_distribution keep(1.0 - double(rate));
    auto mask = std::make_shared<std::vector<T>>(x.numel());
    const T kept = T(1) / (T(1) - rate);
    for (auto& m : *mask) m = keep(rng) ? kept : T(0);
    Tensor<T> mt(x.shape(), *mask, false);
    return mul(x, mt);
}

template <typename T>
Tensor<T> interval_iou(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape() || pred.rank() != 2 || pred.dim(1) != 2) {
        throw ShapeError("interval_iou: expected matching [N, 2] inputs");
    }
    const std::size_t n = pred.dim(0);
    auto pd = pred.data();
    auto td = target.data();
    std::vector<T> out(n, T(0));
    for (std::size_t r = 0; r < n; ++r) {
        const T ps = pd[2 * r], pe = pd[2 * r + 1], ts = td[2 * r], te = td[2 * r + 1];
        if (ps > pe) continue;
        const T inter = std::max(T(0), std::min(pe, te) - std::max(ps, ts));
        const T uni = (pe - ps) + (te - ts) - inter;
        out[r] = uni > T(0) ? inter / uni : T(0);
    }
    Tensor<T> cp = pred, ct = target;
    return record_op<T>("interval_iou", {n}, std::move(out), {pred, target}, [cp, ct, n](std::span<const T> g) mutable {
        auto pd = cp.data();
        auto td = ct.data();
        std::span<T> gp, gt;
        if (cp.requires_grad()) gp = cp.grad_buffer();
        if (ct.requires_grad()) gt = ct.grad_buffer();
        for (std::size_t r = 0; r < n; ++r) {
            const T ps = pd[2 * r], pe = pd[2 * r + 1], ts = td[2 * r], te = td[2 * r + 1];
            if (ps > pe) continue;
            const T raw = std::min(pe, te) - std::max(ps, ts);
            const T inter = std::max(T(0), raw);
            const T uni = (pe - ps) + (te - ts) - inter;
            if (!(uni > T(0))) continue;
            // d(inter) with respect to (ps, pe, ts, te).
            T di[4] = {0, 0, 0, 0};
            if (raw > T(0)) {
                if (ps >= ts) di[0] = -1; else di[2] = -1;
                if (pe <= te) di[1] = 1; else di[3] = 1;
            }
            const T du[4] = {T(-1) - di[0], T(1) - di[1], T(-1) - di[2], T(1) - di[3]};
            for (int c = 0; c < 4; ++c) {
                const T d = g[r] * (di[c] * uni - inter * du[c]) / (uni * uni);
                if (c < 2 && !gp.empty()) gp[2 * r + c] += d;
                if (c >= 2 && !gt.empty()) gt[2 * r + (c - 2)] += d;
            }
        }
    });
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
    std::vector<To> out(x.data().begin(), x.data().end());
    return Tensor<To>(x.shape(), std::move(out), x.requires_grad());
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define GAP_INSTANTIATE(T)                                                                                      \
    template class Tensor<T>;                                                                                   \
    template class Tape<T>;                                                                                     \
    template Tensor<T> record_op<T>(std::string, Shape, std::vector<T>, std::vector<Tensor<T>>,                 \
                                    Tape<T>::BackwardFn);                                                       \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                 \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                 \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                 \
    template Tensor<T> scale(const Tensor<T>&, T);                                                              \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                                         \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                               \
    template Tensor<T> gelu(const Tensor<T>&);                                                                  \
    template Tensor<T> log(const Tensor<T>&);                                                                   \
    template Tensor<T> abs(const Tensor<T>&);                                                                   \
    template Tensor<T> pow(const Tensor<T>&, T);                                                                \
    template Tensor<T> clamp(const Tensor<T>&, T, T);                                                           \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                              \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                                  \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                     \
    template Tensor<T> l2_normalize(const Tensor<T>&, T);                                                       \
    template Tensor<T> conv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                             \
    template Tensor<T> roi_align(const Tensor<T>&, const Tensor<T>&, std::size_t);                              \
    template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                      \
    template Tensor<T> slice_last(const Tensor<T>&, std::size_t, std::size_t);                                  \
    template Tensor<T> sum(const Tensor<T>&);                                                                   \
    template Tensor<T> mean(const Tensor<T>&);                                                                  \
    template Tensor<T> mean_axis(const Tensor<T>&, std::size_t);                                                \
    template Tensor<T> max_axis(const Tensor<T>&, std::size_t);                                                 \
    template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);            \
    template Tensor<T> dropout(const Tensor<T>&, T, std::mt19937_64&);                                          \
    template Tensor<T> interval_iou(const Tensor<T>&, const Tensor<T>&);

GAP_INSTANTIATE(float)
GAP_INSTANTIATE(double)
#undef GAP_INSTANTIATE

template Tensor<double> cast<double, float>(const Tensor<float>&);
template Tensor<float> cast<float, double>(const Tensor<double>&);
template Tensor<float> cast<float, float>(const Tensor<float>&);
template Tensor<double> cast<double, double>(const Tensor<double>&);

}  // namespace gap::tensor
