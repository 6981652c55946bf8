#pragma once

// Dense row-major tensors with a dynamically recorded reverse-mode tape.
//
// Ops record onto the tape that is active on the calling thread (see
// Tape::Scope). With no active tape every op runs forward-only and the
// result never requires a gradient. Tensor<float> is the training
// precision; Tensor<double> exists for finite-difference checks.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gap/errors.hpp"

namespace gap::tensor {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a gradient flows in
    bool requires_grad = false;
};

template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>);

public:
    using value_type = T;

    Tensor() = default;
    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);
    static Tensor uniform(Shape shape, T bound, std::mt19937_64& rng, bool requires_grad = false);
    static Tensor normal(Shape shape, T stddev, std::mt19937_64& rng, bool requires_grad = false);

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const T> data() const { return impl_->data; }
    // Direct writes bypass the tape; only use on leaves (parameters, inputs).
    std::span<T> mutable_data() { return impl_->data; }
    T item() const;
    T operator[](std::size_t flat) const { return impl_->data[flat]; }
    T at(std::size_t row, std::size_t col) const;

    bool requires_grad() const noexcept { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool value) { impl_->requires_grad = value; }
    bool has_grad() const noexcept { return impl_ && !impl_->grad.empty(); }
    std::span<const T> grad() const { return impl_->grad; }
    // Allocates a zero gradient buffer on first use.
    std::span<T> grad_buffer();
    void zero_grad() { impl_->grad.clear(); }

    // Fresh leaf holding a copy of the values; the tape stops here.
    Tensor detach() const;
    Tensor reshape(Shape shape) const;

    bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }
    const std::shared_ptr<TensorImpl<T>>& impl() const noexcept { return impl_; }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

enum class TapeMode { forward_only, recording };

template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(std::span<const T> grad_out)>;

    struct Node {
        std::string op;
        std::vector<Tensor<T>> inputs;
        Tensor<T> output;
        BackwardFn backward;
    };

    explicit Tape(TapeMode mode = TapeMode::recording) : mode_(mode) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    TapeMode mode() const noexcept { return mode_; }
    std::size_t size() const noexcept { return nodes_.size(); }
    const std::vector<Node>& nodes() const noexcept { return nodes_; }

    void record(Node node);
    // Seeds d(loss)/d(loss) = 1 and runs each node's backward once, newest
    // first. Gradients accumulate into leaves, so several backward passes
    // over fresh tapes sum their contributions.
    void backward(const Tensor<T>& loss);
    void clear() { nodes_.clear(); }

    static Tape* active();

    // Makes `tape` the recording target for this thread while alive.
    class Scope {
    public:
        explicit Scope(Tape& tape);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* previous_;
    };

private:
    TapeMode mode_;
    std::vector<Node> nodes_;
};

// Builds a result tensor and, when recording and any input needs a gradient,
// appends a node whose backward receives d(loss)/d(result). Exposed so that
// callers can define ops the library does not ship.
template <typename T>
Tensor<T> record_op(std::string op, Shape shape, std::vector<T> data, std::vector<Tensor<T>> inputs,
                    typename Tape<T>::BackwardFn backward);

// Elementwise. `b` may also be a suffix-shaped tensor broadcast over the
// leading dimensions of `a` (bias vectors, per-feature scales).
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T value);

template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);
template <typename T> Tensor<T> abs(const Tensor<T>& x);
template <typename T> Tensor<T> pow(const Tensor<T>& x, T exponent);
template <typename T> Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// x[..., in] * weight[in, out] + bias[out]; bias may be undefined.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));
template <typename T> Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-12));

// Same-padded 1D convolution over time. x: [T, in], weight: [K, in, out]
// with K odd, bias: [out].
template <typename T> Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// Row lookup: table [n, d] gathered at `rows`.
template <typename T> Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> rows);

// Temporal RoIAlign: x [T, D], proposals [N, 2] normalized (start, end).
// Returns [N, bins, D]. Proposal coordinates never receive a gradient.
template <typename T> Tensor<T> roi_align(const Tensor<T>& x, const Tensor<T>& proposals, std::size_t bins);

template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
// Columns [start, start + count) of the last axis.
template <typename T> Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t count);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> max_axis(const Tensor<T>& x, std::size_t axis);

// Scaled dot-product attention, `heads` equal slices of the feature axis.
// q: [B, n, D], k and v: [B, m, D] -> [B, n, D]. Rank-2 inputs are treated
// as B = 1.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads);

// Inverted dropout; identity when rate == 0.
template <typename T> Tensor<T> dropout(const Tensor<T>& x, T rate, std::mt19937_64& rng);

// Row-wise temporal IoU of [N, 2] interval tensors. Rows whose predicted
// start exceeds the end score 0.
template <typename T> Tensor<T> interval_iou(const Tensor<T>& pred, const Tensor<T>& target);

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x);

}  // namespace gap::tensor
