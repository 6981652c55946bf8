#include "gap/adamw.hpp"

#include <cmath>

namespace gap::tensor {

template <typename T>
AdamWState<T> make_adamw_state(const std::vector<NamedTensor<T>>& params, AdamWOptions options) {
    AdamWState<T> state;
    state.options = options;
    for (const auto& p : params) {
        state.first_moment.emplace_back(p.tensor.numel(), T(0));
        state.second_moment.emplace_back(p.tensor.numel(), T(0));
    }
    return state;
}

template <typename T>
void adamw_step(std::vector<NamedTensor<T>>& params, AdamWState<T>& state, T grad_scale) {
    const auto& opt = state.options;
    if (!(opt.learning_rate > 0)) throw ContractError("adamw_step: learning rate must be positive");
    if (state.first_moment.size() != params.size()) throw ShapeError("adamw_step: state does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& t = params[i].tensor;
        if (state.first_moment[i].size() != t.numel()) {
            throw ShapeError("adamw_step: moment buffer shape mismatch for " + params[i].name);
        }
        if (!t.has_grad()) continue;
        for (T g : t.grad()) {
            if (!std::isfinite(g)) throw NumericError("adamw_step: non-finite gradient in " + params[i].name);
        }
    }

    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(opt.beta1, double(state.step_count));
    const double bc2 = 1.0 - std::pow(opt.beta2, double(state.step_count));
    const T lr = static_cast<T>(opt.learning_rate);
    const T decay = static_cast<T>(opt.learning_rate * opt.weight_decay);
    const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
    const T eps = static_cast<T>(opt.epsilon);

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& t = params[i].tensor;
        auto w = t.mutable_data();
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        std::span<const T> g;
        if (t.has_grad()) g = t.grad();
        for (std::size_t j = 0; j < w.size(); ++j) {
            const T gj = g.empty() ? T(0) : g[j] * grad_scale;
            w[j] -= decay * w[j];
            m[j] = b1 * m[j] + (T(1) - b1) * gj;
            v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
            const T mhat = m[j] / static_cast<T>(bc1);
            const T vhat = v[j] / static_cast<T>(bc2);
            w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

template AdamWState<float> make_adamw_state(const std::vector<NamedTensor<float>>&, AdamWOptions);
template AdamWState<double> make_adamw_state(const std::vector<NamedTensor<double>>&, AdamWOptions);
template void adamw_step(std::vector<NamedTensor<float>>&, AdamWState<float>&, float);
template void adamw_step(std::vector<NamedTensor<double>>&, AdamWState<double>&, double);

}  // namespace gap::tensor
