#pragma once

#include <cstdint>
#include <vector>

#include "gap/tensor.hpp"

namespace gap::tensor {

struct AdamWOptions {
    double learning_rate = 1e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <typename T>
struct AdamWState {
    AdamWOptions options;
    std::vector<std::vector<T>> first_moment;
    std::vector<std::vector<T>> second_moment;
    std::int64_t step_count = 0;
};

template <typename T>
AdamWState<T> make_adamw_state(const std::vector<NamedTensor<T>>& params, AdamWOptions options);

// One decoupled-weight-decay Adam update using each parameter's gradient
// buffer (absent buffer = zero gradient) multiplied by `grad_scale`.
// Nothing is modified if any gradient is non-finite; the NumericError names
// the offending parameter.
template <typename T>
void adamw_step(std::vector<NamedTensor<T>>& params, AdamWState<T>& state, T grad_scale = T(1));

}  // namespace gap::tensor
