#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gap/tensor.hpp"

namespace gap::check {

using tensor::NamedTensor;
using tensor::Tensor;

struct GradcheckOptions {
    double step = 1e-4;
    // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    double floor = 1e-5;
    double tolerance = 1e-4;
    // Coordinates probed per input; 0 checks every entry.
    std::size_t samples_per_input = 0;
    std::uint64_t seed = 0;
};

struct GradcheckResult {
    std::string name;
    std::size_t checked = 0;
    double max_rel_error = 0.0;
    std::string worst_input;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    double seconds = 0.0;
    bool passed = false;
};

// `loss` must rebuild a scalar from the current values of `inputs` on the
// active tape each time it is called. Inputs are perturbed in place and
// restored afterwards.
GradcheckResult gradcheck(const std::string& name, const std::function<Tensor<double>()>& loss,
                          const std::vector<NamedTensor<double>>& inputs, const GradcheckOptions& options = {});

// Each tensor primitive on seeded random inputs, every entry checked.
std::vector<GradcheckResult> primitive_suite(std::uint64_t seed, const GradcheckOptions& options = {});
// Model blocks and loss terms on the micro configuration (T = 8, D = 16,
// N_q = 4, two targets). Unless set, six coordinates per parameter tensor
// are probed.
std::vector<GradcheckResult> block_suite(std::uint64_t seed, const GradcheckOptions& options = {});
// Both of the above: every differentiable block of the detector on small seeded instances.
std::vector<GradcheckResult> gradient_suite(std::uint64_t seed, const GradcheckOptions& options = {});

}  // namespace gap::check
