#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctok/tensor.hpp"

namespace ctok {

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First/second moment accumulators, zero-initialized on the first update.
struct AdamState {
    AdamOptions options;
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
    std::uint64_t step = 0;
};

struct ParamUpdate {
    std::string name;
    Tensor* value;
    const Tensor* grad;
};

/// One bias-corrected Adam step over every parameter, in order. The parameter list must
/// keep the same order and shapes across calls sharing a state. Throws NumericalError
/// naming the parameter if a gradient is NaN or infinite (no parameter is modified in that case).
void adam_update(std::span<const ParamUpdate> params, AdamState& state, double lr);

}  // namespace ctok
