#include "ctok/adam.hpp"

#include <cmath>

#include "ctok/error.hpp"

namespace ctok {

void adam_update(std::span<const ParamUpdate> params, AdamState& state, double lr) {
    if (!(lr >= 0.0)) {
        throw UsageError("learning rate must be non-negative");
    }
    for (const auto& p : params) {
        if (!p.value->same_shape(*p.grad)) {
            throw ShapeError(0, "adam: gradient shape " + p.grad->shape_string() +
                                    " differs from parameter '" + p.name + "' " +
                                    p.value->shape_string());
        }
        if (!p.grad->all_finite()) {
            throw NumericalError("adam: non-finite gradient for parameter '" + p.name + "'");
        }
    }
    if (state.first_moment.empty()) {
        for (const auto& p : params) {
            state.first_moment.emplace_back(
                p.value->shape(), std::vector<double>(p.value->size(), 0.0));
            state.second_moment.emplace_back(
                p.value->shape(), std::vector<double>(p.value->size(), 0.0));
        }
    } else if (state.first_moment.size() != params.size()) {
        throw UsageError("adam: parameter list changed between updates");
    }

    state.step += 1;
    const auto& o = state.options;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(o.beta1, t);
    const double correction2 = 1.0 - std::pow(o.beta2, t);

    for (std::size_t k = 0; k < params.size(); ++k) {
        auto w = params[k].value->values();
        auto g = params[k].grad->values();
        auto m = state.first_moment[k].values();
        auto v = state.second_moment[k].values();
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
            v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
            const double m_hat = m[i] / correction1;
            const double v_hat = v[i] / correction2;
            w[i] -= lr * m_hat / (std::sqrt(v_hat) + o.eps);
        }
    }
}

}  // namespace ctok
