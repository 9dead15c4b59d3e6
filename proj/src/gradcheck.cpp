#include "ctok/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ctok/error.hpp"

namespace ctok {

std::vector<double> finite_diff(const std::function<double(std::span<const double>)>& f,
                                std::span<const double> x, double step) {
    if (!(step > 0.0)) {
        throw UsageError("finite_diff step must be positive");
    }
    std::vector<double> point(x.begin(), x.end());
    std::vector<double> grad(point.size());
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double saved = point[i];
        point[i] = saved + step;
        const double up = f(point);
        point[i] = saved - step;
        const double down = f(point);
        point[i] = saved;
        grad[i] = (up - down) / (2.0 * step);
    }
    return grad;
}

Tensor finite_diff(Tape& tape, NodeId loss, NodeId param, double step) {
    const Tensor original = tape.value(param);
    auto f = [&](std::span<const double> x) {
        Tensor t = original;
        std::copy(x.begin(), x.end(), t.values().begin());
        tape.set_value(param, std::move(t));
        const NodeId out[] = {loss};
        return tape.forward(out).front().item();
    };
    std::vector<double> g = finite_diff(f, original.values(), step);
    tape.set_value(param, original);
    tape.forward();
    return Tensor(original.shape(), std::move(g));
}

double relative_error(std::span<const double> analytic, std::span<const double> numeric,
                      double floor) {
    double diff = 0.0;
    double na = 0.0;
    double nn = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double d = analytic[i] - numeric[i];
        diff += d * d;
        na += analytic[i] * analytic[i];
        nn += numeric[i] * numeric[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

}  // namespace ctok
