#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ctok/tape.hpp"

namespace ctok {

/// Central-difference gradient (f(x+h) - f(x-h)) / 2h of `f` at `x`, one coordinate at a time.
/// Throws UsageError if step <= 0.
std::vector<double> finite_diff(const std::function<double(std::span<const double>)>& f,
                                std::span<const double> x, double step);

/// Central differences of the scalar node `loss` with respect to leaf `param`, evaluated by
/// re-running tape.forward() with the leaf perturbed. The leaf's value is restored afterwards.
Tensor finite_diff(Tape& tape, NodeId loss, NodeId param, double step);

/// ||a - b|| / max(||a||, ||b||, floor). The floor keeps parameters whose true gradient is
/// exactly zero (dead units) from turning round-off into a unit relative error.
double relative_error(std::span<const double> analytic, std::span<const double> numeric,
                      double floor = 1e-6);

}  // namespace ctok
