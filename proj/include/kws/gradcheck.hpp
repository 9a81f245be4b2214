// Central-difference verification for tape gradients.

#pragma once

#include <functional>
#include <span>
#include <vector>

#include "kws/tensor.hpp"

namespace kws {

// Builds a fresh graph from the current values of the checked parameters
// (which it must register with Tape::param) and returns the scalar loss
// node. Called repeatedly while grad_check perturbs the parameters in place.
using GraphFn = std::function<Tape::Id(Tape&)>;

// Max over all elements of the given parameters of
//   |analytic - central_difference| / max(1, |central_difference|)
// with step eps. Rejects graphs whose output is not scalar.
double grad_check(const GraphFn& f, std::span<Tensor* const> params, double eps = 1e-5);

}  // namespace kws
