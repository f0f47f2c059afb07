#pragma once

#include <functional>
#include <span>
#include <vector>

#include "reclab/graph.hpp"

namespace reclab {

/// Builds a scalar loss on a fresh graph from leaves holding `params`.
using LossBuilder = std::function<Var(Graph& g, std::span<const Var> params)>;

/// Compares reverse-mode gradients against central differences over every
/// coordinate of every parameter. Returns
/// max |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
Real finite_diff_check(const LossBuilder& f, std::vector<Tensor> params, Real h = Real(1e-5));

}  // namespace reclab
