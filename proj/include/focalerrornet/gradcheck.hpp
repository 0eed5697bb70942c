#pragma once

#include <functional>
#include <span>
#include <vector>

#include "focalerrornet/tensor.hpp"

namespace fen {

/// Scalar-valued graph over a list of inputs, evaluated in 64-bit mode.
using GraphFn =
    std::function<Tensor<double>(Tape<double>& tape, std::span<const Tensor<double>> inputs)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of `graph` against central differences
/// (f(x+eps) - f(x-eps)) / 2eps for every coordinate of every input.
/// Error per coordinate is |analytic - fd| / max(|analytic|, |fd|, 1e-8).
/// The graph must be deterministic; stochastic ops should rebuild their
/// Rng from a fixed stream on every call.
GradCheckResult grad_check(const GraphFn& graph, std::vector<Tensor<double>> inputs,
                           double epsilon = 1e-3);

}  // namespace fen
