#pragma once

#include <cstdint>

#include <json.hpp>

namespace fen {

/// Fast invariant suite behind `fen selftest`: gradient checks of the core
/// ops, B-spline identities, landmark-fit recovery, statistics oracles and
/// format round-trips. Returns {"passed": bool, "checks": [{name, passed,
/// detail}...]}; a throwing check is recorded as failed, never propagated.
nlohmann::json run_selftest();

/// Criterion-1 gradient suite in 64-bit mode: every differentiable op
/// (tolerance 1e-4, epsilon 1e-3) and the full reduced-width FocalErrorNet and
/// baseline on 9^3 inputs with every parameter perturbed (tolerance 1e-3).
/// Same result shape as run_selftest, plus per-check max_relative_error.
nlohmann::json run_gradient_suite(std::uint64_t seed = 1);

}  // namespace fen
