#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "protohead/numerics.hpp"

namespace protohead {

// Scalar loss over a list of parameter matrices. When `grads` is non-null the
// callee fills it with analytic gradients shaped like `params`.
using LossFunction = std::function<double(std::span<const Matrix> params, std::vector<Matrix>* grads)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
};

// Central-difference check of the analytic gradient. Compares at least
// `samples` coordinates (all of them when fewer exist), picked
// deterministically from `seed`. Error per coordinate is
// |analytic - numeric| / max(1, |analytic|).
GradCheckResult grad_check(const LossFunction& fn, std::vector<Matrix> params, double step,
                           std::size_t samples = 64, std::uint64_t seed = 0);

}  // namespace protohead
