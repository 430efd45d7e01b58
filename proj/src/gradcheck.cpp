#include "protohead/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <utility>

#include "protohead/errors.hpp"

namespace protohead {

GradCheckResult grad_check(const LossFunction& fn, std::vector<Matrix> params, double step,
                           std::size_t samples, std::uint64_t seed) {
  if (!(step > 0.0)) fail(ErrorCode::kConfigError, "grad_check step must be > 0");
  std::vector<Matrix> analytic;
  const double base = fn(params, &analytic);
  if (!std::isfinite(base)) fail(ErrorCode::kNonFiniteLoss, "loss is not finite at the base point");
  if (analytic.size() != params.size()) fail(ErrorCode::kShapeMismatch, "gradient count differs from parameter count");

  std::vector<std::pair<std::size_t, Eigen::Index>> coords;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (analytic[p].rows() != params[p].rows() || analytic[p].cols() != params[p].cols()) {
      fail(ErrorCode::kShapeMismatch, "gradient shape differs from its parameter");
    }
    for (Eigen::Index i = 0; i < params[p].size(); ++i) coords.emplace_back(p, i);
  }
  if (coords.size() > samples) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(samples);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckResult result;
  for (auto [p, i] : coords) {
    double* x = params[p].data() + i;
    const double saved = *x;
    *x = saved + step;
    const double up = fn(params, nullptr);
    *x = saved - step;
    const double down = fn(params, nullptr);
    *x = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) fail(ErrorCode::kNonFiniteLoss, "loss is not finite near the base point");
    const double numeric = (up - down) / (2.0 * step);
    const double exact = analytic[p].data()[i];
    const double err = std::abs(exact - numeric) / std::max(1.0, std::abs(exact));
    result.max_relative_error = std::max(result.max_relative_error, err);
    ++result.coordinates_checked;
  }
  return result;
}

}  // namespace protohead
