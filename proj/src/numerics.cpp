#include "protohead/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "protohead/errors.hpp"

namespace protohead {

void require_finite(const Matrix& m, std::string_view what) {
  if (!m.allFinite()) fail(ErrorCode::kNonFiniteValue, std::string(what) + " contains NaN or Inf");
}

void require_finite(const Vector& v, std::string_view what) {
  if (!v.allFinite()) fail(ErrorCode::kNonFiniteValue, std::string(what) + " contains NaN or Inf");
}

Vector checked_row_norms(const Matrix& m, std::string_view what) {
  Vector norms = m.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i) {
    if (!(norms[i] >= kNormEpsilon)) {
      fail(ErrorCode::kZeroNormRow, std::string(what) + " row " + std::to_string(i) + " has norm below 1e-12");
    }
  }
  return norms;
}

Matrix cosine_rows(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols() || a.cols() < 1) {
    fail(ErrorCode::kShapeMismatch, "cosine_rows needs equal, non-zero column counts");
  }
  const Vector na = checked_row_norms(a, "cosine_rows lhs");
  const Vector nb = checked_row_norms(b, "cosine_rows rhs");
  Matrix out = a * b.transpose();
  out.array().colwise() /= na.array();
  out.array().rowwise() /= nb.transpose().array();
  return out.cwiseMax(-1.0).cwiseMin(1.0);
}

Matrix softmax_rows(const Matrix& m, double tau) {
  if (!(tau > 0.0)) fail(ErrorCode::kNonPositiveTemperature, "softmax temperature must be > 0");
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double top = m.row(i).maxCoeff();
    out.row(i) = ((m.row(i).array() - top) / tau).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

std::vector<std::size_t> topk_indices(std::span<const double> v, std::size_t k) {
  if (k < 1 || k > v.size()) {
    fail(ErrorCode::kKOutOfRange, "top-k needs 1 <= k <= " + std::to_string(v.size()) + ", got " + std::to_string(k));
  }
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });
  idx.resize(k);
  return idx;
}

double topk_mean(std::span<const double> v, std::size_t k) {
  double sum = 0.0;
  for (std::size_t i : topk_indices(v, k)) sum += v[i];
  return sum / static_cast<double>(k);
}

Vector topk_mean_cols(const Matrix& m, std::size_t k) {
  Vector out(m.cols());
  std::vector<double> column(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index n = 0; n < m.cols(); ++n) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) column[static_cast<std::size_t>(i)] = m(i, n);
    out[n] = topk_mean(column, k);
  }
  return out;
}

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace protohead
