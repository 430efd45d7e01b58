#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

namespace protohead {

// Training math runs in double precision; bundles and checkpoints store f32.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using SparseMap = Eigen::SparseMatrix<double, Eigen::RowMajor>;

inline constexpr double kNormEpsilon = 1e-12;

// Throws kNonFiniteValue naming `what` if any entry is NaN or infinite.
void require_finite(const Matrix& m, std::string_view what);
void require_finite(const Vector& v, std::string_view what);

// Entry (p, q) is the cosine similarity of a.row(p) and b.row(q).
Matrix cosine_rows(const Matrix& a, const Matrix& b);

// Row-wise softmax of m / tau, max-subtracted.
Matrix softmax_rows(const Matrix& m, double tau);

// Indices of the k largest entries, largest first, ties to the lower index.
std::vector<std::size_t> topk_indices(std::span<const double> v, std::size_t k);

double topk_mean(std::span<const double> v, std::size_t k);

// topk_mean over each column of m.
Vector topk_mean_cols(const Matrix& m, std::size_t k);

// First index of the maximum.
std::size_t argmax(std::span<const double> v);

inline std::span<const double> as_span(const Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

// Row norms, failing with kZeroNormRow when any falls below kNormEpsilon.
Vector checked_row_norms(const Matrix& m, std::string_view what);

}  // namespace protohead
