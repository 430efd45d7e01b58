#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "protohead/config.hpp"
#include "protohead/numerics.hpp"
#include "protohead/tape.hpp"

namespace protohead {

// -(1/G) sum_g log(max(floor, <a_s(g), a_t(g)>)), inner product over prototypes.
Var assignment_loss(Tape& t, Var aligned_s, Var aligned_t, double log_floor);
double assignment_loss(const Matrix& aligned_s, const Matrix& aligned_t, double log_floor);

// Patch-by-patch cosine correlation; the two-argument form is the
// cross-sample variant.
Matrix correlation_matrix(const Matrix& x);
Matrix correlation_matrix(const Matrix& x, const Matrix& y);

enum class ShiftMode { kIntra, kInter };

// intra: |mean(F) - mean(A) - k_shift|; inter: (mean(F) + mean(A) - k_shift) * v_shift.
double adaptive_shift(const Matrix& feature_corr, const Matrix& assign_corr, const AlignmentConfig& cfg,
                      ShiftMode mode);

// -mean((feature_corr - shift) * cos(assign_a rows, assign_b rows)).
// feature_corr and shift are constants.
Var correspondence_loss(Tape& t, const Matrix& feature_corr, Var assign_a, Var assign_b, double shift);
double correspondence_loss(const Matrix& feature_corr, const Matrix& assign_corr, double shift);

// Shift for a pair of samples, computed from current (detached) assignments.
double pair_shift(const Matrix& feature_corr, const Matrix& assign_a, const Matrix& assign_b,
                  const AlignmentConfig& cfg, ShiftMode mode);

// Rows scaled to unit length; kZeroNormRow below kNormEpsilon.
Matrix normalized_rows(const Matrix& x, std::string_view what);

// Mean entry of unit_x * unit_y^T, computed from the row sums.
double mean_cosine(const Matrix& unit_x, const Matrix& unit_y);

// Same value as correspondence_loss(cosine_rows(x, y), a, b, shift) given
// unit rows of x, y, a and b, without forming the patch-by-patch matrices.
// Pair with ops::unit_rows to differentiate through the normalization.
Var correspondence_loss_factored(Tape& t, const Matrix& unit_x, const Matrix& unit_y, Var unit_a, Var unit_b,
                                 double shift);
double pair_shift_factored(const Matrix& unit_x, const Matrix& unit_y, const Matrix& unit_a, const Matrix& unit_b,
                           const AlignmentConfig& cfg, ShiftMode mode);

// Intra term plus the mean over partners of the inter term; shifts adapt to
// the current assignments. kBatchTooSmall without partners.
double alignment_loss(const Matrix& features, const Matrix& assignments, std::span<const Matrix> partner_features,
                      std::span<const Matrix> partner_assignments, const AlignmentConfig& cfg);

// Slot InfoNCE over prototypes dominant in both branches; denominators run over
// teacher-dominant prototypes. Rows are l2-normalized. Zero when none is valid.
Var contrastive_loss(Tape& t, Var slots_s, Var proj_t, const std::vector<std::uint8_t>& dominant_s,
                     const std::vector<std::uint8_t>& dominant_t, double tau);
double contrastive_loss(const Matrix& slots_s, const Matrix& proj_t, const std::vector<std::uint8_t>& dominant_s,
                        const std::vector<std::uint8_t>& dominant_t, double tau);

// Hoyer-square penalty alpha * |R|_1^2 / |R|_2^2 + gamma * |R|_2; zero when |R|_2 < 1e-12.
Var sparsity_loss(Tape& t, Var importance, double alpha, double gamma);
double sparsity_loss(const Matrix& importance, double alpha, double gamma);

// Softmax cross-entropy of a 1 x D logit row.
Var cross_entropy(Tape& t, Var logits, std::uint32_t label);
// Mean of the student and teacher cross-entropies.
Var classification_loss(Tape& t, Var logits_s, Var logits_t, std::uint32_t label);
double classification_loss(const Vector& logits_s, const Vector& logits_t, std::uint32_t label);

struct LossTerms {
  double assignment = 0.0;
  double alignment = 0.0;
  double contrastive = 0.0;
  double sparsity = 0.0;
  double classification = 0.0;
};

struct LossReport {
  LossTerms terms;
  double total = 0.0;
};

// Weighted sum with the lambda weights; kNonFiniteTerm on NaN/Inf terms.
LossReport total_loss(const LossTerms& terms, const LossWeights& w);

}  // namespace protohead
