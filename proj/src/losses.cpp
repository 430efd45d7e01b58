#include "protohead/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "protohead/errors.hpp"

namespace protohead {
namespace {

struct UnitRows {
  Matrix unit;
  Vector norms;  // clamped below at kNormEpsilon
};

UnitRows unit_rows(const Matrix& x) {
  UnitRows r{x, x.rowwise().norm()};
  r.norms = r.norms.cwiseMax(kNormEpsilon);
  r.unit.array().colwise() /= r.norms.array();
  return r;
}

Matrix unit_rows_backward(const UnitRows& r, const Matrix& g) {
  Vector dots = (g.array() * r.unit.array()).rowwise().sum();
  Matrix out = g - (r.unit.array().colwise() * dots.array()).matrix();
  out.array().colwise() /= r.norms.array();
  return out;
}

double scalar(const Tape& t, Var v) { return t.value(v)(0, 0); }

double mean(const Matrix& m) { return m.size() == 0 ? 0.0 : m.mean(); }

}  // namespace

Var assignment_loss(Tape& t, Var aligned_s, Var aligned_t, double log_floor) {
  const Matrix& as = t.value(aligned_s);
  const Matrix& at = t.value(aligned_t);
  if (as.rows() != at.rows() || as.cols() != at.cols()) fail(ErrorCode::kShapeMismatch, "assignment_loss shapes differ");
  const Vector inner = (as.array() * at.array()).rowwise().sum();
  const double rows = static_cast<double>(as.rows());
  double loss = 0.0;
  for (Eigen::Index g = 0; g < inner.size(); ++g) loss -= std::log(std::max(log_floor, inner[g]));
  loss /= rows;
  return t.record(Matrix::Constant(1, 1, loss), {aligned_s, aligned_t},
                  [aligned_s, aligned_t, inner, log_floor, rows](Tape& tp, const Matrix&, const Matrix& g) {
                    Vector coef(inner.size());
                    for (Eigen::Index r = 0; r < inner.size(); ++r) {
                      coef[r] = inner[r] > log_floor ? -g(0, 0) / (rows * inner[r]) : 0.0;
                    }
                    if (Matrix* gs = tp.grad_target(aligned_s)) {
                      *gs += (tp.value(aligned_t).array().colwise() * coef.array()).matrix();
                    }
                    if (Matrix* gt = tp.grad_target(aligned_t)) {
                      *gt += (tp.value(aligned_s).array().colwise() * coef.array()).matrix();
                    }
                  });
}

double assignment_loss(const Matrix& aligned_s, const Matrix& aligned_t, double log_floor) {
  Tape t;
  return scalar(t, assignment_loss(t, t.constant(aligned_s), t.constant(aligned_t), log_floor));
}

Matrix correlation_matrix(const Matrix& x) { return cosine_rows(x, x); }

Matrix correlation_matrix(const Matrix& x, const Matrix& y) { return cosine_rows(x, y); }

double adaptive_shift(const Matrix& feature_corr, const Matrix& assign_corr, const AlignmentConfig& cfg,
                      ShiftMode mode) {
  if (feature_corr.rows() != assign_corr.rows() || feature_corr.cols() != assign_corr.cols()) {
    fail(ErrorCode::kShapeMismatch, "adaptive_shift needs equally shaped correlations");
  }
  const double f = mean(feature_corr);
  const double a = mean(assign_corr);
  if (mode == ShiftMode::kIntra) return std::abs(f - a - cfg.k_shift);
  return (f + a - cfg.k_shift) * cfg.v_shift;
}

Var correspondence_loss(Tape& t, const Matrix& feature_corr, Var assign_a, Var assign_b, double shift) {
  const Matrix& a = t.value(assign_a);
  const Matrix& b = t.value(assign_b);
  if (feature_corr.rows() != a.rows() || feature_corr.cols() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorCode::kShapeMismatch, "correspondence_loss shapes differ");
  }
  checked_row_norms(a, "assignment rows");
  checked_row_norms(b, "assignment rows");
  Matrix centered = feature_corr.array() - shift;
  const double count = static_cast<double>(centered.size());
  const UnitRows ua = unit_rows(a);
  const UnitRows ub = unit_rows(b);
  const double loss = -(centered.array() * (ua.unit * ub.unit.transpose()).array()).sum() / count;
  return t.record(Matrix::Constant(1, 1, loss), {assign_a, assign_b},
                  [assign_a, assign_b, centered = std::move(centered), count](Tape& tp, const Matrix&,
                                                                               const Matrix& g) {
                    const UnitRows ra = unit_rows(tp.value(assign_a));
                    const UnitRows rb = unit_rows(tp.value(assign_b));
                    const Matrix dc = centered * (-g(0, 0) / count);
                    if (Matrix* ga = tp.grad_target(assign_a)) *ga += unit_rows_backward(ra, dc * rb.unit);
                    if (Matrix* gb = tp.grad_target(assign_b)) {
                      *gb += unit_rows_backward(rb, dc.transpose() * ra.unit);
                    }
                  });
}

double correspondence_loss(const Matrix& feature_corr, const Matrix& assign_corr, double shift) {
  if (feature_corr.rows() != assign_corr.rows() || feature_corr.cols() != assign_corr.cols()) {
    fail(ErrorCode::kShapeMismatch, "correspondence_loss shapes differ");
  }
  return -((feature_corr.array() - shift) * assign_corr.array()).mean();
}

double pair_shift(const Matrix& feature_corr, const Matrix& assign_a, const Matrix& assign_b,
                  const AlignmentConfig& cfg, ShiftMode mode) {
  return adaptive_shift(feature_corr, cosine_rows(assign_a, assign_b), cfg, mode);
}

Matrix normalized_rows(const Matrix& x, std::string_view what) {
  const Vector norms = checked_row_norms(x, what);
  Matrix out = x;
  out.array().colwise() /= norms.array();
  return out;
}

double mean_cosine(const Matrix& unit_x, const Matrix& unit_y) {
  if (unit_x.rows() == 0 || unit_y.rows() == 0) return 0.0;
  const double total = unit_x.colwise().sum().dot(unit_y.colwise().sum());
  return total / (static_cast<double>(unit_x.rows()) * static_cast<double>(unit_y.rows()));
}

// sum_ij (x_i . y_j)(a_i . b_j) = <X^T A, Y^T B>, so nothing rows x rows is built.
Var correspondence_loss_factored(Tape& t, const Matrix& unit_x, const Matrix& unit_y, Var unit_a, Var unit_b,
                                 double shift) {
  const Matrix& a = t.value(unit_a);
  const Matrix& b = t.value(unit_b);
  if (unit_x.rows() != a.rows() || unit_y.rows() != b.rows() || a.cols() != b.cols() ||
      unit_x.cols() != unit_y.cols()) {
    fail(ErrorCode::kShapeMismatch, "correspondence_loss shapes differ");
  }
  Matrix xa = unit_x.transpose() * a;
  Matrix yb = unit_y.transpose() * b;
  Eigen::RowVectorXd sa = a.colwise().sum();
  Eigen::RowVectorXd sb = b.colwise().sum();
  const double count = static_cast<double>(a.rows()) * static_cast<double>(b.rows());
  const double loss = -((xa.array() * yb.array()).sum() - shift * sa.dot(sb)) / count;
  return t.record(Matrix::Constant(1, 1, loss), {unit_a, unit_b},
                  [unit_a, unit_b, ux = unit_x, uy = unit_y, xa = std::move(xa), yb = std::move(yb),
                   sa = std::move(sa), sb = std::move(sb), shift, count](Tape& tp, const Matrix&, const Matrix& g) {
                    const double scale = -g(0, 0) / count;
                    if (Matrix* ga = tp.grad_target(unit_a)) {
                      Matrix d = ux * yb;
                      d.rowwise() -= shift * sb;
                      *ga += scale * d;
                    }
                    if (Matrix* gb = tp.grad_target(unit_b)) {
                      Matrix d = uy * xa;
                      d.rowwise() -= shift * sa;
                      *gb += scale * d;
                    }
                  });
}

double pair_shift_factored(const Matrix& unit_x, const Matrix& unit_y, const Matrix& unit_a, const Matrix& unit_b,
                           const AlignmentConfig& cfg, ShiftMode mode) {
  const double f = mean_cosine(unit_x, unit_y);
  const double a = mean_cosine(unit_a, unit_b);
  if (mode == ShiftMode::kIntra) return std::abs(f - a - cfg.k_shift);
  return (f + a - cfg.k_shift) * cfg.v_shift;
}

double alignment_loss(const Matrix& features, const Matrix& assignments, std::span<const Matrix> partner_features,
                      std::span<const Matrix> partner_assignments, const AlignmentConfig& cfg) {
  if (partner_features.empty()) fail(ErrorCode::kBatchTooSmall, "alignment loss needs at least one in-batch partner");
  if (partner_features.size() != partner_assignments.size()) fail(ErrorCode::kShapeMismatch, "partner lists differ in length");
  const Matrix intra_f = correlation_matrix(features);
  const Matrix intra_a = correlation_matrix(assignments);
  double loss = correspondence_loss(intra_f, intra_a, adaptive_shift(intra_f, intra_a, cfg, ShiftMode::kIntra));
  double inter = 0.0;
  for (std::size_t j = 0; j < partner_features.size(); ++j) {
    const Matrix f = correlation_matrix(features, partner_features[j]);
    const Matrix a = correlation_matrix(assignments, partner_assignments[j]);
    inter += correspondence_loss(f, a, adaptive_shift(f, a, cfg, ShiftMode::kInter));
  }
  return loss + inter / static_cast<double>(partner_features.size());
}

Var contrastive_loss(Tape& t, Var slots_s, Var proj_t, const std::vector<std::uint8_t>& dominant_s,
                     const std::vector<std::uint8_t>& dominant_t, double tau) {
  if (!(tau > 0.0)) fail(ErrorCode::kNonPositiveTemperature, "contrastive temperature must be > 0");
  const Matrix& s = t.value(slots_s);
  const Matrix& q = t.value(proj_t);
  const auto n_protos = static_cast<std::size_t>(s.rows());
  if (q.rows() != s.rows() || q.cols() != s.cols() || dominant_s.size() != n_protos || dominant_t.size() != n_protos) {
    fail(ErrorCode::kShapeMismatch, "contrastive_loss shapes differ");
  }
  std::vector<Eigen::Index> valid, negatives;
  for (std::size_t n = 0; n < n_protos; ++n) {
    if (dominant_t[n]) negatives.push_back(static_cast<Eigen::Index>(n));
    if (dominant_s[n] && dominant_t[n]) valid.push_back(static_cast<Eigen::Index>(n));
  }
  if (valid.empty()) return t.constant(Matrix::Zero(1, 1));

  const UnitRows us = unit_rows(s);
  const UnitRows uq = unit_rows(q);
  // probs(v, j): softmax over teacher-dominant prototypes j for valid prototype v.
  Matrix probs(static_cast<Eigen::Index>(valid.size()), static_cast<Eigen::Index>(negatives.size()));
  double loss = 0.0;
  for (std::size_t v = 0; v < valid.size(); ++v) {
    const Eigen::Index n = valid[v];
    double top = -std::numeric_limits<double>::infinity();
    double own = 0.0;
    for (std::size_t j = 0; j < negatives.size(); ++j) {
      const double logit = uq.unit.row(negatives[j]).dot(us.unit.row(n)) / tau;
      probs(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(j)) = logit;
      top = std::max(top, logit);
      if (negatives[j] == n) own = logit;
    }
    auto row = probs.row(static_cast<Eigen::Index>(v));
    row = (row.array() - top).exp();
    const double z = row.sum();
    row /= z;
    loss += -(own - top - std::log(z));
  }
  const double count = static_cast<double>(valid.size());
  loss /= count;

  return t.record(Matrix::Constant(1, 1, loss), {slots_s, proj_t},
                  [slots_s, proj_t, valid, negatives, probs, tau, count](Tape& tp, const Matrix&, const Matrix& g) {
                    const UnitRows rs = unit_rows(tp.value(slots_s));
                    const UnitRows rq = unit_rows(tp.value(proj_t));
                    Matrix gs = Matrix::Zero(rs.unit.rows(), rs.unit.cols());
                    Matrix gq = Matrix::Zero(rq.unit.rows(), rq.unit.cols());
                    const double scale = g(0, 0) / (count * tau);
                    for (std::size_t v = 0; v < valid.size(); ++v) {
                      const Eigen::Index n = valid[v];
                      for (std::size_t j = 0; j < negatives.size(); ++j) {
                        const Eigen::Index m = negatives[j];
                        double coef = probs(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(j));
                        if (m == n) coef -= 1.0;
                        coef *= scale;
                        gs.row(n) += coef * rq.unit.row(m);
                        gq.row(m) += coef * rs.unit.row(n);
                      }
                    }
                    if (Matrix* out = tp.grad_target(slots_s)) *out += unit_rows_backward(rs, gs);
                    if (Matrix* out = tp.grad_target(proj_t)) *out += unit_rows_backward(rq, gq);
                  });
}

double contrastive_loss(const Matrix& slots_s, const Matrix& proj_t, const std::vector<std::uint8_t>& dominant_s,
                        const std::vector<std::uint8_t>& dominant_t, double tau) {
  Tape t;
  return scalar(t, contrastive_loss(t, t.constant(slots_s), t.constant(proj_t), dominant_s, dominant_t, tau));
}

Var sparsity_loss(Tape& t, Var importance, double alpha, double gamma) {
  const Matrix& r = t.value(importance);
  const double l1 = r.cwiseAbs().sum();
  const double l2sq = r.squaredNorm();
  const double l2 = std::sqrt(l2sq);
  if (l2 < kNormEpsilon) return t.constant(Matrix::Zero(1, 1));
  const double loss = alpha * l1 * l1 / l2sq + gamma * l2;
  return t.record(Matrix::Constant(1, 1, loss), {importance},
                  [importance, alpha, gamma, l1, l2sq, l2](Tape& tp, const Matrix&, const Matrix& g) {
                    Matrix* gr = tp.grad_target(importance);
                    if (!gr) return;
                    const Matrix& rv = tp.value(importance);
                    const Matrix sign = rv.array().sign().matrix();
                    *gr += g(0, 0) * (alpha * (2.0 * l1 / l2sq * sign - 2.0 * l1 * l1 / (l2sq * l2sq) * rv) +
                                      gamma / l2 * rv);
                  });
}

double sparsity_loss(const Matrix& importance, double alpha, double gamma) {
  Tape t;
  return scalar(t, sparsity_loss(t, t.constant(importance), alpha, gamma));
}

Var cross_entropy(Tape& t, Var logits, std::uint32_t label) {
  const Matrix& y = t.value(logits);
  if (y.rows() != 1) fail(ErrorCode::kShapeMismatch, "cross_entropy takes a logit row");
  if (label >= y.cols()) fail(ErrorCode::kLabelOutOfRange, "label " + std::to_string(label) + " out of range");
  const double top = y.maxCoeff();
  Matrix probs = (y.array() - top).exp();
  const double z = probs.sum();
  probs /= z;
  const double loss = top + std::log(z) - y(0, label);
  return t.record(Matrix::Constant(1, 1, loss), {logits}, [logits, label, probs](Tape& tp, const Matrix&, const Matrix& g) {
    if (Matrix* gy = tp.grad_target(logits)) {
      Matrix d = probs;
      d(0, label) -= 1.0;
      *gy += g(0, 0) * d;
    }
  });
}

Var classification_loss(Tape& t, Var logits_s, Var logits_t, std::uint32_t label) {
  const Var terms[] = {cross_entropy(t, logits_s, label), cross_entropy(t, logits_t, label)};
  const double weights[] = {0.5, 0.5};
  return ops::weighted_sum(t, terms, weights);
}

double classification_loss(const Vector& logits_s, const Vector& logits_t, std::uint32_t label) {
  Tape t;
  return scalar(t, classification_loss(t, t.constant(logits_s.transpose()), t.constant(logits_t.transpose()), label));
}

LossReport total_loss(const LossTerms& terms, const LossWeights& w) {
  const double values[] = {terms.assignment, terms.alignment, terms.contrastive, terms.sparsity, terms.classification};
  for (double v : values) {
    if (!std::isfinite(v)) fail(ErrorCode::kNonFiniteTerm, "loss term is not finite");
  }
  LossReport r;
  r.terms = terms;
  r.total = w.assignment * terms.assignment + w.alignment * terms.alignment + w.contrastive * terms.contrastive +
            w.sparsity * terms.sparsity + w.classification * terms.classification;
  return r;
}

}  // namespace protohead
