#include "protohead/tape.hpp"

#include <cmath>

#include "protohead/errors.hpp"

namespace protohead {

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, {}});
  return Var{nodes_.size() - 1};
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, true, false, {}});
  return Var{nodes_.size() - 1};
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
}

Var Tape::record(Matrix value, std::span<const Var> parents, BackwardFn fn) {
  bool needs = false;
  for (Var p : parents) needs = needs || nodes_[p.id].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, needs, false, needs ? std::move(fn) : BackwardFn{}});
  return Var{nodes_.size() - 1};
}

Matrix* Tape::grad_target(Var v) {
  Node& n = nodes_[v.id];
  if (!n.requires_grad) return nullptr;
  if (!n.has_grad) {
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return &n.grad;
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var output) {
  Node& out = nodes_[output.id];
  if (out.value.size() != 1) fail(ErrorCode::kShapeMismatch, "backward() needs a 1x1 output");
  if (!std::isfinite(out.value(0, 0))) fail(ErrorCode::kNonFiniteLoss, "loss is not finite");
  if (!out.requires_grad) return;
  *grad_target(output) = Matrix::Constant(1, 1, 1.0);
  for (std::size_t i = output.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.value, n.grad);
  }
}

Var Tape::detach(Var x) {
  const std::size_t k = detach_calls_++;
  Var out;
  if (k < pinned_.size()) {
    if (pinned_[k].rows() != value(x).rows() || pinned_[k].cols() != value(x).cols()) {
      fail(ErrorCode::kShapeMismatch, "pinned stop-gradient value has the wrong shape");
    }
    out = constant(pinned_[k]);
  } else {
    out = constant(value(x));
  }
  if (track_detached_) detached_.push_back(value(out));
  return out;
}

namespace ops {
namespace {

// Gradient of x -> x / |x| per row, given the normalized rows and norms.
Matrix normalize_rows_backward(const Matrix& unit, const Vector& norms, const Matrix& g) {
  Vector dots = (g.array() * unit.array()).rowwise().sum();
  Matrix out = g - (unit.array().colwise() * dots.array()).matrix();
  out.array().colwise() /= norms.array();
  return out;
}

}  // namespace

Var detach(Tape& t, Var x) { return t.detach(x); }

Var matmul_bt(Tape& t, Var x, Var w) {
  const Matrix& xv = t.value(x);
  const Matrix& wv = t.value(w);
  if (xv.cols() != wv.cols()) fail(ErrorCode::kShapeMismatch, "matmul_bt inner dimensions differ");
  Matrix out = xv * wv.transpose();
  return t.record(std::move(out), {x, w}, [x, w](Tape& tp, const Matrix&, const Matrix& g) {
    if (Matrix* gx = tp.grad_target(x)) gx->noalias() += g * tp.value(w);
    if (Matrix* gw = tp.grad_target(w)) gw->noalias() += g.transpose() * tp.value(x);
  });
}

Var add_row(Tape& t, Var x, Var bias) {
  const Matrix& xv = t.value(x);
  const Matrix& bv = t.value(bias);
  if (bv.rows() != 1 || bv.cols() != xv.cols()) fail(ErrorCode::kShapeMismatch, "add_row bias shape");
  Matrix out = xv.rowwise() + bv.row(0);
  return t.record(std::move(out), {x, bias}, [x, bias](Tape& tp, const Matrix&, const Matrix& g) {
    if (Matrix* gx = tp.grad_target(x)) *gx += g;
    if (Matrix* gb = tp.grad_target(bias)) *gb += g.colwise().sum();
  });
}

Var relu(Tape& t, Var x) {
  Matrix out = t.value(x).cwiseMax(0.0);
  return t.record(std::move(out), {x}, [x](Tape& tp, const Matrix&, const Matrix& g) {
    if (Matrix* gx = tp.grad_target(x)) {
      *gx += (tp.value(x).array() > 0.0).select(g, 0.0).matrix();
    }
  });
}

Var cosine_rows(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.cols() != bv.cols() || av.cols() < 1) fail(ErrorCode::kShapeMismatch, "cosine_rows column counts");
  const Vector na = checked_row_norms(av, "cosine_rows lhs");
  const Vector nb = checked_row_norms(bv, "cosine_rows rhs");
  Matrix ua = av;
  ua.array().colwise() /= na.array();
  Matrix ub = bv;
  ub.array().colwise() /= nb.array();
  Matrix out = (ua * ub.transpose()).cwiseMax(-1.0).cwiseMin(1.0);
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix&, const Matrix& g) {
    const Matrix& av2 = tp.value(a);
    const Matrix& bv2 = tp.value(b);
    const Vector na2 = av2.rowwise().norm();
    const Vector nb2 = bv2.rowwise().norm();
    Matrix ua2 = av2;
    ua2.array().colwise() /= na2.array();
    Matrix ub2 = bv2;
    ub2.array().colwise() /= nb2.array();
    if (Matrix* ga = tp.grad_target(a)) *ga += normalize_rows_backward(ua2, na2, g * ub2);
    if (Matrix* gb = tp.grad_target(b)) *gb += normalize_rows_backward(ub2, nb2, g.transpose() * ua2);
  });
}

Var unit_rows(Tape& t, Var x) {
  const Vector norms = checked_row_norms(t.value(x), "unit_rows");
  Matrix out = t.value(x);
  out.array().colwise() /= norms.array();
  return t.record(std::move(out), {x}, [x, norms](Tape& tp, const Matrix& unit, const Matrix& g) {
    if (Matrix* gx = tp.grad_target(x)) *gx += normalize_rows_backward(unit, norms, g);
  });
}

Var softmax_rows(Tape& t, Var m, double tau) {
  Matrix out = protohead::softmax_rows(t.value(m), tau);
  return t.record(std::move(out), {m}, [m, tau](Tape& tp, const Matrix& a, const Matrix& g) {
    if (Matrix* gm = tp.grad_target(m)) {
      Vector dots = (g.array() * a.array()).rowwise().sum();
      Matrix centered = g.array().colwise() - dots.array();
      *gm += (a.array() * centered.array() / tau).matrix();
    }
  });
}

Var apply_map(Tape& t, const SparseMap& map, Var x) {
  if (map.cols() != t.value(x).rows()) fail(ErrorCode::kShapeMismatch, "apply_map input rows");
  Matrix out = map * t.value(x);
  return t.record(std::move(out), {x}, [x, map](Tape& tp, const Matrix&, const Matrix& g) {
    if (Matrix* gx = tp.grad_target(x)) *gx += map.transpose() * g;
  });
}

Var topk_mean_cols(Tape& t, Var m, std::size_t k) {
  const Matrix& mv = t.value(m);
  const auto rows = static_cast<std::size_t>(mv.rows());
  std::vector<std::size_t> picks;
  picks.reserve(k * static_cast<std::size_t>(mv.cols()));
  Matrix out(1, mv.cols());
  std::vector<double> column(rows);
  for (Eigen::Index n = 0; n < mv.cols(); ++n) {
    for (std::size_t i = 0; i < rows; ++i) column[i] = mv(static_cast<Eigen::Index>(i), n);
    double sum = 0.0;
    for (std::size_t i : topk_indices(column, k)) {
      picks.push_back(i);
      sum += column[i];
    }
    out(0, n) = sum / static_cast<double>(k);
  }
  return t.record(std::move(out), {m}, [m, k, picks = std::move(picks)](Tape& tp, const Matrix&, const Matrix& g) {
    Matrix* gm = tp.grad_target(m);
    if (!gm) return;
    const double inv_k = 1.0 / static_cast<double>(k);
    for (Eigen::Index n = 0; n < g.cols(); ++n) {
      for (std::size_t j = 0; j < k; ++j) {
        (*gm)(static_cast<Eigen::Index>(picks[static_cast<std::size_t>(n) * k + j]), n) += g(0, n) * inv_k;
      }
    }
  });
}

Var scale_cols(Tape& t, Var w, Var h) {
  const Matrix& wv = t.value(w);
  const Matrix& hv = t.value(h);
  if (hv.rows() != 1 || hv.cols() != wv.cols()) fail(ErrorCode::kShapeMismatch, "scale_cols shapes");
  Matrix out = wv.array().rowwise() * hv.row(0).array();
  return t.record(std::move(out), {w, h}, [w, h](Tape& tp, const Matrix&, const Matrix& g) {
    if (Matrix* gw = tp.grad_target(w)) *gw += (g.array().rowwise() * tp.value(h).row(0).array()).matrix();
    if (Matrix* gh = tp.grad_target(h)) *gh += (g.array() * tp.value(w).array()).colwise().sum().matrix();
  });
}

Var row_sums(Tape& t, Var r) {
  Matrix out = t.value(r).rowwise().sum().transpose();
  return t.record(std::move(out), {r}, [r](Tape& tp, const Matrix&, const Matrix& g) {
    if (Matrix* gr = tp.grad_target(r)) gr->colwise() += g.row(0).transpose();
  });
}

Var weighted_slots(Tape& t, Var a, Var z) {
  const Matrix& av = t.value(a);
  const Matrix& zv = t.value(z);
  if (av.rows() != zv.rows()) fail(ErrorCode::kShapeMismatch, "weighted_slots row counts");
  const Vector mass = av.colwise().sum().transpose();
  Matrix out = av.transpose() * zv;
  for (Eigen::Index n = 0; n < out.rows(); ++n) {
    if (mass[n] < kNormEpsilon) {
      out.row(n).setZero();
    } else {
      out.row(n) /= mass[n];
    }
  }
  return t.record(std::move(out), {a, z}, [a, z](Tape& tp, const Matrix& s, const Matrix& g) {
    const Matrix& av2 = tp.value(a);
    const Vector mass2 = av2.colwise().sum().transpose();
    Matrix gu = g;  // gradient w.r.t. the unnormalized sum A^T Z
    for (Eigen::Index n = 0; n < gu.rows(); ++n) {
      gu.row(n) = mass2[n] < kNormEpsilon ? Eigen::RowVectorXd::Zero(gu.cols()) : Eigen::RowVectorXd(gu.row(n) / mass2[n]);
    }
    if (Matrix* gz = tp.grad_target(z)) gz->noalias() += av2 * gu;
    if (Matrix* ga = tp.grad_target(a)) {
      Matrix contrib = tp.value(z) * gu.transpose();
      for (Eigen::Index n = 0; n < gu.rows(); ++n) {
        if (mass2[n] < kNormEpsilon) continue;
        const double shift = g.row(n).dot(s.row(n)) / mass2[n];
        contrib.col(n).array() -= shift;
      }
      *ga += contrib;
    }
  });
}

Var weighted_sum(Tape& t, std::span<const Var> scalars, std::span<const double> weights) {
  if (scalars.size() != weights.size()) fail(ErrorCode::kShapeMismatch, "weighted_sum arity");
  double total = 0.0;
  for (std::size_t j = 0; j < scalars.size(); ++j) {
    const Matrix& v = t.value(scalars[j]);
    if (v.size() != 1) fail(ErrorCode::kShapeMismatch, "weighted_sum takes 1x1 nodes");
    total += weights[j] * v(0, 0);
  }
  std::vector<Var> vars(scalars.begin(), scalars.end());
  std::vector<double> ws(weights.begin(), weights.end());
  return t.record(Matrix::Constant(1, 1, total), std::span<const Var>(vars),
                  [vars, ws](Tape& tp, const Matrix&, const Matrix& g) {
                    for (std::size_t j = 0; j < vars.size(); ++j) {
                      if (Matrix* gv = tp.grad_target(vars[j])) (*gv)(0, 0) += ws[j] * g(0, 0);
                    }
                  });
}

}  // namespace ops
}  // namespace protohead
