#include <cmath>

#include "protohead/gradcheck.hpp"
#include "protohead/losses.hpp"
#include "test_util.hpp"

using namespace protohead;

namespace {

Matrix one_hot_rows(std::initializer_list<int> cols, int n) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(cols.size()), n);
  Eigen::Index r = 0;
  for (int c : cols) m(r++, c) = 1.0;
  return m;
}

Matrix row_softmax(const Matrix& m) { return softmax_rows(m, 1.0); }

// Gradient check of a unary tape loss.
double check_unary(const std::function<Var(Tape&, Var)>& loss, const Matrix& x, std::uint64_t seed = 1) {
  LossFunction fn = [&](std::span<const Matrix> p, std::vector<Matrix>* g) {
    Tape t;
    Var v = t.variable(p[0]);
    Var out = loss(t, v);
    if (g) {
      t.backward(out);
      *g = {t.grad(v)};
    }
    return t.value(out)(0, 0);
  };
  return grad_check(fn, {x}, 1e-5, 200, seed).max_relative_error;
}

}  // namespace

TEST(AssignmentLoss, AgreeingOneHots) {
  const Matrix a = one_hot_rows({0, 2, 1}, 3);
  EXPECT_DOUBLE_EQ(assignment_loss(a, a, 1e-8), 0.0);
}

TEST(AssignmentLoss, UniformGivesLogN) {
  const Matrix u = Matrix::Constant(5, 4, 0.25);
  EXPECT_NEAR(assignment_loss(u, u, 1e-8), std::log(4.0), 1e-14);
}

TEST(AssignmentLoss, DisjointHitsFloor) {
  EXPECT_NEAR(assignment_loss(one_hot_rows({0, 1}, 3), one_hot_rows({1, 2}, 3), 1e-8), -std::log(1e-8), 1e-12);
  EXPECT_NEAR(-std::log(1e-8), 18.42, 0.01);
}

TEST(AssignmentLoss, Symmetric) {
  const Matrix a = row_softmax(testutil::random_matrix(6, 4, 1));
  const Matrix b = row_softmax(testutil::random_matrix(6, 4, 2));
  EXPECT_DOUBLE_EQ(assignment_loss(a, b, 1e-8), assignment_loss(b, a, 1e-8));
}

TEST(AssignmentLoss, ShapeMismatch) {
  EXPECT_ERROR_CODE(assignment_loss(Matrix::Ones(2, 3), Matrix::Ones(3, 3), 1e-8), ErrorCode::kShapeMismatch);
}

TEST(AssignmentLoss, Gradient) {
  const Matrix other = row_softmax(testutil::random_matrix(6, 4, 2));
  auto loss = [&](Tape& t, Var a) { return assignment_loss(t, ops::softmax_rows(t, a, 1.0), t.constant(other), 1e-8); };
  EXPECT_LE(check_unary(loss, testutil::random_matrix(6, 4, 1)), 1e-5);
}

TEST(Correlation, DiagonalSymmetric) {
  const Matrix c = correlation_matrix(testutil::random_matrix(7, 5, 1));
  for (int i = 0; i < 7; ++i) EXPECT_NEAR(c(i, i), 1.0, 1e-12);
  EXPECT_LE((c - c.transpose()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Correlation, OrthogonalRows) {
  const Matrix c = correlation_matrix(Matrix::Identity(4, 4) * 3.0);
  EXPECT_LE((c - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Correlation, ZeroRow) {
  Matrix x = testutil::random_matrix(3, 3, 1);
  x.row(1).setZero();
  EXPECT_ERROR_CODE(correlation_matrix(x), ErrorCode::kZeroNormRow);
}

TEST(AdaptiveShift, Substitution) {
  const AlignmentConfig cfg;
  EXPECT_NEAR(adaptive_shift(Matrix::Constant(2, 2, 0.5), Matrix::Constant(2, 2, 0.3), cfg, ShiftMode::kIntra), 0.1,
              1e-15);
  EXPECT_NEAR(adaptive_shift(Matrix::Constant(2, 2, 0.2), Matrix::Constant(2, 2, 0.3), cfg, ShiftMode::kInter), 1.2,
              1e-15);
  EXPECT_NEAR(adaptive_shift(Matrix::Constant(2, 2, 0.4), Matrix::Constant(2, 2, 0.3), cfg, ShiftMode::kIntra), 0.0,
              1e-15);
}

TEST(AdaptiveShift, UsesEntrywiseMeans) {
  Matrix f(2, 2);
  f << 1.0, 0.0, 0.0, 1.0;  // mean 0.5
  Matrix a(2, 2);
  a << 0.6, 0.0, 0.0, 0.6;  // mean 0.3
  EXPECT_NEAR(adaptive_shift(f, a, AlignmentConfig{}, ShiftMode::kIntra), 0.1, 1e-15);
}

TEST(Correspondence, AllOnesNoShift) {
  EXPECT_DOUBLE_EQ(correspondence_loss(Matrix::Ones(3, 3), Matrix::Ones(3, 3), 0.0), -1.0);
}

TEST(Correspondence, ZeroAssignmentCorrelation) {
  EXPECT_DOUBLE_EQ(correspondence_loss(testutil::random_matrix(3, 3, 1), Matrix::Zero(3, 3), 0.4), 0.0);
}

TEST(Correspondence, TapeMatchesPlain) {
  const Matrix f = correlation_matrix(testutil::random_matrix(6, 4, 1));
  const Matrix a = testutil::random_matrix(6, 3, 2);
  const Matrix b = testutil::random_matrix(6, 3, 3);
  Tape t;
  Var v = correspondence_loss(t, f, t.constant(a), t.constant(b), 0.2);
  EXPECT_NEAR(t.value(v)(0, 0), correspondence_loss(f, cosine_rows(a, b), 0.2), 1e-14);
}

TEST(Correspondence, FactoredEqualsMatrixForm) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Matrix x = testutil::random_matrix(9, 5, s);
    const Matrix y = testutil::random_matrix(9, 5, s + 100);
    const Matrix a = row_softmax(testutil::random_matrix(9, 4, s + 200));
    const Matrix b = row_softmax(testutil::random_matrix(9, 4, s + 300));
    const Matrix fc = correlation_matrix(x, y);
    const double shift = 0.05 * static_cast<double>(s);
    const double direct = correspondence_loss(fc, cosine_rows(a, b), shift);

    Tape t;
    Var ua = ops::unit_rows(t, t.constant(a));
    Var ub = ops::unit_rows(t, t.constant(b));
    Var v = correspondence_loss_factored(t, normalized_rows(x, "x"), normalized_rows(y, "y"), ua, ub, shift);
    EXPECT_NEAR(t.value(v)(0, 0), direct, 1e-12);

    const AlignmentConfig cfg;
    for (ShiftMode mode : {ShiftMode::kIntra, ShiftMode::kInter}) {
      EXPECT_NEAR(pair_shift_factored(normalized_rows(x, "x"), normalized_rows(y, "y"), normalized_rows(a, "a"),
                                      normalized_rows(b, "b"), cfg, mode),
                  pair_shift(fc, a, b, cfg, mode), 1e-12);
    }
  }
}

TEST(Correspondence, FactoredGradientMatchesMatrixForm) {
  const Matrix x = testutil::random_matrix(7, 5, 1);
  const Matrix fc = correlation_matrix(x);
  const Matrix ux = normalized_rows(x, "x");
  const Matrix a0 = testutil::random_matrix(7, 4, 2);
  Tape t1;
  Var a1 = t1.variable(a0);
  t1.backward(correspondence_loss(t1, fc, a1, a1, 0.3));
  Tape t2;
  Var a2 = t2.variable(a0);
  Var u = ops::unit_rows(t2, a2);
  t2.backward(correspondence_loss_factored(t2, ux, ux, u, u, 0.3));
  EXPECT_LE((t1.grad(a1) - t2.grad(a2)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Correspondence, Gradient) {
  const Matrix f = correlation_matrix(testutil::random_matrix(6, 4, 1));
  const Matrix b = testutil::random_matrix(6, 3, 3);
  auto loss = [&](Tape& t, Var a) { return correspondence_loss(t, f, a, t.constant(b), 0.2); };
  EXPECT_LE(check_unary(loss, testutil::random_matrix(6, 3, 2)), 1e-5);
}

TEST(MeanCosine, MatchesMatrixMean) {
  const Matrix x = normalized_rows(testutil::random_matrix(8, 3, 1), "x");
  const Matrix y = normalized_rows(testutil::random_matrix(5, 3, 2), "y");
  EXPECT_NEAR(mean_cosine(x, y), (x * y.transpose()).mean(), 1e-14);
}

TEST(AlignmentLoss, CollapsePenalizedOnTwoClusters) {
  // Two orthogonal feature clusters. A matched assignment follows the clusters;
  // a collapsed one sends every patch to one prototype.
  Matrix f(6, 2);
  f << 1, 0, 1, 0, 1, 0, 0, 1, 0, 1, 0, 1;
  Matrix g(6, 2);
  g << 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1;
  Matrix matched = Matrix::Constant(6, 2, 0.02);
  matched.block(0, 0, 3, 1).setConstant(0.98);
  matched.block(3, 1, 3, 1).setConstant(0.98);
  Matrix collapsed = Matrix::Constant(6, 2, 0.02);
  collapsed.col(0).setConstant(0.98);
  Matrix matched_g = Matrix::Constant(6, 2, 0.02);
  for (int i = 0; i < 6; ++i) matched_g(i, i % 2) = 0.98;
  const Matrix pf[] = {g};
  const Matrix pm[] = {matched_g};
  const Matrix pc[] = {collapsed};
  const AlignmentConfig cfg;
  const double good = alignment_loss(f, matched, pf, pm, cfg);
  const double bad = alignment_loss(f, collapsed, pf, pc, cfg);
  EXPECT_LT(good, bad);
}

TEST(AlignmentLoss, NeedsPartner) {
  EXPECT_ERROR_CODE(alignment_loss(Matrix::Ones(2, 2), Matrix::Ones(2, 2), {}, {}, AlignmentConfig{}),
                    ErrorCode::kBatchTooSmall);
}

TEST(AlignmentLoss, BoundedBelow) {
  const AlignmentConfig cfg;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Matrix f = testutil::random_matrix(6, 4, s);
    const Matrix a = row_softmax(testutil::random_matrix(6, 3, s + 50));
    const Matrix pf[] = {testutil::random_matrix(6, 4, s + 100)};
    const Matrix pa[] = {row_softmax(testutil::random_matrix(6, 3, s + 150))};
    const double loss = alignment_loss(f, a, pf, pa, cfg);
    // |F - b| <= 1 + |b| with b bounded by the shift formulas.
    const Matrix fi = correlation_matrix(f), ai = correlation_matrix(a);
    const Matrix fx = correlation_matrix(f, pf[0]), ax = correlation_matrix(a, pa[0]);
    const double bi = adaptive_shift(fi, ai, cfg, ShiftMode::kIntra);
    const double bx = adaptive_shift(fx, ax, cfg, ShiftMode::kInter);
    const double bound = (fi.array() - bi).abs().maxCoeff() + (fx.array() - bx).abs().maxCoeff();
    EXPECT_GE(loss, -bound - 1e-12);
    EXPECT_TRUE(std::isfinite(loss));
  }
}

TEST(ContrastiveLoss, SingleValidPrototype) {
  const Matrix s = testutil::random_matrix(3, 4, 1);
  const Matrix q = testutil::random_matrix(3, 4, 2);
  EXPECT_NEAR(contrastive_loss(s, q, {1, 0, 0}, {1, 0, 0}, 0.1), 0.0, 1e-15);
}

TEST(ContrastiveLoss, TwoOrthonormal) {
  Matrix q = Matrix::Identity(2, 2);
  Matrix s(2, 2);
  s << 1, 0, 0.6, 0.8;
  // Prototype 0: -log(e / (e + 1)); prototype 1: s1 = (0.6, 0.8).
  const double l0 = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(l0, 0.3133, 1e-4);
  const double l1 = -std::log(std::exp(0.8) / (std::exp(0.6) + std::exp(0.8)));
  EXPECT_NEAR(contrastive_loss(s, q, {1, 1}, {1, 1}, 1.0), 0.5 * (l0 + l1), 1e-12);
  EXPECT_NEAR(contrastive_loss(s, q, {1, 0}, {1, 1}, 1.0), l0, 1e-12);
}

TEST(ContrastiveLoss, LoopOracle) {
  const Matrix s = testutil::random_matrix(6, 5, 3);
  const Matrix q = testutil::random_matrix(6, 5, 4);
  const std::vector<std::uint8_t> ds{1, 1, 0, 1, 1, 0}, dt{1, 0, 1, 1, 1, 1};
  const double tau = 0.3;
  double sum = 0;
  int valid = 0;
  for (int n = 0; n < 6; ++n) {
    if (!(ds[n] && dt[n])) continue;
    const Eigen::RowVectorXd sn = s.row(n).normalized();
    double denom = 0;
    for (int m = 0; m < 6; ++m) {
      if (dt[m]) denom += std::exp(q.row(m).normalized().dot(sn) / tau);
    }
    sum += -std::log(std::exp(q.row(n).normalized().dot(sn) / tau) / denom);
    ++valid;
  }
  EXPECT_NEAR(contrastive_loss(s, q, ds, dt, tau), sum / valid, 1e-10);
}

TEST(ContrastiveLoss, NoneValid) {
  EXPECT_EQ(contrastive_loss(Matrix::Ones(2, 2), Matrix::Ones(2, 2), {1, 0}, {0, 1}, 0.1), 0.0);
}

TEST(ContrastiveLoss, Gradient) {
  const Matrix q = testutil::random_matrix(5, 4, 4);
  const std::vector<std::uint8_t> ds{1, 1, 0, 1, 1}, dt{1, 0, 1, 1, 1};
  auto wrt_s = [&](Tape& t, Var s) { return contrastive_loss(t, s, t.constant(q), ds, dt, 0.2); };
  EXPECT_LE(check_unary(wrt_s, testutil::random_matrix(5, 4, 3)), 1e-5);
  const Matrix s = testutil::random_matrix(5, 4, 3);
  auto wrt_q = [&](Tape& t, Var qv) { return contrastive_loss(t, t.constant(s), qv, ds, dt, 0.2); };
  EXPECT_LE(check_unary(wrt_q, q), 1e-5);
}

TEST(SparsityLoss, OneNonzero) {
  Matrix r = Matrix::Zero(3, 4);
  r(1, 2) = 2.5;
  EXPECT_NEAR(sparsity_loss(r, 0.1, 0.1), 0.1 * 1 + 0.1 * 2.5, 1e-15);
}

TEST(SparsityLoss, EqualEntries) {
  Matrix r = Matrix::Zero(3, 4);
  r(0, 0) = r(1, 1) = r(2, 2) = r(0, 3) = 0.7;
  EXPECT_NEAR(sparsity_loss(r, 0.1, 0.2), 0.1 * 4 + 0.2 * 0.7 * 2.0, 1e-14);
}

TEST(SparsityLoss, ZeroGuard) { EXPECT_EQ(sparsity_loss(Matrix::Zero(2, 2), 0.1, 0.1), 0.0); }

TEST(SparsityLoss, Gradient) {
  auto loss = [](Tape& t, Var r) { return sparsity_loss(t, r, 0.1, 0.1); };
  EXPECT_LE(check_unary(loss, testutil::random_matrix(4, 6, 5, 0.11, 1.0)), 1e-5);
}

TEST(SparsityLoss, ZeroingSmallEntryHelps) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Matrix r = testutil::random_matrix(4, 6, s, 0.5, 1.0);
    r(1, 3) = 1e-3;
    const double before = sparsity_loss(r, 0.1, 0.1);
    r(1, 3) = 0.0;
    EXPECT_LT(sparsity_loss(r, 0.1, 0.1), before);
  }
}

TEST(ClassificationLoss, UniformLogits) {
  const Vector u = Vector::Constant(7, 0.3);
  EXPECT_NEAR(classification_loss(u, u, 2), std::log(7.0), 1e-14);
}

TEST(ClassificationLoss, LargeMargin) {
  Vector y = Vector::Zero(3);
  y(1) = 60.0;
  EXPECT_LT(classification_loss(y, y, 1), 1e-20);
}

TEST(ClassificationLoss, LogSumExpOracle) {
  const Vector a = testutil::random_matrix(5, 1, 1, -3, 3);
  const Vector b = testutil::random_matrix(5, 1, 2, -3, 3);
  auto ce = [](const Vector& y, int label) { return std::log(y.array().exp().sum()) - y(label); };
  EXPECT_NEAR(classification_loss(a, b, 3), 0.5 * (ce(a, 3) + ce(b, 3)), 1e-12);
}

TEST(ClassificationLoss, LabelOutOfRange) {
  EXPECT_ERROR_CODE(classification_loss(Vector::Zero(3), Vector::Zero(3), 3), ErrorCode::kLabelOutOfRange);
}

TEST(ClassificationLoss, Gradient) {
  auto loss = [](Tape& t, Var y) { return cross_entropy(t, y, 2); };
  EXPECT_LE(check_unary(loss, testutil::random_matrix(1, 5, 1)), 1e-6);
}

TEST(TotalLoss, Arithmetic) {
  const LossWeights w;
  EXPECT_EQ(total_loss(LossTerms{}, w).total, 0.0);
  const LossReport r = total_loss(LossTerms{1, 1, 1, 1, 1}, w);
  EXPECT_NEAR(r.total, 10.1, 1e-12);
  EXPECT_EQ(r.terms.sparsity, 1.0);
}

TEST(TotalLoss, ZeroWeightIgnoresTerm) {
  LossWeights w;
  w.alignment = 0.0;
  EXPECT_EQ(total_loss(LossTerms{1, 5, 1, 1, 1}, w).total, total_loss(LossTerms{1, -7, 1, 1, 1}, w).total);
}

TEST(TotalLoss, NonFiniteTerm) {
  EXPECT_ERROR_CODE(total_loss(LossTerms{1, std::nan(""), 1, 1, 1}, LossWeights{}), ErrorCode::kNonFiniteTerm);
}
