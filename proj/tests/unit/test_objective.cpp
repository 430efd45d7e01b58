#include <set>

#include "../support/objective_fixture.hpp"
#include "protohead/objective.hpp"
#include "test_util.hpp"

using namespace protohead;

TEST(Partners, DistinctAndNotSelf) {
  std::mt19937_64 rng(3);
  const auto p = draw_partners(6, 3, rng);
  ASSERT_EQ(p.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    ASSERT_EQ(p[i].size(), 3u);
    std::set<std::size_t> seen(p[i].begin(), p[i].end());
    EXPECT_EQ(seen.size(), 3u);
    EXPECT_FALSE(seen.count(i));
    for (auto j : p[i]) EXPECT_LT(j, 6u);
  }
}

TEST(Partners, CappedAtBatchMinusOne) {
  std::mt19937_64 rng(3);
  const auto p = draw_partners(3, 10, rng);
  for (const auto& row : p) EXPECT_EQ(row.size(), 2u);
}

TEST(Partners, Uniform) {
  std::mt19937_64 rng(5);
  std::vector<int> counts(5, 0);
  for (int trial = 0; trial < 4000; ++trial) counts[draw_partners(5, 1, rng)[0][0]]++;
  EXPECT_EQ(counts[0], 0);
  for (int j = 1; j < 5; ++j) EXPECT_NEAR(counts[j], 1000, 150);
}

TEST(Partners, BatchTooSmall) {
  std::mt19937_64 rng(1);
  EXPECT_ERROR_CODE(draw_partners(1, 1, rng), ErrorCode::kBatchTooSmall);
}

TEST(Objective, TotalIsWeightedSumOfTerms) {
  const auto s = fixture::small_objective(1);
  Tape t;
  const ParamVars vars = bind_params(t, s.params, true);
  const BatchObjective obj = build_objective(t, vars, s.batch, s.partners, s.cfg.head, s.cfg.loss, s.cfg.alignment);
  const auto& r = obj.report;
  const LossWeights& w = s.cfg.loss;
  const double expect = w.assignment * r.terms.assignment + w.alignment * r.terms.alignment +
                        w.contrastive * r.terms.contrastive + w.sparsity * r.terms.sparsity +
                        w.classification * r.terms.classification;
  EXPECT_NEAR(r.total, expect, 1e-12);
  EXPECT_NEAR(t.value(obj.total)(0, 0), r.total, 1e-12);
  EXPECT_GE(r.terms.assignment, 0.0);
  EXPECT_GE(r.terms.contrastive, 0.0);
  EXPECT_GE(r.terms.sparsity, 0.0);
  EXPECT_GE(r.terms.classification, 0.0);
}

TEST(Objective, MatchesPlainLossFunctions) {
  const auto s = fixture::small_objective(2);
  Tape t;
  const ParamVars vars = bind_params(t, s.params, true);
  const BatchObjective obj = build_objective(t, vars, s.batch, s.partners, s.cfg.head, s.cfg.loss, s.cfg.alignment);
  double as = 0, al = 0, ce = 0;
  for (std::size_t i = 0; i < s.batch.size(); ++i) {
    const ForwardOutputs o = forward(s.batch[i].views, s.params, s.cfg.head);
    as += assignment_loss(o.aligned_s, o.aligned_t, s.cfg.loss.log_floor);
    std::vector<Matrix> pf, pa;
    for (auto j : s.partners[i]) {
      pf.push_back(s.batch[j].views.second);
      pa.push_back(forward(s.batch[j].views, s.params, s.cfg.head).assign_t);
    }
    al += alignment_loss(s.batch[i].views.second, o.assign_t, pf, pa, s.cfg.alignment);
    ce += classification_loss(o.logits_s, o.logits_t, s.batch[i].label);
  }
  const double n = static_cast<double>(s.batch.size());
  EXPECT_NEAR(obj.report.terms.assignment, as / n, 1e-10);
  EXPECT_NEAR(obj.report.terms.alignment, al / n, 1e-10);
  EXPECT_NEAR(obj.report.terms.classification, ce / n, 1e-10);
}

TEST(Objective, PinnedShiftsReproduceValue) {
  const auto s = fixture::small_objective(3);
  Tape t1;
  const BatchObjective a =
      build_objective(t1, bind_params(t1, s.params, true), s.batch, s.partners, s.cfg.head, s.cfg.loss, s.cfg.alignment);
  Tape t2;
  const BatchObjective b = build_objective(t2, bind_params(t2, s.params, true), s.batch, s.partners, s.cfg.head,
                                           s.cfg.loss, s.cfg.alignment, &a.shifts);
  EXPECT_EQ(t1.value(a.total)(0, 0), t2.value(b.total)(0, 0));
}

TEST(Objective, BadPartnerIndex) {
  auto s = fixture::small_objective(4);
  s.partners[0] = {0};
  Tape t;
  EXPECT_ERROR_CODE(
      build_objective(t, bind_params(t, s.params, true), s.batch, s.partners, s.cfg.head, s.cfg.loss, s.cfg.alignment),
      ErrorCode::kInvariantViolation);
}

TEST(Objective, NoGradientToFeatures) {
  const auto s = fixture::small_objective(5);
  Tape t;
  const BatchObjective obj =
      build_objective(t, bind_params(t, s.params, true), s.batch, s.partners, s.cfg.head, s.cfg.loss, s.cfg.alignment);
  t.backward(obj.total);
  for (const auto& g : obj.graphs) {
    EXPECT_FALSE(t.requires_grad(g.features));
    EXPECT_FALSE(t.requires_grad(g.features_other));
  }
}

class TermGradient : public ::testing::TestWithParam<int> {};

TEST_P(TermGradient, MatchesCentralDifferences) {
  const auto s = fixture::small_objective(11);
  const auto fn = fixture::objective_loss(s, fixture::term_weights(GetParam()));
  const auto r = grad_check(fn, fixture::trainable_values(s.params), 1e-5, 64, 7);
  EXPECT_LE(r.max_relative_error, 1e-4) << fixture::term_name(GetParam());
}

INSTANTIATE_TEST_SUITE_P(AllTerms, TermGradient, ::testing::Range(0, 6),
                         [](const auto& info) { return std::string(fixture::term_name(info.param)); });
