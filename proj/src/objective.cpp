#include "protohead/objective.hpp"

#include <algorithm>
#include <numeric>

#include "protohead/errors.hpp"

namespace protohead {

std::vector<std::vector<std::size_t>> draw_partners(std::size_t batch, std::uint32_t negatives, std::mt19937_64& rng) {
  if (batch < 2 && negatives >= 1) fail(ErrorCode::kBatchTooSmall, "inter-sample alignment needs a batch of at least 2");
  const std::size_t m = std::min<std::size_t>(negatives, batch - 1);
  std::vector<std::vector<std::size_t>> partners(batch);
  std::vector<std::size_t> others(batch - 1);
  for (std::size_t i = 0; i < batch; ++i) {
    std::size_t j = 0;
    for (std::size_t o = 0; o < batch; ++o) {
      if (o != i) others[j++] = o;
    }
    // Partial Fisher-Yates: the first m entries become the draw.
    for (std::size_t k = 0; k < m; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, others.size() - 1);
      std::swap(others[k], others[pick(rng)]);
    }
    partners[i].assign(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(m));
  }
  return partners;
}

BatchObjective build_objective(Tape& tape, const ParamVars& params, std::span<const TrainItem> batch,
                               const std::vector<std::vector<std::size_t>>& partners, const HeadConfig& head,
                               const LossWeights& weights, const AlignmentConfig& alignment,
                               const AlignmentShifts* pinned) {
  if (batch.empty()) fail(ErrorCode::kBatchTooSmall, "empty batch");
  if (partners.size() != batch.size()) fail(ErrorCode::kShapeMismatch, "one partner list per batch item required");
  BatchObjective obj;
  obj.graphs.reserve(batch.size());
  for (const TrainItem& item : batch) obj.graphs.push_back(build_sample_graph(tape, params, item.views, head));

  std::vector<Var> as_terms, al_terms, nce_terms, sp_terms, ce_terms;
  std::vector<double> al_weights;
  obj.shifts.intra.resize(batch.size());
  obj.shifts.inter.resize(batch.size());
  const double per_sample = 1.0 / static_cast<double>(batch.size());

  // Alignment reads the teacher view, the one A^t is computed from.
  std::vector<Matrix> unit_features;
  unit_features.reserve(batch.size());
  for (const TrainItem& item : batch) unit_features.push_back(normalized_rows(item.views.second, "view features"));
  std::vector<Var> unit_assign;
  unit_assign.reserve(batch.size());
  for (const SampleGraph& g : obj.graphs) unit_assign.push_back(ops::unit_rows(tape, g.assign_t));

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const SampleGraph& g = obj.graphs[i];
    as_terms.push_back(assignment_loss(tape, g.aligned_s, g.aligned_t, weights.log_floor));

    const Matrix& ux = unit_features[i];
    const double intra_shift = pinned ? pinned->intra.at(i)
                                      : pair_shift_factored(ux, ux, tape.value(unit_assign[i]),
                                                            tape.value(unit_assign[i]), alignment, ShiftMode::kIntra);
    obj.shifts.intra[i] = intra_shift;
    al_terms.push_back(correspondence_loss_factored(tape, ux, ux, unit_assign[i], unit_assign[i], intra_shift));
    al_weights.push_back(per_sample);
    const double inter_weight = partners[i].empty() ? 0.0 : per_sample / static_cast<double>(partners[i].size());
    for (std::size_t k = 0; k < partners[i].size(); ++k) {
      const std::size_t j = partners[i][k];
      if (j >= batch.size() || j == i) fail(ErrorCode::kInvariantViolation, "partner index out of range");
      const double shift = pinned ? pinned->inter.at(i).at(k)
                                  : pair_shift_factored(ux, unit_features[j], tape.value(unit_assign[i]),
                                                        tape.value(unit_assign[j]), alignment, ShiftMode::kInter);
      obj.shifts.inter[i].push_back(shift);
      al_terms.push_back(correspondence_loss_factored(tape, ux, unit_features[j], unit_assign[i], unit_assign[j], shift));
      al_weights.push_back(inter_weight);
    }

    nce_terms.push_back(contrastive_loss(tape, g.slots_s, g.slot_proj_t, g.dominant_s, g.dominant_t, head.temperature));
    sp_terms.push_back(sparsity_loss(tape, g.importance_s, weights.hoyer_alpha, weights.hoyer_gamma));
    ce_terms.push_back(classification_loss(tape, g.logits_s, g.logits_t, batch[i].label));
  }

  const std::vector<double> mean_weights(batch.size(), per_sample);
  const Var as = ops::weighted_sum(tape, as_terms, mean_weights);
  const Var al = ops::weighted_sum(tape, al_terms, al_weights);
  const Var nce = ops::weighted_sum(tape, nce_terms, mean_weights);
  const Var sp = ops::weighted_sum(tape, sp_terms, mean_weights);
  const Var ce = ops::weighted_sum(tape, ce_terms, mean_weights);

  LossTerms terms;
  terms.assignment = tape.value(as)(0, 0);
  terms.alignment = tape.value(al)(0, 0);
  terms.contrastive = tape.value(nce)(0, 0);
  terms.sparsity = tape.value(sp)(0, 0);
  terms.classification = tape.value(ce)(0, 0);
  obj.report = total_loss(terms, weights);

  const Var parts[] = {as, al, nce, sp, ce};
  const double lambdas[] = {weights.assignment, weights.alignment, weights.contrastive, weights.sparsity,
                            weights.classification};
  obj.total = ops::weighted_sum(tape, parts, lambdas);
  return obj;
}

}  // namespace protohead
