#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "protohead/config.hpp"
#include "protohead/geometry.hpp"
#include "protohead/head.hpp"
#include "protohead/losses.hpp"
#include "protohead/tape.hpp"

namespace protohead {

struct TrainItem {
  ViewPair views;
  std::uint32_t label = 0;
};

// For each batch position, `negatives` distinct partners drawn uniformly from
// the rest of the batch (capped at batch - 1). kBatchTooSmall below two items.
std::vector<std::vector<std::size_t>> draw_partners(std::size_t batch, std::uint32_t negatives, std::mt19937_64& rng);

// Correlation shifts are treated as constants of the objective. Passing them
// back in pins them, e.g. while finite-differencing.
struct AlignmentShifts {
  std::vector<double> intra;
  std::vector<std::vector<double>> inter;  // parallel to the partner lists
};

struct BatchObjective {
  Var total;
  LossReport report;  // batch means of each unweighted term
  AlignmentShifts shifts;
  std::vector<SampleGraph> graphs;
};

BatchObjective build_objective(Tape& tape, const ParamVars& params, std::span<const TrainItem> batch,
                               const std::vector<std::vector<std::size_t>>& partners, const HeadConfig& head,
                               const LossWeights& weights, const AlignmentConfig& alignment,
                               const AlignmentShifts* pinned = nullptr);

}  // namespace protohead
