#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "protohead/config.hpp"
#include "protohead/dataio.hpp"
#include "protohead/head.hpp"
#include "protohead/losses.hpp"
#include "protohead/numerics.hpp"
#include "protohead/objective.hpp"

namespace protohead {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One AdamW update with decoupled weight decay; `step` counts from 1.
void adamw_step(Matrix& param, const Matrix& grad, Matrix& m, Matrix& v, std::uint64_t step, double lr, double wd,
                const AdamHyper& hyper = {});

// Linear warmup to base_lr, then half-cosine down to 0 at total_steps.
double lr_schedule(std::uint64_t step, std::uint64_t total_steps, std::uint64_t warmup_steps, double base_lr);

void ema_update(Matrix& teacher, const Matrix& student, double momentum);

struct OptimizerState {
  std::map<std::string, Matrix> m;
  std::map<std::string, Matrix> v;
  std::uint64_t step = 0;
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

// Per-class seeded shuffle; each class keeps round(fraction * count) for
// validation, leaving at least one training sample.
Split stratified_split(const EmbeddingBundle& bundle, double fraction, std::uint64_t seed);

double accuracy(const HeadParams& params, const HeadConfig& cfg, const EmbeddingBundle& bundle,
                std::span<const std::size_t> indices);

// Two views of sample s for the given epoch: stored views 0 and 1 when the
// bundle has them, otherwise fresh synthetic augmentations.
ViewPair training_views(const EmbeddingBundle& bundle, std::size_t sample, std::uint32_t epoch,
                        const AugmentConfig& aug, std::uint64_t seed);

struct EpochLog {
  std::uint32_t epoch = 0;
  double lr = 0.0;
  LossReport loss;  // mean over batches
  double train_accuracy = 0.0;  // student predictions on the epoch's augmented views
  double val_accuracy = 0.0;
  double local_size = 0.0;
  std::size_t global_size = 0;
  double seconds = 0.0;  // wall time; not serialized, so logs stay reproducible
};

nlohmann::json to_json(const EpochLog& log);

struct FitResult {
  HeadParams best;
  HeadParams last;
  OptimizerState optimizer;
  std::uint32_t best_epoch = 0;
  double best_val_accuracy = -1.0;
  std::vector<EpochLog> log;
  bool aborted = false;
  std::string abort_reason;
};

struct FitOptions {
  std::function<void(const EpochLog&)> on_epoch;
  // Skips the per-epoch compactness pass.
  bool light_logging = false;
};

FitResult fit(const EmbeddingBundle& bundle, const RunConfig& cfg, const FitOptions& options = {});

Checkpoint make_checkpoint(const HeadParams& params, const OptimizerState* optimizer, const RunConfig& cfg,
                           std::uint32_t epoch);

}  // namespace protohead
