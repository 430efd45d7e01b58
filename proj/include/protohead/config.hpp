#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace protohead {

enum class Branch { kStudent, kTeacher };

struct HeadConfig {
  std::uint32_t embed_dim = 64;
  std::uint32_t projection_dim = 128;
  std::uint32_t num_prototypes = 64;
  std::uint32_t num_classes = 10;
  double temperature = 0.1;
  std::uint32_t top_k = 5;
  std::uint32_t aligned_grid = 7;
  double teacher_momentum = 0.995;
  // Raw classifier weights start uniform in [0, classifier_init].
  double classifier_init = 1.0;
  Branch inference_branch = Branch::kStudent;
};

struct TrainConfig {
  std::uint32_t batch_size = 128;
  double base_lr = 0.01;
  double weight_decay = 0.01;
  std::uint32_t warmup_epochs = 5;
  std::uint32_t epochs = 50;
  double head_lr_multiplier = 10.0;
  double val_fraction = 0.1;
  bool decay_prototypes = false;
  std::uint64_t seed = 0;
};

struct LossWeights {
  double assignment = 2.0;     // lambda_1
  double alignment = 5.0;      // lambda_2
  double contrastive = 1.0;    // lambda_3
  double sparsity = 0.1;       // lambda_4
  double classification = 2.0; // lambda_5
  double hoyer_alpha = 0.1;
  double hoyer_gamma = 0.1;
  std::uint32_t negatives = 1;
  double log_floor = 1e-8;
};

struct AlignmentConfig {
  double k_shift = 0.1;
  double v_shift = 3.0;
};

struct AugmentConfig {
  double min_scale = 0.5;  // crop area fraction
  double max_scale = 1.0;
  double min_aspect = 0.75;
  double max_aspect = 4.0 / 3.0;
  double min_overlap = 0.3;  // overlap area as a fraction of the source
  double color_scale = 0.1;  // per-channel gain drawn from U(1-s, 1+s)
  double color_shift = 0.05; // per-channel offset drawn from N(0, s^2)
  double noise_sigma = 0.05;
};

struct SynthConfig {
  std::uint32_t num_classes = 10;
  std::uint32_t samples_per_class = 100;
  std::uint32_t grid_h = 16;
  std::uint32_t grid_w = 16;
  std::uint32_t embed_dim = 64;
  std::uint32_t num_part_categories = 5;
  std::uint32_t styles_per_category = 3;
  // class_styles[d][u-1] = style of category u for class d; generated from the
  // seed when left empty.
  std::vector<std::vector<std::uint32_t>> class_styles;
  std::uint32_t min_part_side = 2;
  std::uint32_t max_part_side = 4;
  double sigma_data = 0.1;
  std::uint64_t seed = 42;
};

struct MetricOptions {
  std::uint32_t score_sheet_k = 4;
  double part_threshold = 0.1;
  double use_threshold = 0.0;
  double sigma_stab = 0.05;
  std::uint64_t seed = 7;
};

struct RunConfig {
  HeadConfig head;
  TrainConfig train;
  LossWeights loss;
  AlignmentConfig alignment;
  AugmentConfig augment;
  SynthConfig synth;
  MetricOptions metrics;
};

// Validation throws Error(kConfigError).
void validate(const HeadConfig& cfg);
void validate(const TrainConfig& cfg);
void validate(const LossWeights& cfg);
void validate(const AugmentConfig& cfg);
void validate(const SynthConfig& cfg);
void validate(const RunConfig& cfg);

nlohmann::json to_json(const RunConfig& cfg);
// Missing keys keep their defaults; unknown keys are rejected.
RunConfig run_config_from_json(const nlohmann::json& doc);
RunConfig load_run_config(const std::string& path);

}  // namespace protohead
