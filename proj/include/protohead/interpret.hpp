#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "protohead/config.hpp"
#include "protohead/dataio.hpp"
#include "protohead/head.hpp"
#include "protohead/numerics.hpp"

namespace protohead {

// Everything the benchmark needs from one prediction.
struct Explanation {
  Matrix assignments;  // A, I x N
  Vector presence;     // h, N
  Matrix weights;      // effective W, D x N
  Matrix importance;   // R, D x N
  Vector logits;       // y-bar, D
  std::size_t predicted = 0;
};

// A classifier whose predictions decompose over prototypes. The head is one;
// tests plug in rigged oracles.
class ExplainableModel {
 public:
  virtual ~ExplainableModel() = default;
  virtual Explanation explain(const Matrix& patches) const = 0;
  virtual Matrix class_weights() const = 0;  // effective W, D x N
};

class HeadModel final : public ExplainableModel {
 public:
  HeadModel(HeadParams params, HeadConfig cfg) : params_(std::move(params)), cfg_(std::move(cfg)) {}

  Explanation explain(const Matrix& patches) const override;
  Matrix class_weights() const override { return params_.effective_weights(); }

  const HeadParams& params() const { return params_; }
  const HeadConfig& config() const { return cfg_; }

 private:
  HeadParams params_;
  HeadConfig cfg_;
};

// PI[i, d] = sum_n A(i, n) W(d, n) h(n) / sum_i A(i, n). Prototypes with no
// assignment mass contribute nothing.
Matrix part_importance(const Matrix& assignments, const Matrix& weights, const Vector& presence);
Matrix part_importance(const Explanation& ex);

struct SheetEntry {
  std::size_t prototype = 0;
  double contribution = 0.0;  // r(d-hat, n)
  double presence = 0.0;      // h(n)
  std::size_t top_row = 0;
  std::size_t top_col = 0;
  std::vector<double> heatmap;  // A(:, n) over the patch grid
};

struct ScoreSheet {
  std::size_t sample = 0;
  std::size_t predicted = 0;
  double total_score = 0.0;  // y-bar(d-hat)
  std::vector<SheetEntry> shown;
  double sec = 1.0;  // shown positive contribution / all positive contribution
};

// Top-k positive contributions to the predicted class, ties to lower index.
ScoreSheet score_sheet(std::size_t sample, const Explanation& ex, std::size_t k, std::uint32_t grid_h,
                       std::uint32_t grid_w);
nlohmann::json to_json(const ScoreSheet& sheet);

std::size_t local_size(const Explanation& ex, double use_threshold = 0.0);
std::size_t global_size(const Matrix& class_weights);

struct Compactness {
  double local_size = 0.0;
  std::size_t global_size = 0;
};
Compactness compactness(std::span<const Explanation> explanations, const Matrix& class_weights,
                        double use_threshold = 0.0);

// o[u - 1] = 1 iff max over category-u patches of r * A(i, n) exceeds the threshold.
std::vector<std::uint8_t> o_vector(const Matrix& assignments, std::size_t prototype, double contribution,
                                   std::span<const std::uint16_t> part_ids, std::uint32_t num_categories,
                                   double threshold = 0.1);

// Per (predicted class, prototype): the share of the prototype's category
// activations that fall on its most frequent category. Prototypes are weighted
// by summed contribution within a class, classes equally.
double consistency(const ExplainableModel& model, const EmbeddingBundle& bundle, const MetricOptions& opts);
double stability(const ExplainableModel& model, const EmbeddingBundle& bundle, const MetricOptions& opts);

// Per-channel background statistics estimated from the bundle's part-0 patches.
struct BackgroundModel {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd stddev;

  static BackgroundModel estimate(const EmbeddingBundle& bundle);
  Eigen::RowVectorXd draw(std::mt19937_64& rng) const;
};

struct Intervention {
  Matrix patches;
  bool applied = false;  // false when the category is background or absent
};

// Replaces every patch of `category` with a fresh background draw.
Intervention deletion_intervention(const Matrix& patches, std::span<const std::uint16_t> part_ids,
                                   std::uint16_t category, const BackgroundModel& background, std::mt19937_64& rng);

struct FaithfulnessScores {
  double sd = 0.0;    // single deletion
  double csdc = 0.0;
  double pc = 0.0;
  double dc = 0.0;
  double distractibility = 0.0;
  double ts = 0.0;    // target sensitivity
  double bi = 0.0;    // background independence
  double mx = 0.0;    // unweighted mean of the seven
  std::size_t samples = 0;
  std::size_t sd_samples = 0;
  std::size_t ts_samples = 0;
};

// Spearman correlation with average ranks. Both inputs constant -> 1, exactly
// one constant -> 0.
double spearman(std::span<const double> a, std::span<const double> b);

FaithfulnessScores correctness_completeness_contrastivity(const ExplainableModel& model, const EmbeddingBundle& bundle,
                                                          const MetricOptions& opts);

struct MetricReport {
  double accuracy = 0.0;
  FaithfulnessScores faithfulness;
  double consistency = 0.0;
  double stability = 0.0;
  double local_size = 0.0;
  std::size_t global_size = 0;
  double mean_sec = 0.0;
  std::vector<std::string> suites;
};

enum class MetricSuite { kAll, kCompactness, kConsistency, kStability, kFaithfulness };
MetricSuite parse_suite(const std::string& name);

MetricReport run_metrics(const ExplainableModel& model, const EmbeddingBundle& bundle, const MetricOptions& opts,
                         MetricSuite suite = MetricSuite::kAll);
nlohmann::json report_to_json(const MetricReport& report, const nlohmann::json& config_echo);

// Grayscale P5 image of a patch field, min-max scaled to 0..255; a constant
// field maps to 128.
std::vector<std::uint8_t> heatmap_pgm(std::span<const double> values, std::uint32_t grid_h, std::uint32_t grid_w);
void emit_heatmap(std::span<const double> values, std::uint32_t grid_h, std::uint32_t grid_w, const std::string& path);

}  // namespace protohead
