#include "protohead/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "protohead/errors.hpp"
#include "protohead/synth.hpp"

namespace protohead {

namespace {

constexpr std::uint64_t kDeletionTag = 10;
constexpr std::uint64_t kBackgroundTag = 11;

// Cosine below which two classes' mean embeddings of a category count as
// different parts.
constexpr double kDiscriminativeCosine = 0.5;

double category_mass(const Matrix& pi, std::size_t cls, std::span<const std::uint16_t> part_ids,
                     std::uint16_t category) {
  double s = 0.0;
  for (std::size_t i = 0; i < part_ids.size(); ++i) {
    if (part_ids[i] == category) s += pi(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(cls));
  }
  return s;
}

std::vector<std::uint16_t> present_categories(std::span<const std::uint16_t> part_ids, std::uint32_t num_categories) {
  std::vector<std::uint8_t> seen(num_categories + 1, 0);
  for (auto u : part_ids) {
    if (u <= num_categories) seen[u] = 1;
  }
  std::vector<std::uint16_t> out;
  for (std::uint32_t u = 1; u <= num_categories; ++u) {
    if (seen[u]) out.push_back(static_cast<std::uint16_t>(u));
  }
  return out;
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j);
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

bool all_equal(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
}

double mean_or(const std::vector<double>& v, double fallback) {
  if (v.empty()) return fallback;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void require_parts(const EmbeddingBundle& bundle) {
  if (bundle.num_part_categories == 0) fail(ErrorCode::kInvariantViolation, "bundle has no part categories");
  for (const auto& s : bundle.samples) {
    if (s.part_ids.size() != bundle.patches()) fail(ErrorCode::kInvariantViolation, "bundle has no part masks");
  }
}

// Mean embedding of category u for class d; rows of profile[d] indexed by u - 1.
std::vector<Matrix> category_profiles(const EmbeddingBundle& bundle) {
  const auto U = bundle.num_part_categories;
  std::vector<Matrix> sums(bundle.num_classes, Matrix::Zero(U, bundle.embed_dim));
  std::vector<std::vector<double>> counts(bundle.num_classes, std::vector<double>(U, 0.0));
  for (std::size_t s = 0; s < bundle.samples.size(); ++s) {
    const auto& sample = bundle.samples[s];
    const Matrix f = bundle.view_matrix(s);
    for (std::size_t i = 0; i < sample.part_ids.size(); ++i) {
      const auto u = sample.part_ids[i];
      if (u == 0 || u > U) continue;
      sums[sample.label].row(u - 1) += f.row(static_cast<Eigen::Index>(i));
      counts[sample.label][u - 1] += 1.0;
    }
  }
  for (std::size_t d = 0; d < sums.size(); ++d) {
    for (std::uint32_t u = 0; u < U; ++u) {
      if (counts[d][u] > 0.0) sums[d].row(u) /= counts[d][u];
    }
  }
  return sums;
}

bool discriminative(const std::vector<Matrix>& profiles, std::size_t d1, std::size_t d2, std::uint16_t u) {
  const auto a = profiles[d1].row(u - 1);
  const auto b = profiles[d2].row(u - 1);
  const double na = a.norm();
  const double nb = b.norm();
  if (na < kNormEpsilon || nb < kNormEpsilon) return false;
  return a.dot(b) / (na * nb) < kDiscriminativeCosine;
}

}  // namespace

Explanation HeadModel::explain(const Matrix& patches) const {
  Inference inf = infer(patches, params_, cfg_);
  Explanation ex;
  ex.assignments = std::move(inf.assignments);
  ex.presence = std::move(inf.presence);
  ex.weights = params_.effective_weights();
  ex.importance = std::move(inf.importance);
  ex.logits = std::move(inf.logits);
  ex.predicted = inf.predicted;
  return ex;
}

Matrix part_importance(const Matrix& assignments, const Matrix& weights, const Vector& presence) {
  if (assignments.cols() != weights.cols() || presence.size() != weights.cols()) {
    fail(ErrorCode::kShapeMismatch, "part_importance: prototype axes disagree");
  }
  const Eigen::RowVectorXd mass = assignments.colwise().sum();
  Matrix scaled(weights.rows(), weights.cols());
  for (Eigen::Index n = 0; n < weights.cols(); ++n) {
    scaled.col(n) = mass(n) > 0.0 ? (weights.col(n) * (presence(n) / mass(n))).eval() : Vector::Zero(weights.rows());
  }
  return assignments * scaled.transpose();
}

Matrix part_importance(const Explanation& ex) { return part_importance(ex.assignments, ex.weights, ex.presence); }

ScoreSheet score_sheet(std::size_t sample, const Explanation& ex, std::size_t k, std::uint32_t grid_h,
                       std::uint32_t grid_w) {
  if (static_cast<std::size_t>(ex.assignments.rows()) != static_cast<std::size_t>(grid_h) * grid_w) {
    fail(ErrorCode::kShapeMismatch, "score_sheet: assignments do not match the patch grid");
  }
  ScoreSheet sheet;
  sheet.sample = sample;
  sheet.predicted = ex.predicted;
  sheet.total_score = ex.logits(static_cast<Eigen::Index>(ex.predicted));
  const Vector r = ex.importance.row(static_cast<Eigen::Index>(ex.predicted)).transpose();

  std::vector<std::size_t> positive;
  double total_positive = 0.0;
  for (Eigen::Index n = 0; n < r.size(); ++n) {
    if (r(n) > 0.0) {
      positive.push_back(static_cast<std::size_t>(n));
      total_positive += r(n);
    }
  }
  std::stable_sort(positive.begin(), positive.end(),
                   [&](std::size_t a, std::size_t b) { return r(static_cast<Eigen::Index>(a)) > r(static_cast<Eigen::Index>(b)); });
  if (positive.size() > k) positive.resize(k);

  double shown = 0.0;
  for (auto n : positive) {
    const auto col = static_cast<Eigen::Index>(n);
    SheetEntry e;
    e.prototype = n;
    e.contribution = r(col);
    e.presence = ex.presence(col);
    const Vector a = ex.assignments.col(col);
    const std::size_t top = argmax(as_span(a));
    e.top_row = top / grid_w;
    e.top_col = top % grid_w;
    e.heatmap.assign(a.data(), a.data() + a.size());
    shown += e.contribution;
    sheet.shown.push_back(std::move(e));
  }
  sheet.sec = total_positive > 0.0 ? std::clamp(shown / total_positive, 0.0, 1.0) : 1.0;
  return sheet;
}

nlohmann::json to_json(const ScoreSheet& sheet) {
  nlohmann::json j;
  j["sample"] = sheet.sample;
  j["predicted"] = sheet.predicted;
  j["total_score"] = sheet.total_score;
  j["sec"] = sheet.sec;
  auto& list = j["prototypes"] = nlohmann::json::array();
  for (const auto& e : sheet.shown) {
    list.push_back({{"id", e.prototype},
                    {"contribution", e.contribution},
                    {"presence", e.presence},
                    {"top_patch", {e.top_row, e.top_col}},
                    {"heatmap", e.heatmap}});
  }
  return j;
}

std::size_t local_size(const Explanation& ex, double use_threshold) {
  const auto row = ex.importance.row(static_cast<Eigen::Index>(ex.predicted));
  return static_cast<std::size_t>((row.array() > use_threshold).count());
}

std::size_t global_size(const Matrix& class_weights) {
  if (class_weights.size() == 0) return 0;
  return static_cast<std::size_t>((class_weights.colwise().maxCoeff().array() > 0.0).count());
}

Compactness compactness(std::span<const Explanation> explanations, const Matrix& class_weights,
                        double use_threshold) {
  Compactness c;
  c.global_size = global_size(class_weights);
  if (explanations.empty()) return c;
  double total = 0.0;
  for (const auto& ex : explanations) total += static_cast<double>(local_size(ex, use_threshold));
  c.local_size = total / static_cast<double>(explanations.size());
  return c;
}

std::vector<std::uint8_t> o_vector(const Matrix& assignments, std::size_t prototype, double contribution,
                                   std::span<const std::uint16_t> part_ids, std::uint32_t num_categories,
                                   double threshold) {
  if (part_ids.size() != static_cast<std::size_t>(assignments.rows())) {
    fail(ErrorCode::kShapeMismatch, "o_vector: part mask does not match patches");
  }
  std::vector<double> best(num_categories, -std::numeric_limits<double>::infinity());
  const auto col = static_cast<Eigen::Index>(prototype);
  for (std::size_t i = 0; i < part_ids.size(); ++i) {
    const auto u = part_ids[i];
    if (u == 0 || u > num_categories) continue;
    best[u - 1] = std::max(best[u - 1], contribution * assignments(static_cast<Eigen::Index>(i), col));
  }
  std::vector<std::uint8_t> o(num_categories, 0);
  for (std::uint32_t u = 0; u < num_categories; ++u) o[u] = best[u] > threshold ? 1 : 0;
  return o;
}

double consistency(const ExplainableModel& model, const EmbeddingBundle& bundle, const MetricOptions& opts) {
  require_parts(bundle);
  const auto U = bundle.num_part_categories;
  struct Tally {
    double weight = 0.0;
    std::vector<double> hits;
  };
  // class -> prototype -> tally
  std::vector<std::map<std::size_t, Tally>> tallies(bundle.num_classes);
  for (std::size_t s = 0; s < bundle.samples.size(); ++s) {
    const auto& sample = bundle.samples[s];
    const Explanation ex = model.explain(bundle.view_matrix(s));
    if (ex.predicted >= tallies.size()) tallies.resize(ex.predicted + 1);
    const auto row = ex.importance.row(static_cast<Eigen::Index>(ex.predicted));
    for (Eigen::Index n = 0; n < row.size(); ++n) {
      const double r = row(n);
      if (!(r > opts.use_threshold)) continue;
      const auto o = o_vector(ex.assignments, static_cast<std::size_t>(n), r, sample.part_ids, U, opts.part_threshold);
      if (std::none_of(o.begin(), o.end(), [](std::uint8_t b) { return b != 0; })) continue;
      Tally& t = tallies[ex.predicted][static_cast<std::size_t>(n)];
      if (t.hits.empty()) t.hits.assign(U, 0.0);
      t.weight += r;
      for (std::uint32_t u = 0; u < U; ++u) t.hits[u] += o[u];
    }
  }
  std::vector<double> per_class;
  for (const auto& cls : tallies) {
    double num = 0.0;
    double den = 0.0;
    for (const auto& [n, t] : cls) {
      // A prototype lighting up every part in each sample is not consistent,
      // so the mode is measured against all activations, not against samples.
      const double total = std::accumulate(t.hits.begin(), t.hits.end(), 0.0);
      const double freq = *std::max_element(t.hits.begin(), t.hits.end()) / total;
      num += t.weight * freq;
      den += t.weight;
    }
    if (den > 0.0) per_class.push_back(num / den);
  }
  if (per_class.empty()) fail(ErrorCode::kNoActivePrototypes, "no prototype is attributed to any part");
  return mean_or(per_class, 0.0);
}

double stability(const ExplainableModel& model, const EmbeddingBundle& bundle, const MetricOptions& opts) {
  require_parts(bundle);
  const auto U = bundle.num_part_categories;
  const EmbeddingBundle noisy = perturb(bundle, opts.sigma_stab, opts.seed);
  double pairs = 0.0;
  double agree = 0.0;
  for (std::size_t s = 0; s < bundle.samples.size(); ++s) {
    const auto& parts = bundle.samples[s].part_ids;
    const Explanation clean = model.explain(bundle.view_matrix(s));
    const Explanation shaken = model.explain(noisy.view_matrix(s));
    const auto d = static_cast<Eigen::Index>(clean.predicted);
    for (Eigen::Index n = 0; n < clean.importance.cols(); ++n) {
      const double r = clean.importance(d, n);
      if (!(r > opts.use_threshold)) continue;
      const auto o = o_vector(clean.assignments, static_cast<std::size_t>(n), r, parts, U, opts.part_threshold);
      if (std::none_of(o.begin(), o.end(), [](std::uint8_t b) { return b != 0; })) continue;
      const auto o2 = o_vector(shaken.assignments, static_cast<std::size_t>(n), shaken.importance(d, n), parts, U,
                               opts.part_threshold);
      pairs += 1.0;
      if (o == o2) agree += 1.0;
    }
  }
  return pairs > 0.0 ? agree / pairs : 1.0;
}

BackgroundModel BackgroundModel::estimate(const EmbeddingBundle& bundle) {
  require_parts(bundle);
  const auto C = static_cast<Eigen::Index>(bundle.embed_dim);
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(C);
  Eigen::RowVectorXd sq = Eigen::RowVectorXd::Zero(C);
  double count = 0.0;
  for (std::size_t s = 0; s < bundle.samples.size(); ++s) {
    const Matrix f = bundle.view_matrix(s);
    const auto& parts = bundle.samples[s].part_ids;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (parts[i] != 0) continue;
      const auto row = f.row(static_cast<Eigen::Index>(i));
      sum += row;
      sq += row.array().square().matrix();
      count += 1.0;
    }
  }
  if (count == 0.0) fail(ErrorCode::kInvariantViolation, "bundle has no background patches");
  BackgroundModel bg;
  bg.mean = sum / count;
  bg.stddev = (sq / count - bg.mean.array().square().matrix()).cwiseMax(0.0).cwiseSqrt();
  return bg;
}

Eigen::RowVectorXd BackgroundModel::draw(std::mt19937_64& rng) const {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::RowVectorXd out(mean.size());
  for (Eigen::Index c = 0; c < mean.size(); ++c) out(c) = mean(c) + stddev(c) * normal(rng);
  return out;
}

Intervention deletion_intervention(const Matrix& patches, std::span<const std::uint16_t> part_ids,
                                   std::uint16_t category, const BackgroundModel& background, std::mt19937_64& rng) {
  if (part_ids.size() != static_cast<std::size_t>(patches.rows())) {
    fail(ErrorCode::kShapeMismatch, "deletion: part mask does not match patches");
  }
  Intervention out{patches, false};
  if (category == 0) return out;
  for (std::size_t i = 0; i < part_ids.size(); ++i) {
    if (part_ids[i] != category) continue;
    out.patches.row(static_cast<Eigen::Index>(i)) = background.draw(rng);
    out.applied = true;
  }
  return out;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) fail(ErrorCode::kShapeMismatch, "spearman: length mismatch");
  const bool ca = all_equal(a);
  const bool cb = all_equal(b);
  if (ca && cb) return 1.0;
  if (ca || cb) return 0.0;
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double ma = mean_or(ra, 0.0);
  const double mb = mean_or(rb, 0.0);
  double sab = 0.0;
  double saa = 0.0;
  double sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

FaithfulnessScores correctness_completeness_contrastivity(const ExplainableModel& model, const EmbeddingBundle& bundle,
                                                          const MetricOptions& opts) {
  require_parts(bundle);
  const auto U = bundle.num_part_categories;
  const BackgroundModel background = BackgroundModel::estimate(bundle);
  const auto profiles = category_profiles(bundle);

  std::vector<double> sd, csdc, pc, dc, dist, ts, bi;
  for (std::size_t s = 0; s < bundle.samples.size(); ++s) {
    const auto& sample = bundle.samples[s];
    const std::span<const std::uint16_t> parts(sample.part_ids);
    const Matrix f = bundle.view_matrix(s);
    const Explanation ex = model.explain(f);
    const std::size_t d_hat = ex.predicted;
    const auto dh = static_cast<Eigen::Index>(d_hat);
    const Matrix pi = part_importance(ex);
    const auto present = present_categories(parts, U);
    auto rng = seeded_stream(opts.seed, s, kDeletionTag);

    auto delete_set = [&](std::span<const std::uint16_t> cats) {
      Matrix g = f;
      for (auto u : cats) g = deletion_intervention(g, parts, u, background, rng).patches;
      return g;
    };

    // Distractibility: share of absolute PI mass on background patches.
    {
      double bg_mass = 0.0;
      double all_mass = 0.0;
      for (std::size_t i = 0; i < parts.size(); ++i) {
        const double v = std::abs(pi(static_cast<Eigen::Index>(i), dh));
        all_mass += v;
        if (parts[i] == 0) bg_mass += v;
      }
      dist.push_back(1.0 - (all_mass > 0.0 ? bg_mass / all_mass : 0.0));
    }

    // Background independence.
    {
      auto bg_rng = seeded_stream(opts.seed, s, kBackgroundTag);
      Matrix swapped = f;
      for (std::size_t i = 0; i < parts.size(); ++i) {
        if (parts[i] == 0) swapped.row(static_cast<Eigen::Index>(i)) = background.draw(bg_rng);
      }
      bi.push_back(model.explain(swapped).predicted == d_hat ? 1.0 : 0.0);
    }

    if (!present.empty()) {
      std::vector<double> mass(present.size());
      for (std::size_t j = 0; j < present.size(); ++j) mass[j] = category_mass(pi, d_hat, parts, present[j]);

      // Single deletion.
      if (present.size() >= 2) {
        std::vector<double> drops(present.size());
        for (std::size_t j = 0; j < present.size(); ++j) {
          const std::uint16_t u = present[j];
          const Matrix g = delete_set(std::span<const std::uint16_t>(&u, 1));
          drops[j] = ex.logits(dh) - model.explain(g).logits(dh);
        }
        sd.push_back(0.5 * (spearman(mass, drops) + 1.0));
      }

      std::vector<std::size_t> order(present.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mass[a] > mass[b]; });
      std::vector<std::uint16_t> ranked;
      for (auto j : order) ranked.push_back(present[j]);
      const std::size_t K = ranked.size();

      // Cumulative deletion in descending PI order; score is the normalized
      // area under the preserved-prediction curve up to the first flip.
      std::size_t preserved = 0;
      for (std::size_t k = 1; k <= K; ++k) {
        const Matrix g = delete_set(std::span<const std::uint16_t>(ranked.data(), k));
        if (model.explain(g).predicted != d_hat) break;
        ++preserved;
      }
      csdc.push_back(1.0 - static_cast<double>(preserved) / static_cast<double>(K));

      // Minimal evidence: the fewest top-PI categories that alone keep d-hat.
      Matrix minimal = f;
      for (std::size_t j = 1; j < K; ++j) {
        const Matrix g = delete_set(std::span<const std::uint16_t>(ranked.data() + j, K - j));
        if (model.explain(g).predicted == d_hat) {
          minimal = g;
          break;
        }
      }
      {
        const Matrix g = deletion_intervention(minimal, parts, ranked.front(), background, rng).patches;
        pc.push_back(model.explain(g).predicted != d_hat ? 1.0 : 0.0);
      }

      {
        const Matrix g = delete_set(std::span<const std::uint16_t>(&ranked.back(), 1));
        dc.push_back(model.explain(g).predicted == d_hat ? 1.0 : 0.0);
      }
    }

    // Target sensitivity on a chimera of this sample and a sample of another class.
    if (bundle.num_classes >= 2) {
      const std::size_t d1 = sample.label;
      const std::size_t d2 = (d1 + 1 + s % (bundle.num_classes - 1)) % bundle.num_classes;
      std::vector<std::uint16_t> diff;
      for (auto u : present) {
        if (discriminative(profiles, d1, d2, u)) diff.push_back(u);
      }
      if (diff.size() >= 2) {
        const std::size_t half = (diff.size() + 1) / 2;
        const std::vector<std::uint16_t> own(diff.begin(), diff.begin() + static_cast<std::ptrdiff_t>(half));
        const std::vector<std::uint16_t> foreign(diff.begin() + static_cast<std::ptrdiff_t>(half), diff.end());
        std::size_t partner = bundle.samples.size();
        for (std::size_t t = 0; t < bundle.samples.size(); ++t) {
          if (bundle.samples[t].label != d2) continue;
          const auto pp = present_categories(bundle.samples[t].part_ids, U);
          if (std::all_of(foreign.begin(), foreign.end(),
                          [&](std::uint16_t u) { return std::find(pp.begin(), pp.end(), u) != pp.end(); })) {
            partner = t;
            break;
          }
        }
        if (partner < bundle.samples.size()) {
          const Matrix donor = bundle.view_matrix(partner);
          const auto& donor_parts = bundle.samples[partner].part_ids;
          Matrix chimera = f;
          for (auto u : foreign) {
            std::vector<Eigen::Index> src;
            for (std::size_t i = 0; i < donor_parts.size(); ++i) {
              if (donor_parts[i] == u) src.push_back(static_cast<Eigen::Index>(i));
            }
            std::size_t next = 0;
            for (std::size_t i = 0; i < parts.size(); ++i) {
              if (parts[i] != u) continue;
              chimera.row(static_cast<Eigen::Index>(i)) = donor.row(src[next % src.size()]);
              ++next;
            }
          }
          const Matrix cpi = part_importance(model.explain(chimera));
          double own_1 = 0.0, own_2 = 0.0, for_1 = 0.0, for_2 = 0.0;
          for (auto u : own) {
            own_1 += category_mass(cpi, d1, parts, u);
            own_2 += category_mass(cpi, d2, parts, u);
          }
          for (auto u : foreign) {
            for_1 += category_mass(cpi, d1, parts, u);
            for_2 += category_mass(cpi, d2, parts, u);
          }
          ts.push_back(0.5 * ((own_1 > own_2 ? 1.0 : 0.0) + (for_2 > for_1 ? 1.0 : 0.0)));
        }
      }
    }
  }

  FaithfulnessScores out;
  out.samples = bundle.samples.size();
  out.sd_samples = sd.size();
  out.ts_samples = ts.size();
  out.sd = mean_or(sd, 0.5);
  out.csdc = mean_or(csdc, 0.0);
  out.pc = mean_or(pc, 0.0);
  out.dc = mean_or(dc, 0.0);
  out.distractibility = mean_or(dist, 0.0);
  out.ts = mean_or(ts, 0.5);
  out.bi = mean_or(bi, 0.0);
  out.mx = (out.csdc + out.pc + out.dc + out.distractibility + out.sd + out.ts + out.bi) / 7.0;
  return out;
}

MetricSuite parse_suite(const std::string& name) {
  if (name == "all") return MetricSuite::kAll;
  if (name == "compactness") return MetricSuite::kCompactness;
  if (name == "consistency") return MetricSuite::kConsistency;
  if (name == "stability") return MetricSuite::kStability;
  if (name == "faithfulness") return MetricSuite::kFaithfulness;
  fail(ErrorCode::kConfigError, "unknown metric suite '" + name + "'");
}

MetricReport run_metrics(const ExplainableModel& model, const EmbeddingBundle& bundle, const MetricOptions& opts,
                         MetricSuite suite) {
  MetricReport report;
  const bool all = suite == MetricSuite::kAll;

  std::vector<Explanation> explanations;
  explanations.reserve(bundle.samples.size());
  double correct = 0.0;
  double sec = 0.0;
  for (std::size_t s = 0; s < bundle.samples.size(); ++s) {
    explanations.push_back(model.explain(bundle.view_matrix(s)));
    const auto& ex = explanations.back();
    if (ex.predicted == bundle.samples[s].label) correct += 1.0;
    sec += score_sheet(s, ex, opts.score_sheet_k, bundle.grid_h, bundle.grid_w).sec;
  }
  const double count = std::max<double>(1.0, static_cast<double>(bundle.samples.size()));
  report.accuracy = correct / count;
  report.mean_sec = sec / count;

  if (all || suite == MetricSuite::kCompactness) {
    const Compactness c = compactness(explanations, model.class_weights(), opts.use_threshold);
    report.local_size = c.local_size;
    report.global_size = c.global_size;
    report.suites.emplace_back("compactness");
  }
  if (all || suite == MetricSuite::kConsistency) {
    report.consistency = consistency(model, bundle, opts);
    report.suites.emplace_back("consistency");
  }
  if (all || suite == MetricSuite::kStability) {
    report.stability = stability(model, bundle, opts);
    report.suites.emplace_back("stability");
  }
  if (all || suite == MetricSuite::kFaithfulness) {
    report.faithfulness = correctness_completeness_contrastivity(model, bundle, opts);
    report.suites.emplace_back("faithfulness");
  }
  return report;
}

nlohmann::json report_to_json(const MetricReport& report, const nlohmann::json& config_echo) {
  const auto& f = report.faithfulness;
  nlohmann::json j;
  j["accuracy"] = report.accuracy;
  j["suites"] = report.suites;
  j["sec_mean"] = report.mean_sec;
  j["local_size"] = report.local_size;
  j["global_size"] = report.global_size;
  j["consistency"] = report.consistency;
  j["stability"] = report.stability;
  j["SD"] = f.sd;
  j["CSDC"] = f.csdc;
  j["PC"] = f.pc;
  j["DC"] = f.dc;
  j["D"] = f.distractibility;
  j["TS"] = f.ts;
  j["BI"] = f.bi;
  j["mX"] = f.mx;
  j["counts"] = {{"samples", f.samples}, {"sd_samples", f.sd_samples}, {"ts_samples", f.ts_samples}};
  j["notes"] = {
      "deletion metrics use embedding-level interventions: deleted patches are redrawn from background statistics",
      "CSDC, PC, DC, D, TS and BI follow simplified single-bundle protocols",
      "mX is the unweighted mean of CSDC, PC, DC, D, SD, TS and BI",
      "consistency weights predicted classes equally",
      "SD defaults to 0.5 and TS to 0.5 when no sample qualifies",
  };
  j["config"] = config_echo;
  return j;
}

std::vector<std::uint8_t> heatmap_pgm(std::span<const double> values, std::uint32_t grid_h, std::uint32_t grid_w) {
  if (values.size() != static_cast<std::size_t>(grid_h) * grid_w) {
    fail(ErrorCode::kShapeMismatch, "heatmap: value count does not match grid");
  }
  for (double v : values) {
    if (!std::isfinite(v)) fail(ErrorCode::kNonFiniteValue, "heatmap: non-finite value");
  }
  const std::string header = "P5\n" + std::to_string(grid_w) + " " + std::to_string(grid_h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = values.empty() ? 0.0 : *hi - *lo;
  for (double v : values) {
    const double scaled = range > 0.0 ? std::round(255.0 * (v - *lo) / range) : 128.0;
    out.push_back(static_cast<std::uint8_t>(std::clamp(scaled, 0.0, 255.0)));
  }
  return out;
}

void emit_heatmap(std::span<const double> values, std::uint32_t grid_h, std::uint32_t grid_w,
                  const std::string& path) {
  const auto bytes = heatmap_pgm(values, grid_h, grid_w);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIoFailure, "cannot open " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::kIoFailure, "write failed for " + path);
}

}  // namespace protohead
