// Acceptance checks. Prints one PASS/FAIL line per criterion; exit status is
// the number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "protohead/dataio.hpp"
#include "protohead/errors.hpp"
#include "protohead/gradcheck.hpp"
#include "protohead/head.hpp"
#include "protohead/interpret.hpp"
#include "protohead/synth.hpp"
#include "protohead/train.hpp"
#include "support/objective_fixture.hpp"
#include "support/oracles.hpp"

namespace ph = protohead;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void verdict(bool ok, const std::string& name, const std::string& detail) {
  std::cout << (ok ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
  if (!ok) ++failures;
}

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

void note(const std::string& line) { std::cout << "  " << line << std::endl; }

// ---- gradient fidelity ----

void gradient_fidelity() {
  const auto start = Clock::now();
  const auto setup = fixture::small_objective(3);
  double worst = 0.0;
  std::size_t coords = 0;
  for (int term = 0; term <= 5; ++term) {
    const auto fn = fixture::objective_loss(setup, fixture::term_weights(term));
    const auto r = ph::grad_check(fn, fixture::trainable_values(setup.params), 1e-5,
                                  std::numeric_limits<std::size_t>::max());
    note(std::string(fixture::term_name(term)) + ": max rel err " + fmt(r.max_relative_error, 3) + " over " +
         std::to_string(r.coordinates_checked) + " coordinates");
    worst = std::max(worst, r.max_relative_error);
    coords = r.coordinates_checked;
  }
  const double t = seconds_since(start);
  verdict(worst <= 1e-4 && t < 30.0, "gradient_fidelity",
          "max rel err " + fmt(worst, 3) + " (<= 1e-4), " + std::to_string(coords) + " coordinates per term, " +
              fmt(t, 3) + " s (< 30 s)");
}

// ---- PI additivity ----

void pi_additivity() {
  ph::HeadConfig cfg;  // default dimensions: 64-d features, N = 64, D = 10
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const ph::HeadModel model(ph::HeadParams::initialize(cfg, s), cfg);
    std::mt19937_64 rng(1000 + s);
    std::normal_distribution<double> n(0.0, 1.0);
    ph::Matrix f(256, cfg.embed_dim);
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = n(rng);
    const auto ex = model.explain(f);
    const ph::Matrix pi = ph::part_importance(ex);
    for (Eigen::Index d = 0; d < pi.cols(); ++d) worst = std::max(worst, std::abs(pi.col(d).sum() - ex.logits(d)));
  }
  verdict(worst <= 1e-6, "pi_additivity", "max |sum_i PI - logit| " + fmt(worst, 3) + " over 200 samples (<= 1e-6)");
}

// ---- synthetic classification ----

struct Trained {
  ph::EmbeddingBundle bundle;
  ph::RunConfig cfg;
  ph::HeadParams params;
  bool ok = false;
};

Trained synthetic_classification() {
  Trained out;
  out.bundle = ph::generate_dataset(out.cfg.synth);
  out.cfg.head.embed_dim = out.bundle.embed_dim;
  out.cfg.head.num_classes = out.bundle.num_classes;
  const auto start = Clock::now();
  ph::FitOptions opts;
  opts.light_logging = true;
  const auto fit = ph::fit(out.bundle, out.cfg, opts);
  const double t = seconds_since(start);
  const auto& last = fit.log.back();
  note("final held-out accuracy " + fmt(last.val_accuracy) + ", best " + fmt(fit.best_val_accuracy) + " at epoch " +
       std::to_string(fit.best_epoch));
  out.params = fit.best;
  out.ok = !fit.aborted;
  verdict(!fit.aborted && fit.best_val_accuracy >= 0.95 && t < 300.0, "synthetic_classification",
          "held-out accuracy " + fmt(fit.best_val_accuracy) + " (>= 0.95) in " + std::to_string(out.cfg.train.epochs) +
              " epochs, " + fmt(t, 4) + " s (< 300 s)");
  return out;
}

// ---- ablations ----

struct AblationRun {
  double accuracy = 0.0;
  double local_size = 0.0;
  double consistency = 0.0;
};

enum class Variant { kAll, kNoAssignment, kNoAlignment, kNoSparsity };

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kAll: return "all losses";
    case Variant::kNoAssignment: return "lambda1 = 0";
    case Variant::kNoAlignment: return "lambda2 = 0";
    case Variant::kNoSparsity: return "lambda4 = 0";
  }
  return "";
}

// Shortened schedule: every variant reaches full held-out accuracy well
// before epoch 12 on this task.
constexpr std::uint32_t kAblationEpochs = 12;
constexpr std::uint32_t kAblationWarmup = 3;

AblationRun ablation_run(const ph::EmbeddingBundle& bundle, Variant v, std::uint64_t seed) {
  ph::RunConfig cfg;
  cfg.head.embed_dim = bundle.embed_dim;
  cfg.head.num_classes = bundle.num_classes;
  cfg.train.epochs = kAblationEpochs;
  cfg.train.warmup_epochs = kAblationWarmup;
  cfg.train.seed = seed;
  if (v == Variant::kNoAssignment) cfg.loss.assignment = 0.0;
  if (v == Variant::kNoAlignment) cfg.loss.alignment = 0.0;
  if (v == Variant::kNoSparsity) cfg.loss.sparsity = 0.0;
  ph::FitOptions opts;
  opts.light_logging = true;
  const auto fit = ph::fit(bundle, cfg, opts);

  AblationRun r;
  r.accuracy = fit.best_val_accuracy;
  const ph::HeadModel model(fit.best, cfg.head);
  const auto split = ph::stratified_split(bundle, cfg.train.val_fraction, cfg.train.seed);
  std::vector<ph::Explanation> exs;
  for (auto s : split.val) exs.push_back(model.explain(bundle.view_matrix(s)));
  r.local_size = ph::compactness(exs, model.class_weights(), cfg.metrics.use_threshold).local_size;
  try {
    r.consistency = ph::consistency(model, bundle, cfg.metrics);
  } catch (const protohead::Error& e) {
    note(std::string("consistency unavailable: ") + e.what());
    r.consistency = 0.0;
  }
  return r;
}

void ablations() {
  const auto start = Clock::now();
  ph::SynthConfig sc;
  const auto bundle = ph::generate_dataset(sc);
  const std::vector<Variant> variants = {Variant::kAll, Variant::kNoAssignment, Variant::kNoAlignment,
                                         Variant::kNoSparsity};
  std::vector<AblationRun> mean(variants.size());
  for (std::size_t k = 0; k < variants.size(); ++k) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto r = ablation_run(bundle, variants[k], seed);
      note(std::string(variant_name(variants[k])) + " seed " + std::to_string(seed) + ": accuracy " +
           fmt(r.accuracy) + ", local size " + fmt(r.local_size) + ", consistency " + fmt(r.consistency));
      mean[k].accuracy += r.accuracy / 3.0;
      mean[k].local_size += r.local_size / 3.0;
      mean[k].consistency += r.consistency / 3.0;
    }
  }
  note("ablation runs took " + fmt(seconds_since(start), 4) + " s (" + std::to_string(kAblationEpochs) +
       " epochs each)");

  const auto& all = mean[0];
  const auto& nosp = mean[3];
  const double drop = (nosp.accuracy - all.accuracy) * 100.0;
  verdict(all.local_size < nosp.local_size && drop <= 2.0, "sparsity_ablation",
          "mean local size " + fmt(all.local_size) + " with sparsity vs " + fmt(nosp.local_size) +
              " without; accuracy " + fmt(all.accuracy) + " vs " + fmt(nosp.accuracy) + " (drop " + fmt(drop, 3) +
              " points, <= 2)");
  verdict(all.consistency > mean[1].consistency && all.consistency > mean[2].consistency, "consistency_ablation",
          "mean consistency " + fmt(all.consistency) + " with all losses vs " + fmt(mean[1].consistency) +
              " (lambda1 = 0) and " + fmt(mean[2].consistency) + " (lambda2 = 0)");
}

// ---- metric oracles ----

void metric_oracles(const Trained& trained) {
  const auto task = fixture::oracle_task();
  const auto bundle = ph::generate_dataset(task);
  const fixture::PartStyleOracle oracle(task);
  ph::MetricOptions opts;

  const double cons = ph::consistency(oracle, bundle, opts);
  const auto f = ph::correctness_completeness_contrastivity(oracle, bundle, opts);
  ph::MetricOptions still = opts;
  still.sigma_stab = 0.0;
  const double stab_oracle = ph::stability(oracle, bundle, still);
  const double stab_head = ph::stability(ph::HeadModel(trained.params, trained.cfg.head), trained.bundle, still);

  const bool ok = cons == 1.0 && stab_oracle == 1.0 && stab_head == 1.0 && f.bi == 1.0 && f.distractibility == 1.0 &&
                  f.sd == 1.0 && f.sd_samples > 0;
  verdict(ok, "metric_oracles",
          "single-category consistency " + fmt(cons, 17) + ", stability at sigma 0 " + fmt(stab_oracle, 17) +
              " (oracle) / " + fmt(stab_head, 17) + " (trained head), BI " + fmt(f.bi, 17) + ", D " +
              fmt(f.distractibility, 17) + ", SD " + fmt(f.sd, 17) + " over " + std::to_string(f.sd_samples) +
              " samples");
}

// ---- SEC ----

void sec_full_sheets(const Trained& trained) {
  const ph::HeadModel model(trained.params, trained.cfg.head);
  const auto& b = trained.bundle;
  double worst = 0.0;
  for (std::size_t s = 0; s < b.samples.size(); ++s) {
    const auto ex = model.explain(b.view_matrix(s));
    const auto sheet = ph::score_sheet(s, ex, trained.cfg.head.num_prototypes, b.grid_h, b.grid_w);
    double shown = 0.0;
    for (const auto& e : sheet.shown) shown += e.contribution;
    const auto row = ex.importance.row(static_cast<Eigen::Index>(ex.predicted));
    const double positive = row.cwiseMax(0.0).sum();
    const double direct = positive > 0.0 ? shown / positive : 1.0;
    worst = std::max({worst, std::abs(sheet.sec - 1.0), std::abs(direct - 1.0)});
  }
  verdict(worst <= 1e-6, "sec_full_sheet",
          "max |SEC - 1| " + fmt(worst, 3) + " over " + std::to_string(b.samples.size()) + " samples (<= 1e-6)");
}

// ---- determinism and round-trips ----

std::string log_text(const ph::FitResult& r) {
  std::string out;
  for (const auto& e : r.log) out += ph::to_json(e).dump() + "\n";
  return out;
}

void determinism_roundtrip() {
  ph::RunConfig cfg;
  cfg.synth.num_classes = 4;
  cfg.synth.samples_per_class = 20;
  cfg.synth.grid_h = cfg.synth.grid_w = 8;
  cfg.synth.embed_dim = 16;
  cfg.head.embed_dim = 16;
  cfg.head.num_classes = 4;
  cfg.head.projection_dim = 24;
  cfg.head.num_prototypes = 12;
  cfg.head.aligned_grid = 4;
  cfg.train.batch_size = 16;
  cfg.train.epochs = 4;
  cfg.train.warmup_epochs = 1;
  cfg.train.val_fraction = 0.2;
  const auto bundle = ph::generate_dataset(cfg.synth);

  const auto a = ph::fit(bundle, cfg);
  const auto b = ph::fit(bundle, cfg);
  const bool logs_same = log_text(a) == log_text(b);
  const bool params_same = a.last.projector_weight == b.last.projector_weight &&
                           a.last.classifier_raw == b.last.classifier_raw &&
                           a.last.student_prototypes == b.last.student_prototypes;

  const auto bytes = ph::serialize_bundle(bundle);
  const bool bundle_same = ph::serialize_bundle(ph::parse_bundle(bytes)) == bytes &&
                           ph::serialize_bundle(ph::generate_dataset(cfg.synth)) == bytes;

  const std::string dir = std::filesystem::temp_directory_path() / "protohead_acceptance";
  std::filesystem::create_directories(dir);
  const std::string peb = dir + "/d.peb";
  const std::string c1 = dir + "/a.phck";
  const std::string c2 = dir + "/b.phck";
  ph::write_bundle(bundle, peb);
  const bool file_same = ph::serialize_bundle(ph::read_bundle(peb)) == bytes;
  ph::save_checkpoint(ph::make_checkpoint(a.last, &a.optimizer, cfg, cfg.train.epochs), c1);
  ph::save_checkpoint(ph::load_checkpoint(c1), c2);
  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  const bool ckpt_same = !slurp(c1).empty() && slurp(c1) == slurp(c2);
  std::filesystem::remove_all(dir);

  verdict(logs_same && params_same && bundle_same && file_same && ckpt_same, "determinism_roundtrip",
          std::string("training logs ") + (logs_same ? "identical" : "differ") + ", parameters " +
              (params_same ? "identical" : "differ") + ", PEB bytes " +
              (bundle_same && file_same ? "identical" : "differ") + ", checkpoint bytes " +
              (ckpt_same ? "identical" : "differ"));
}

}  // namespace

int main() {
  const auto start = Clock::now();
  try {
    gradient_fidelity();
    pi_additivity();
    const Trained trained = synthetic_classification();
    ablations();
    metric_oracles(trained);
    sec_full_sheets(trained);
    determinism_roundtrip();
  } catch (const std::exception& e) {
    std::cout << "FAIL aborted: " << e.what() << std::endl;
    ++failures;
  }
  std::cout << "acceptance: " << failures << " failing, " << fmt(seconds_since(start), 4) << " s total" << std::endl;
  return failures;
}
