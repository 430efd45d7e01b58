#include <cstdio>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "protohead/config.hpp"
#include "protohead/dataio.hpp"
#include "protohead/errors.hpp"
#include "protohead/head.hpp"
#include "protohead/interpret.hpp"
#include "protohead/synth.hpp"
#include "protohead/train.hpp"

namespace fs = std::filesystem;
using namespace protohead;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::kIoFailure:
    case ErrorCode::kBadMagic:
    case ErrorCode::kVersionMismatch:
    case ErrorCode::kTruncatedFile:
    case ErrorCode::kSizeMismatch:
      return kExitIo;
    case ErrorCode::kNonFiniteLoss:
    case ErrorCode::kNonFiniteTerm:
    case ErrorCode::kNonFiniteValue:
    case ErrorCode::kZeroNormRow:
      return kExitNumeric;
    default:
      return kExitConfig;
  }
}

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorCode::kIoFailure, "cannot create " + dir + ": " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIoFailure, "cannot open " + path);
  out << text;
  if (!out) fail(ErrorCode::kIoFailure, "write failed for " + path);
}

struct Loaded {
  RunConfig cfg;
  HeadParams params;
  EmbeddingBundle bundle;
};

Loaded load_model_and_data(const std::string& data, const std::string& ckpt_path) {
  Loaded l;
  l.bundle = read_bundle(data);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  l.cfg = run_config_from_json(ckpt.config);
  l.params = params_from_checkpoint(ckpt, l.cfg.head);
  if (l.bundle.embed_dim != l.cfg.head.embed_dim) {
    fail(ErrorCode::kShapeMismatch, "bundle embed_dim differs from the checkpoint");
  }
  return l;
}

std::string sample_name(std::size_t s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%05zu", s);
  return buf;
}

int cmd_gen_synth(const std::string& out, const std::string& config, const std::optional<std::uint64_t>& seed) {
  RunConfig cfg = config_or_default(config);
  if (seed) cfg.synth.seed = *seed;
  validate(cfg.synth);
  const EmbeddingBundle bundle = generate_dataset(cfg.synth);
  write_bundle(bundle, out);
  std::cout << "wrote " << out << ": " << bundle.samples.size() << " samples, " << bundle.num_classes << " classes, "
            << bundle.grid_h << "x" << bundle.grid_w << " grid, " << bundle.embed_dim << "-d embeddings, "
            << bundle.num_part_categories << " part categories\n";
  return 0;
}

int cmd_train(const std::string& data, const std::string& config, const std::string& out) {
  RunConfig cfg = config_or_default(config);
  const EmbeddingBundle bundle = read_bundle(data);
  cfg.head.embed_dim = bundle.embed_dim;
  cfg.head.num_classes = bundle.num_classes;
  validate(cfg);
  ensure_dir(out);

  const std::string log_path = (fs::path(out) / "log.jsonl").string();
  std::ofstream log(log_path, std::ios::binary);
  if (!log) fail(ErrorCode::kIoFailure, "cannot open " + log_path);
  FitOptions options;
  options.on_epoch = [&](const EpochLog& e) {
    log << to_json(e).dump() << '\n';
    log.flush();
    std::cout << "epoch " << e.epoch << " loss " << e.loss.total << " val_acc " << e.val_accuracy << " (" << e.seconds << " s)\n";
  };
  const FitResult result = fit(bundle, cfg, options);
  if (!log) fail(ErrorCode::kIoFailure, "write failed for " + log_path);

  save_checkpoint(make_checkpoint(result.best, nullptr, cfg, result.best_epoch), (fs::path(out) / "best.phck").string());
  save_checkpoint(make_checkpoint(result.last, &result.optimizer, cfg, cfg.train.epochs),
                  (fs::path(out) / "last.phck").string());

  if (result.aborted) {
    std::cerr << "training aborted: " << result.abort_reason << "; best checkpoint kept\n";
    return kExitNumeric;
  }
  const EpochLog& final_epoch = result.log.back();
  const HeadModel model(result.best, cfg.head);
  const Split split = stratified_split(bundle, cfg.train.val_fraction, cfg.train.seed);
  std::vector<Explanation> explanations;
  const auto& eval_set = split.val.empty() ? split.train : split.val;
  for (auto s : eval_set) explanations.push_back(model.explain(bundle.view_matrix(s)));
  const Compactness c = compactness(explanations, model.class_weights(), cfg.metrics.use_threshold);
  std::cout << "final val_acc " << final_epoch.val_accuracy << " best val_acc " << result.best_val_accuracy
            << " (epoch " << result.best_epoch << ") local_size " << c.local_size << " global_size "
            << c.global_size << '\n';
  return 0;
}

int cmd_eval(const std::string& data, const std::string& ckpt, const std::string& which) {
  const Loaded l = load_model_and_data(data, ckpt);
  const Split split = stratified_split(l.bundle, l.cfg.train.val_fraction, l.cfg.train.seed);
  std::vector<std::size_t> all(l.bundle.samples.size());
  for (std::size_t s = 0; s < all.size(); ++s) all[s] = s;
  const auto& indices = which == "train" ? split.train : which == "val" ? split.val : all;
  const double acc = accuracy(l.params, l.cfg.head, l.bundle, indices);
  std::cout << "accuracy " << acc << " (" << indices.size() << " samples, split " << which << ")\n";
  return 0;
}

int cmd_explain(const std::string& data, const std::string& ckpt, std::size_t top_k, const std::string& out,
                std::size_t limit) {
  const Loaded l = load_model_and_data(data, ckpt);
  ensure_dir(out);
  const HeadModel model(l.params, l.cfg.head);
  const std::size_t count = limit == 0 ? l.bundle.samples.size() : std::min(limit, l.bundle.samples.size());
  double sec = 0.0;
  for (std::size_t s = 0; s < count; ++s) {
    const Explanation ex = model.explain(l.bundle.view_matrix(s));
    const ScoreSheet sheet = score_sheet(s, ex, top_k, l.bundle.grid_h, l.bundle.grid_w);
    const std::string stem = sample_name(s);
    write_text((fs::path(out) / (stem + ".json")).string(), to_json(sheet).dump(2) + "\n");
    for (const auto& e : sheet.shown) {
      emit_heatmap(e.heatmap, l.bundle.grid_h, l.bundle.grid_w,
                   (fs::path(out) / (stem + "_proto" + std::to_string(e.prototype) + ".pgm")).string());
    }
    const Matrix pi = part_importance(ex);
    const Vector column = pi.col(static_cast<Eigen::Index>(ex.predicted));
    emit_heatmap(std::span<const double>(column.data(), static_cast<std::size_t>(column.size())), l.bundle.grid_h,
                 l.bundle.grid_w, (fs::path(out) / (stem + "_pi.pgm")).string());
    sec += sheet.sec;
  }
  std::cout << "wrote " << count << " score sheets to " << out << "; mean SEC "
            << (count ? sec / static_cast<double>(count) : 1.0) << '\n';
  return 0;
}

int cmd_metrics(const std::string& data, const std::string& ckpt, const std::string& suite, const std::string& out) {
  const MetricSuite which = parse_suite(suite);
  const Loaded l = load_model_and_data(data, ckpt);
  const HeadModel model(l.params, l.cfg.head);
  const MetricReport report = run_metrics(model, l.bundle, l.cfg.metrics, which);
  const nlohmann::json doc = report_to_json(report, to_json(l.cfg));
  write_text(out, doc.dump(2) + "\n");
  std::cout << "accuracy " << report.accuracy << " mX " << report.faithfulness.mx << " consistency "
            << report.consistency << " stability " << report.stability << " local_size " << report.local_size
            << " global_size " << report.global_size << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Tape buffers are large and short-lived; keep them on the heap instead of
  // round-tripping through mmap on every batch.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Prototype classification head: synthesis, training and interpretability benchmark"};
  app.require_subcommand(1);

  std::string out, config, data, ckpt, split = "all", suite = "all";
  std::optional<std::uint64_t> seed;
  std::size_t top_k = 4;
  std::size_t limit = 0;

  auto* gen = app.add_subcommand("gen-synth", "Write a synthetic embedding bundle");
  gen->add_option("--out", out, "Output bundle path")->required();
  gen->add_option("--config", config, "Run configuration JSON");
  gen->add_option("--seed", seed, "Override synth.seed");

  auto* train = app.add_subcommand("train", "Train the head on a bundle");
  train->add_option("--data", data, "Bundle path")->required();
  train->add_option("--config", config, "Run configuration JSON");
  train->add_option("--out", out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Print classification accuracy");
  eval->add_option("--data", data, "Bundle path")->required();
  eval->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  eval->add_option("--split", split, "all, train or val")->check(CLI::IsMember({"all", "train", "val"}));

  auto* explain = app.add_subcommand("explain", "Write score sheets and heatmaps");
  explain->add_option("--data", data, "Bundle path")->required();
  explain->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  explain->add_option("--top-k", top_k, "Prototypes per sheet");
  explain->add_option("--out", out, "Output directory")->required();
  explain->add_option("--limit", limit, "Only the first N samples (0 = all)");

  auto* metrics = app.add_subcommand("metrics", "Run the interpretability benchmark");
  metrics->add_option("--data", data, "Bundle path")->required();
  metrics->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  metrics->add_option("--suite", suite, "all, compactness, consistency, stability or faithfulness");
  metrics->add_option("--out", out, "Report JSON path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_synth(out, config, seed);
    if (*train) return cmd_train(data, config, out);
    if (*eval) return cmd_eval(data, ckpt, split);
    if (*explain) return cmd_explain(data, ckpt, top_k, out, limit);
    if (*metrics) return cmd_metrics(data, ckpt, suite, out);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
