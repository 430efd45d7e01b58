#include "protohead/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "protohead/errors.hpp"
#include "protohead/interpret.hpp"
#include "protohead/synth.hpp"
#include "protohead/tape.hpp"

namespace protohead {

namespace {

constexpr std::uint64_t kSplitTag = 20;
constexpr std::uint64_t kShuffleTag = 21;
constexpr std::uint64_t kViewTag = 22;
constexpr std::uint64_t kPartnerTag = 23;

Var param_var(const ParamVars& p, const std::string& name) {
  if (name == "projector.weight") return p.projector_weight;
  if (name == "projector.bias") return p.projector_bias;
  if (name == "prototypes.student") return p.student_prototypes;
  if (name == "prototypes.teacher") return p.teacher_prototypes;
  if (name == "classifier.raw") return p.classifier_raw;
  if (name == "slot_mlp.w1") return p.slot_w1;
  if (name == "slot_mlp.b1") return p.slot_b1;
  if (name == "slot_mlp.w2") return p.slot_w2;
  if (name == "slot_mlp.b2") return p.slot_b2;
  fail(ErrorCode::kInvariantViolation, "unknown parameter '" + name + "'");
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) fail(ErrorCode::kShapeMismatch, what);
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> train, std::uint32_t batch_size,
                                                   std::uint32_t epoch, std::uint64_t seed) {
  std::vector<std::size_t> order(train.begin(), train.end());
  auto rng = seeded_stream(seed, epoch, kShuffleTag);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    // A lone leftover sample has no partner for the inter-sample term.
    if (end - start < 2) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

std::size_t batches_per_epoch(std::size_t train_size, std::uint32_t batch_size) {
  const std::size_t full = train_size / batch_size;
  return full + (train_size % batch_size >= 2 ? 1 : 0);
}

}  // namespace

void adamw_step(Matrix& param, const Matrix& grad, Matrix& m, Matrix& v, std::uint64_t step, double lr, double wd,
                const AdamHyper& hyper) {
  require_same_shape(param, grad, "adamw: gradient shape differs from parameter");
  require_same_shape(param, m, "adamw: first moment shape differs from parameter");
  require_same_shape(param, v, "adamw: second moment shape differs from parameter");
  if (step == 0) fail(ErrorCode::kInvariantViolation, "adamw: step counts from 1");
  m = hyper.beta1 * m + (1.0 - hyper.beta1) * grad;
  v = hyper.beta2 * v + (1.0 - hyper.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
  param *= 1.0 - lr * wd;
  param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + hyper.eps);
}

double lr_schedule(std::uint64_t step, std::uint64_t total_steps, std::uint64_t warmup_steps, double base_lr) {
  if (step >= total_steps) return 0.0;
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double span = static_cast<double>(total_steps - warmup_steps);
  const double progress = static_cast<double>(step - warmup_steps) / span;
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void ema_update(Matrix& teacher, const Matrix& student, double momentum) {
  require_same_shape(teacher, student, "ema: teacher and student shapes differ");
  teacher = momentum * teacher + (1.0 - momentum) * student;
}

Split stratified_split(const EmbeddingBundle& bundle, double fraction, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(bundle.num_classes);
  for (std::size_t s = 0; s < bundle.samples.size(); ++s) by_class.at(bundle.samples[s].label).push_back(s);
  Split split;
  for (std::size_t d = 0; d < by_class.size(); ++d) {
    auto& members = by_class[d];
    auto rng = seeded_stream(seed, d, kSplitTag);
    std::shuffle(members.begin(), members.end(), rng);
    std::size_t n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    if (!members.empty()) n_val = std::min(n_val, members.size() - 1);
    split.val.insert(split.val.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_val));
    split.train.insert(split.train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_val), members.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  return split;
}

double accuracy(const HeadParams& params, const HeadConfig& cfg, const EmbeddingBundle& bundle,
                std::span<const std::size_t> indices) {
  if (indices.empty()) return 0.0;
  std::size_t correct = 0;
  for (auto s : indices) {
    if (infer(bundle.view_matrix(s), params, cfg).predicted == bundle.samples[s].label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

ViewPair training_views(const EmbeddingBundle& bundle, std::size_t sample, std::uint32_t epoch,
                        const AugmentConfig& aug, std::uint64_t seed) {
  if (bundle.num_views >= 2) {
    ViewPair pair;
    pair.first = bundle.view_matrix(sample, 0);
    pair.second = bundle.view_matrix(sample, 1);
    pair.geometry_first = {to_rect(bundle.samples[sample].views[0].crop), bundle.grid_h, bundle.grid_w};
    pair.geometry_second = {to_rect(bundle.samples[sample].views[1].crop), bundle.grid_h, bundle.grid_w};
    return pair;
  }
  auto rng = seeded_stream(seed, static_cast<std::uint64_t>(epoch) * bundle.samples.size() + sample, kViewTag);
  return make_views(bundle.view_matrix(sample), bundle.grid_h, bundle.grid_w, aug, rng());
}

nlohmann::json to_json(const EpochLog& log) {
  const auto& t = log.loss.terms;
  return {{"epoch", log.epoch},
          {"lr", log.lr},
          {"loss", {{"total", log.loss.total},
                    {"assignment", t.assignment},
                    {"alignment", t.alignment},
                    {"contrastive", t.contrastive},
                    {"sparsity", t.sparsity},
                    {"classification", t.classification}}},
          {"train_accuracy", log.train_accuracy},
          {"val_accuracy", log.val_accuracy},
          {"local_size", log.local_size},
          {"global_size", log.global_size}};
}

Checkpoint make_checkpoint(const HeadParams& params, const OptimizerState* optimizer, const RunConfig& cfg,
                           std::uint32_t epoch) {
  Checkpoint ckpt;
  ckpt.config = to_json(cfg);
  ckpt.epoch = epoch;
  ckpt.seed = cfg.train.seed;
  ckpt.tensors = to_tensors(params, cfg.head);
  if (optimizer) {
    auto add = [&](const std::string& prefix, const std::map<std::string, Matrix>& moments) {
      for (const auto& [name, m] : moments) {
        NamedTensor t{prefix + name,
                      {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())},
                      std::vector<float>(static_cast<std::size_t>(m.size()))};
        for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<float>(m.data()[i]);
        ckpt.tensors.push_back(std::move(t));
      }
    };
    add("adam.m.", optimizer->m);
    add("adam.v.", optimizer->v);
  }
  return ckpt;
}

FitResult fit(const EmbeddingBundle& bundle, const RunConfig& cfg, const FitOptions& options) {
  validate(cfg);
  validate(bundle);
  if (bundle.embed_dim != cfg.head.embed_dim) fail(ErrorCode::kShapeMismatch, "bundle embed_dim differs from the head config");
  if (bundle.num_classes != cfg.head.num_classes) fail(ErrorCode::kShapeMismatch, "bundle num_classes differs from the head config");
  const TrainConfig& tc = cfg.train;

  const Split split = stratified_split(bundle, tc.val_fraction, tc.seed);
  if (split.train.size() < 2) fail(ErrorCode::kBatchTooSmall, "fewer than two training samples");
  const std::size_t per_epoch = batches_per_epoch(split.train.size(), tc.batch_size);
  const std::uint64_t total_steps = per_epoch * tc.epochs;
  const std::uint64_t warmup_steps = per_epoch * tc.warmup_epochs;

  FitResult result;
  HeadParams params = HeadParams::initialize(cfg.head, tc.seed);
  OptimizerState& opt = result.optimizer;
  std::vector<ParamSlot> trainable;
  for (const ParamSlot& slot : parameter_layout(cfg.head)) {
    if (!slot.trainable) continue;
    trainable.push_back(slot);
    opt.m[slot.name] = Matrix::Zero(slot.shape.rows, slot.shape.cols);
    opt.v[slot.name] = Matrix::Zero(slot.shape.rows, slot.shape.cols);
  }
  result.best = params;

  const std::span<const std::size_t> eval_set = split.val.empty() ? std::span<const std::size_t>(split.train)
                                                                  : std::span<const std::size_t>(split.val);

  for (std::uint32_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    EpochLog log;
    log.epoch = epoch;
    double batches_seen = 0.0;
    double seen = 0.0;
    double correct = 0.0;
    auto partner_rng = seeded_stream(tc.seed, epoch, kPartnerTag);

    try {
      for (const auto& batch_idx : make_batches(split.train, tc.batch_size, epoch, tc.seed)) {
        std::vector<TrainItem> batch;
        batch.reserve(batch_idx.size());
        for (auto s : batch_idx) {
          batch.push_back({training_views(bundle, s, epoch, cfg.augment, tc.seed), bundle.samples[s].label});
        }
        const auto partners = draw_partners(batch.size(), cfg.loss.negatives, partner_rng);

        Tape tape;
        const ParamVars vars = bind_params(tape, params, true);
        const BatchObjective obj = build_objective(tape, vars, batch, partners, cfg.head, cfg.loss, cfg.alignment);
        tape.backward(obj.total);
        for (const auto& g : obj.graphs) {
          if (tape.requires_grad(g.features) || tape.requires_grad(g.features_other)) {
            fail(ErrorCode::kInvariantViolation, "gradient reached the frozen embeddings");
          }
        }

        const double lr = lr_schedule(opt.step, total_steps, warmup_steps, tc.base_lr);
        ++opt.step;
        for (const ParamSlot& slot : trainable) {
          const Var v = param_var(vars, slot.name);
          const Matrix& grad = tape.grad(v);
          const bool is_classifier = slot.name == "classifier.raw";
          const bool is_prototype = slot.name == "prototypes.student";
          const double slot_lr = is_classifier ? lr * tc.head_lr_multiplier : lr;
          const double wd = is_prototype && !tc.decay_prototypes ? 0.0 : tc.weight_decay;
          adamw_step(params.get(slot.name), grad, opt.m[slot.name], opt.v[slot.name], opt.step, slot_lr, wd);
        }
        ema_update(params.teacher_prototypes, params.student_prototypes, cfg.head.teacher_momentum);

        for (std::size_t i = 0; i < batch.size(); ++i) {
          const Matrix& logits = tape.value(obj.graphs[i].logits_s);
          const Vector row = logits.row(0).transpose();
          if (argmax(as_span(row)) == batch[i].label) correct += 1.0;
          seen += 1.0;
        }
        const auto& t = obj.report.terms;
        log.loss.total += obj.report.total;
        log.loss.terms.assignment += t.assignment;
        log.loss.terms.alignment += t.alignment;
        log.loss.terms.contrastive += t.contrastive;
        log.loss.terms.sparsity += t.sparsity;
        log.loss.terms.classification += t.classification;
        log.lr = lr;
        batches_seen += 1.0;
      }
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNonFiniteLoss && e.code() != ErrorCode::kNonFiniteTerm &&
          e.code() != ErrorCode::kNonFiniteValue) {
        throw;
      }
      result.aborted = true;
      result.abort_reason = e.what();
      break;
    }

    if (batches_seen > 0.0) {
      log.loss.total /= batches_seen;
      log.loss.terms.assignment /= batches_seen;
      log.loss.terms.alignment /= batches_seen;
      log.loss.terms.contrastive /= batches_seen;
      log.loss.terms.sparsity /= batches_seen;
      log.loss.terms.classification /= batches_seen;
    }
    log.train_accuracy = seen > 0.0 ? correct / seen : 0.0;
    log.val_accuracy = accuracy(params, cfg.head, bundle, eval_set);
    if (!options.light_logging) {
      const HeadModel model(params, cfg.head);
      std::vector<Explanation> explanations;
      for (auto s : eval_set) explanations.push_back(model.explain(bundle.view_matrix(s)));
      const Compactness c = compactness(explanations, model.class_weights(), 0.0);
      log.local_size = c.local_size;
      log.global_size = c.global_size;
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    if (log.val_accuracy >= result.best_val_accuracy) {
      result.best_val_accuracy = log.val_accuracy;
      result.best_epoch = epoch;
      result.best = params;
    }
    result.log.push_back(log);
    if (options.on_epoch) options.on_epoch(log);
  }
  result.last = std::move(params);
  return result;
}

}  // namespace protohead
