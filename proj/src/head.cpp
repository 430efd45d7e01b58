#include "protohead/head.hpp"

#include <random>

#include "protohead/errors.hpp"

namespace protohead {
namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

Matrix widen(const NamedTensor& t) {
  Matrix m(t.shape.rows, t.shape.cols);
  for (std::size_t i = 0; i < t.data.size(); ++i) m.data()[i] = t.data[i];
  return m;
}

}  // namespace

std::vector<ParamSlot> parameter_layout(const HeadConfig& cfg) {
  const std::uint32_t cz = cfg.projection_dim;
  return {
      {"projector.weight", {cz, cfg.embed_dim}, true},
      {"projector.bias", {1, cz}, true},
      {"prototypes.student", {cfg.num_prototypes, cz}, true},
      {"prototypes.teacher", {cfg.num_prototypes, cz}, false},
      {"classifier.raw", {cfg.num_classes, cfg.num_prototypes}, true},
      {"slot_mlp.w1", {cz, cz}, true},
      {"slot_mlp.b1", {1, cz}, true},
      {"slot_mlp.w2", {cz, cz}, true},
      {"slot_mlp.b2", {1, cz}, true},
  };
}

HeadParams HeadParams::initialize(const HeadConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  std::mt19937_64 rng(seed);
  const Eigen::Index cz = cfg.projection_dim;
  HeadParams p;
  p.projector_weight = gaussian(cz, cfg.embed_dim, 1.0 / std::sqrt(double(cfg.embed_dim)), rng);
  p.projector_bias = Matrix::Zero(1, cz);
  p.student_prototypes = gaussian(cfg.num_prototypes, cz, 1.0, rng);
  p.teacher_prototypes = p.student_prototypes;
  std::uniform_real_distribution<double> small(0.0, cfg.classifier_init);
  p.classifier_raw.resize(cfg.num_classes, cfg.num_prototypes);
  for (Eigen::Index i = 0; i < p.classifier_raw.size(); ++i) p.classifier_raw.data()[i] = small(rng);
  p.slot_w1 = gaussian(cz, cz, 1.0 / std::sqrt(double(cz)), rng);
  p.slot_b1 = Matrix::Zero(1, cz);
  p.slot_w2 = gaussian(cz, cz, 1.0 / std::sqrt(double(cz)), rng);
  p.slot_b2 = Matrix::Zero(1, cz);
  return p;
}

Matrix& HeadParams::get(const std::string& name) {
  return const_cast<Matrix&>(std::as_const(*this).get(name));
}

const Matrix& HeadParams::get(const std::string& name) const {
  if (name == "projector.weight") return projector_weight;
  if (name == "projector.bias") return projector_bias;
  if (name == "prototypes.student") return student_prototypes;
  if (name == "prototypes.teacher") return teacher_prototypes;
  if (name == "classifier.raw") return classifier_raw;
  if (name == "slot_mlp.w1") return slot_w1;
  if (name == "slot_mlp.b1") return slot_b1;
  if (name == "slot_mlp.w2") return slot_w2;
  if (name == "slot_mlp.b2") return slot_b2;
  fail(ErrorCode::kShapeMismatch, "unknown parameter '" + name + "'");
}

std::vector<NamedTensor> to_tensors(const HeadParams& params, const HeadConfig& cfg) {
  std::vector<NamedTensor> out;
  for (const ParamSlot& slot : parameter_layout(cfg)) {
    const Matrix& m = params.get(slot.name);
    if (m.rows() != slot.shape.rows || m.cols() != slot.shape.cols) {
      fail(ErrorCode::kShapeMismatch, "parameter '" + slot.name + "' does not match the config");
    }
    NamedTensor t{slot.name, slot.shape, std::vector<float>(static_cast<std::size_t>(m.size()))};
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<float>(m.data()[i]);
    out.push_back(std::move(t));
  }
  return out;
}

HeadParams params_from_checkpoint(const Checkpoint& ckpt, const HeadConfig& cfg) {
  HeadParams p;
  for (const ParamSlot& slot : parameter_layout(cfg)) {
    const NamedTensor* t = ckpt.find(slot.name);
    if (!t) fail(ErrorCode::kShapeMismatch, "checkpoint lacks '" + slot.name + "'");
    if (!(t->shape == slot.shape)) fail(ErrorCode::kShapeMismatch, "'" + slot.name + "' shape disagrees with the config");
    p.get(slot.name) = widen(*t);
  }
  return p;
}

Matrix project(const Matrix& features, const Matrix& weight, const Matrix& bias) {
  if (features.cols() != weight.cols() || bias.rows() != 1 || bias.cols() != weight.rows()) {
    fail(ErrorCode::kShapeMismatch, "projector shapes do not match the features");
  }
  Matrix z = features * weight.transpose();
  z.rowwise() += bias.row(0);
  return z;
}

Vector aggregate_presence(const Matrix& masks, std::size_t k) { return topk_mean_cols(masks, k); }

Classification classify(const Vector& presence, const Matrix& classifier_raw) {
  if (classifier_raw.cols() != presence.size()) fail(ErrorCode::kShapeMismatch, "classifier width differs from prototype count");
  Classification c;
  c.importance = classifier_raw.cwiseMax(0.0).array().rowwise() * presence.transpose().array();
  c.logits = c.importance.rowwise().sum();
  return c;
}

Matrix compute_slots(const Matrix& assignments, const Matrix& projections) {
  Tape tape;
  return tape.value(ops::weighted_slots(tape, tape.constant(assignments), tape.constant(projections)));
}

std::vector<std::uint8_t> dominance(const Matrix& assignments) {
  std::vector<std::uint8_t> indicator(static_cast<std::size_t>(assignments.cols()), 0);
  for (Eigen::Index i = 0; i < assignments.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index n = 1; n < assignments.cols(); ++n) {
      if (assignments(i, n) > assignments(i, best)) best = n;
    }
    indicator[static_cast<std::size_t>(best)] = 1;
  }
  return indicator;
}

ParamVars bind_params(Tape& tape, const HeadParams& params, bool trainable) {
  auto bind = [&](const Matrix& m) { return trainable ? tape.variable(m) : tape.constant(m); };
  ParamVars p;
  p.projector_weight = bind(params.projector_weight);
  p.projector_bias = bind(params.projector_bias);
  p.student_prototypes = bind(params.student_prototypes);
  p.teacher_prototypes = tape.constant(params.teacher_prototypes);
  p.classifier_raw = bind(params.classifier_raw);
  p.slot_w1 = bind(params.slot_w1);
  p.slot_b1 = bind(params.slot_b1);
  p.slot_w2 = bind(params.slot_w2);
  p.slot_b2 = bind(params.slot_b2);
  return p;
}

MaskVars compute_masks(Tape& tape, const ParamVars& p, Var z, Var z_other) {
  return MaskVars{ops::cosine_rows(tape, ops::detach(tape, z), p.student_prototypes),
                  ops::cosine_rows(tape, z_other, ops::detach(tape, p.teacher_prototypes))};
}

SampleGraph build_sample_graph(Tape& tape, const ParamVars& p, const ViewPair& views, const HeadConfig& cfg) {
  if (views.first.cols() != cfg.embed_dim || views.second.cols() != cfg.embed_dim) {
    fail(ErrorCode::kShapeMismatch, "view embedding width differs from head.embed_dim");
  }
  SampleGraph g;
  g.features = tape.constant(views.first);
  g.features_other = tape.constant(views.second);
  g.z = ops::add_row(tape, ops::matmul_bt(tape, g.features, p.projector_weight), p.projector_bias);
  g.z_other = ops::add_row(tape, ops::matmul_bt(tape, g.features_other, p.projector_weight), p.projector_bias);

  const MaskVars masks = compute_masks(tape, p, g.z, g.z_other);
  g.mask_s = masks.student;
  g.mask_t = masks.teacher;

  const Rect roi = overlap_region(views.geometry_first, views.geometry_second);
  const SparseMap map_s = roi_align_map(views.geometry_first, roi, cfg.aligned_grid, cfg.aligned_grid);
  const SparseMap map_t = roi_align_map(views.geometry_second, roi, cfg.aligned_grid, cfg.aligned_grid);
  g.aligned_s = ops::softmax_rows(tape, ops::apply_map(tape, map_s, g.mask_s), cfg.temperature);
  g.aligned_t = ops::softmax_rows(tape, ops::apply_map(tape, map_t, g.mask_t), cfg.temperature);
  g.assign_s = ops::softmax_rows(tape, g.mask_s, cfg.temperature);
  g.assign_t = ops::softmax_rows(tape, g.mask_t, cfg.temperature);

  g.presence_s = ops::topk_mean_cols(tape, g.mask_s, cfg.top_k);
  g.presence_t = ops::topk_mean_cols(tape, g.mask_t, cfg.top_k);
  const Var weights = ops::relu(tape, p.classifier_raw);
  g.importance_s = ops::scale_cols(tape, weights, g.presence_s);
  g.importance_t = ops::scale_cols(tape, weights, g.presence_t);
  g.logits_s = ops::row_sums(tape, g.importance_s);
  g.logits_t = ops::row_sums(tape, g.importance_t);

  g.slots_s = ops::weighted_slots(tape, g.assign_s, g.z);
  g.slots_t = ops::weighted_slots(tape, g.assign_t, g.z_other);
  const Var hidden = ops::relu(tape, ops::add_row(tape, ops::matmul_bt(tape, g.slots_t, p.slot_w1), p.slot_b1));
  g.slot_proj_t = ops::add_row(tape, ops::matmul_bt(tape, hidden, p.slot_w2), p.slot_b2);

  g.dominant_s = dominance(tape.value(g.assign_s));
  g.dominant_t = dominance(tape.value(g.assign_t));
  return g;
}

ForwardOutputs forward(const ViewPair& views, const HeadParams& params, const HeadConfig& cfg) {
  require_finite(views.first, "first view");
  require_finite(views.second, "second view");
  Tape tape;
  const ParamVars p = bind_params(tape, params, false);
  const SampleGraph g = build_sample_graph(tape, p, views, cfg);
  auto row = [&](Var v) -> Vector { return tape.value(v).row(0).transpose(); };
  ForwardOutputs out;
  out.z = tape.value(g.z);
  out.z_other = tape.value(g.z_other);
  out.mask_s = tape.value(g.mask_s);
  out.mask_t = tape.value(g.mask_t);
  out.aligned_s = tape.value(g.aligned_s);
  out.aligned_t = tape.value(g.aligned_t);
  out.assign_s = tape.value(g.assign_s);
  out.assign_t = tape.value(g.assign_t);
  out.presence_s = row(g.presence_s);
  out.presence_t = row(g.presence_t);
  out.importance = tape.value(g.importance_s);
  out.importance_t = tape.value(g.importance_t);
  out.logits_s = row(g.logits_s);
  out.logits_t = row(g.logits_t);
  out.slots_s = tape.value(g.slots_s);
  out.slots_t = tape.value(g.slots_t);
  out.slot_proj_t = tape.value(g.slot_proj_t);
  out.dominant_s = g.dominant_s;
  out.dominant_t = g.dominant_t;
  return out;
}

Inference infer(const Matrix& features, const HeadParams& params, const HeadConfig& cfg) {
  require_finite(features, "features");
  const Matrix& prototypes =
      cfg.inference_branch == Branch::kStudent ? params.student_prototypes : params.teacher_prototypes;
  Inference out;
  out.masks = cosine_rows(project(features, params.projector_weight, params.projector_bias), prototypes);
  out.assignments = softmax_rows(out.masks, cfg.temperature);
  out.presence = aggregate_presence(out.masks, cfg.top_k);
  Classification c = classify(out.presence, params.classifier_raw);
  out.importance = std::move(c.importance);
  out.logits = std::move(c.logits);
  out.predicted = argmax(as_span(out.logits));
  return out;
}

}  // namespace protohead
