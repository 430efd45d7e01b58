#pragma once

#include <cstdint>
#include <vector>

#include "protohead/config.hpp"
#include "protohead/dataio.hpp"
#include "protohead/geometry.hpp"
#include "protohead/numerics.hpp"
#include "protohead/param_layout.hpp"
#include "protohead/tape.hpp"

namespace protohead {

// All head parameters. Only the prototypes have a teacher copy; the projector
// is shared by both branches.
struct HeadParams {
  Matrix projector_weight;    // c_z x c_f
  Matrix projector_bias;      // 1 x c_z
  Matrix student_prototypes;  // N x c_z
  Matrix teacher_prototypes;  // N x c_z, EMA of the student
  Matrix classifier_raw;      // D x N, used as max(raw, 0)
  Matrix slot_w1;             // c_z x c_z
  Matrix slot_b1;             // 1 x c_z
  Matrix slot_w2;             // c_z x c_z
  Matrix slot_b2;             // 1 x c_z

  static HeadParams initialize(const HeadConfig& cfg, std::uint64_t seed);

  Matrix& get(const std::string& name);
  const Matrix& get(const std::string& name) const;

  Matrix effective_weights() const { return classifier_raw.cwiseMax(0.0); }
};

std::vector<NamedTensor> to_tensors(const HeadParams& params, const HeadConfig& cfg);
// Reads the parameters (not optimizer moments) of a checkpoint.
HeadParams params_from_checkpoint(const Checkpoint& ckpt, const HeadConfig& cfg);

// Plain-value building blocks.
Matrix project(const Matrix& features, const Matrix& weight, const Matrix& bias);
Vector aggregate_presence(const Matrix& masks, std::size_t k);
struct Classification {
  Matrix importance;  // R, D x N
  Vector logits;      // y-bar, D
};
Classification classify(const Vector& presence, const Matrix& classifier_raw);
Matrix compute_slots(const Matrix& assignments, const Matrix& projections);
// indicator[n] = 1 iff n is the (first) argmax of some assignment row.
std::vector<std::uint8_t> dominance(const Matrix& assignments);

// Tape handles for the parameters of one graph.
struct ParamVars {
  Var projector_weight, projector_bias, student_prototypes, teacher_prototypes, classifier_raw;
  Var slot_w1, slot_b1, slot_w2, slot_b2;
};

// Trainable parameters become variables; the teacher prototypes are always
// constants.
ParamVars bind_params(Tape& tape, const HeadParams& params, bool trainable);

struct MaskVars {
  Var student;  // cos(sg(Z), student prototypes)
  Var teacher;  // cos(Z', sg(teacher prototypes))
};
MaskVars compute_masks(Tape& tape, const ParamVars& p, Var z, Var z_other);

// Nodes of the two-view training graph for one sample. Student branch reads
// the first view, teacher branch the second.
struct SampleGraph {
  Var features, features_other;  // constants: the backbone is frozen
  Var z, z_other;
  Var mask_s, mask_t;
  Var aligned_s, aligned_t;  // softmax of RoI-aligned masks, G x N
  Var assign_s, assign_t;    // I x N
  Var presence_s, presence_t;
  Var importance_s, importance_t;
  Var logits_s, logits_t;
  Var slots_s, slots_t;
  Var slot_proj_t;           // q(S^t)
  std::vector<std::uint8_t> dominant_s, dominant_t;
};

SampleGraph build_sample_graph(Tape& tape, const ParamVars& p, const ViewPair& views, const HeadConfig& cfg);

struct ForwardOutputs {
  Matrix z, z_other;
  Matrix mask_s, mask_t;
  Matrix aligned_s, aligned_t;
  Matrix assign_s, assign_t;
  Vector presence_s, presence_t;
  Matrix importance;  // student R
  Matrix importance_t;
  Vector logits_s, logits_t;
  Matrix slots_s, slots_t, slot_proj_t;
  std::vector<std::uint8_t> dominant_s, dominant_t;
};

ForwardOutputs forward(const ViewPair& views, const HeadParams& params, const HeadConfig& cfg);

// Single-view prediction with the configured branch.
struct Inference {
  Matrix masks;        // I x N
  Matrix assignments;  // I x N
  Vector presence;     // N
  Matrix importance;   // D x N
  Vector logits;       // D
  std::size_t predicted = 0;
};

Inference infer(const Matrix& features, const HeadParams& params, const HeadConfig& cfg);

}  // namespace protohead
