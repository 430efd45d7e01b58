#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "protohead/numerics.hpp"

namespace protohead {

// Handle to a node recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

// Minimal reverse-mode tape over dense matrices. Every recorded node keeps its
// value; gradients are allocated lazily during backward(). Single use: record
// a graph, call backward() once on a 1x1 output, read leaf gradients.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& out, const Matrix& grad_out)>;

  Var constant(Matrix value);
  Var variable(Matrix value);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Zero matrix if no gradient reached v.
  Matrix grad(Var v) const;

  void backward(Var output);

  // For op implementations: record a node whose gradient is routed by fn.
  Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn fn);
  Var record(Matrix value, std::span<const Var> parents, BackwardFn fn);
  // Accumulation target for a parent's gradient; nullptr if it needs none.
  Matrix* grad_target(Var v);

  std::size_t size() const { return nodes_.size(); }

  // Stop-gradient values in the order ops::detach produced them (recorded only
  // after track_detached()). Pinning them on a fresh tape makes its detach
  // calls replay those values, so finite differences see the same surrogate
  // objective that backward() differentiates.
  void track_detached() { track_detached_ = true; }
  const std::vector<Matrix>& detached() const { return detached_; }
  void pin_detached(std::vector<Matrix> values) { pinned_ = std::move(values); }
  Var detach(Var x);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::vector<Matrix> detached_;
  std::vector<Matrix> pinned_;
  std::size_t detach_calls_ = 0;
  bool track_detached_ = false;
};

// Differentiable kernels used by the head and its objective. Shapes follow the
// row-major conventions of the head: patches are rows, prototypes are columns.
namespace ops {

Var detach(Tape& t, Var x);
Var matmul_bt(Tape& t, Var x, Var w);           // x * w^T
Var add_row(Tape& t, Var x, Var bias);          // bias is 1 x cols
Var relu(Tape& t, Var x);
Var cosine_rows(Tape& t, Var a, Var b);
Var unit_rows(Tape& t, Var x);                  // rows scaled to unit length
Var softmax_rows(Tape& t, Var m, double tau);
Var apply_map(Tape& t, const SparseMap& map, Var x);  // map * x
Var topk_mean_cols(Tape& t, Var m, std::size_t k);     // 1 x cols
Var scale_cols(Tape& t, Var w, Var h);          // w(d, n) * h(0, n)
Var row_sums(Tape& t, Var r);                   // 1 x rows
// Assignment-weighted mean of z rows per column of a: result(n) =
// sum_i a(i, n) z(i) / sum_i a(i, n); columns with mass below 1e-12 yield 0.
Var weighted_slots(Tape& t, Var a, Var z);
// Sum of weights[j] * scalars[j] as a 1x1 node.
Var weighted_sum(Tape& t, std::span<const Var> scalars, std::span<const double> weights);

}  // namespace ops
}  // namespace protohead
