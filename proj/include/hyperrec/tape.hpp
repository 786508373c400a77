#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "hyperrec/sparse.hpp"
#include "hyperrec/tensor.hpp"

namespace hyperrec {

// Handle to a value slot on a Tape.
struct Var {
  int slot = -1;
  bool valid() const { return slot >= 0; }
};

// Zero guard for pseudo-inverse style maps (x^{-1/2}, x^{-1}, row normalize).
inline constexpr double kGuard = 1e-12;
inline constexpr double kLayerNormEps = 1e-6;

using IndexVec = std::vector<int64_t>;
using IndexVecPtr = std::shared_ptr<const IndexVec>;
// Offsets of contiguous segments: offsets[0..nseg], offsets[0] == 0.
using SpansPtr = std::shared_ptr<const IndexVec>;

// Positions for group-wise permutation scatter: each group g writes its i-th
// element to out[positions[g][i]]; positions must form a bijection onto the
// output index range.
struct ScatterGroups {
  std::vector<IndexVec> positions;
};
using ScatterGroupsPtr = std::shared_ptr<const ScatterGroups>;

// Eager tape for reverse-mode differentiation. Operations execute immediately
// and are recorded in issue order, so inputs always precede consumers and one
// reverse sweep visits every node exactly once. Values are immutable once
// written; a tape is single-writer, independent tapes may run concurrently.
class Tape {
 public:
  // Gradient-tracked input; the tensor is copied onto the tape.
  Var leaf(const Tensor& value);
  // Untracked input.
  Var constant(Tensor value);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  // m [n,d] + v [d] broadcast over rows
  Var add_rowvec(Var m, Var v);
  // m [n,d] row i scaled by d[i]
  Var scale_rows(Var m, Var d);
  // m * s with s a tracked scalar
  Var scale_by(Var m, Var s);

  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var reshape(Var a, std::vector<int64_t> shape);

  Var tanh(Var a);
  Var sigmoid(Var a);
  Var leaky_relu(Var a, double slope);
  Var softplus(Var a);
  Var rsqrt_guard(Var a);
  Var recip_guard(Var a);

  Var softmax_rows(Var a);
  Var logsumexp_rows(Var a);
  Var layer_norm_rows(Var a);
  Var normalize_rows(Var a);

  Var concat0(const std::vector<Var>& xs);
  Var reduce_sum(Var a);
  Var reduce_mean(Var a);
  Var sum_rows(Var a);
  Var l2_norm_sq(Var a);

  Var gather_rows(Var m, IndexVecPtr idx);
  Var diag_part(Var m);
  Var element(Var v, int64_t i);
  Var scatter_groups(const std::vector<Var>& parts, ScatterGroupsPtr groups, int64_t out_size);
  Var segment_softmax(Var v, SpansPtr offsets);
  Var segment_sum(Var v, SpansPtr offsets);

  Var spmm_const(std::shared_ptr<const SparseMatrix> s, Var x);
  // y [rows,d] = A(vals) * x with A's structure given by the pattern
  Var spmm(std::shared_ptr<const SparsePattern> p, Var vals, Var x);
  // y [cols,d] = A(vals)^T * x
  Var spmm_t(std::shared_ptr<const SparsePattern> p, Var vals, Var x);
  Var sp_row_sums(std::shared_ptr<const SparsePattern> p, Var vals);
  Var sp_col_sums(std::shared_ptr<const SparsePattern> p, Var vals);
  // out[k] = dot(x[row_k,:], y[col_k,:]) over pattern entries
  Var pair_dot(std::shared_ptr<const SparsePattern> p, Var x, Var y);

  // Clears all adjoints, then accumulates d loss / d slot for every recorded
  // slot. `loss` must be a scalar.
  void backward(Var loss);

  const Tensor& value(Var v) const { return values_.at(static_cast<size_t>(v.slot)); }
  // Adjoint of a slot; zeros if the slot does not influence the loss.
  const Tensor& grad(Var v);
  size_t size() const { return nodes_.size(); }

 private:
  enum class Op {
    kLeaf, kConstant, kAdd, kSub, kMul, kScale, kAddRowVec, kScaleRows, kScaleBy,
    kMatmul, kTranspose, kReshape, kTanh, kSigmoid, kLeakyRelu, kSoftplus,
    kRsqrtGuard, kRecipGuard, kSoftmaxRows, kLogsumexpRows, kLayerNormRows,
    kNormalizeRows, kConcat0, kReduceSum, kReduceMean, kSumRows, kL2NormSq,
    kGatherRows, kDiagPart, kElement, kScatterGroups, kSegmentSoftmax,
    kSegmentSum, kSpmmConst, kSpmm, kSpmmT, kSpRowSums, kSpColSums, kPairDot,
  };

  struct Node {
    Op op;
    std::vector<int> ins;
    int out = -1;
    double a = 0.0;
    std::shared_ptr<const SparsePattern> pattern;
    std::shared_ptr<const SparseMatrix> smat;
    IndexVecPtr idx;
    ScatterGroupsPtr groups;
  };

  int push_value(Tensor t, bool track);
  Var record(Op op, std::vector<int> ins, Tensor out, double a = 0.0,
             std::shared_ptr<const SparsePattern> pattern = nullptr,
             std::shared_ptr<const SparseMatrix> smat = nullptr, IndexVecPtr idx = nullptr,
             ScatterGroupsPtr groups = nullptr);
  void backward_node(const Node& n);
  Tensor& grad_buf(int slot);
  bool tracked(int slot) const { return tracked_[static_cast<size_t>(slot)]; }
  const Tensor& val(int slot) const { return values_[static_cast<size_t>(slot)]; }

  std::vector<Tensor> values_;
  std::vector<Tensor> grads_;   // empty tensor until touched
  std::vector<char> tracked_;
  std::vector<Node> nodes_;
};

}  // namespace hyperrec
