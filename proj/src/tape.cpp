#include "hyperrec/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "hyperrec/kernels.hpp"

namespace hyperrec {

namespace {

[[noreturn]] void fail(const char* op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail);
}

void need_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) fail(op, "shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

void need_matrix(const char* op, const Tensor& t) {
  if (t.rank() != 2) fail(op, "expected a matrix, got " + t.shape_string());
}

void need_vector(const char* op, const Tensor& t) {
  if (t.rank() != 1) fail(op, "expected a vector, got " + t.shape_string());
}

}  // namespace

int Tape::push_value(Tensor t, bool track) {
  values_.push_back(std::move(t));
  grads_.emplace_back();
  tracked_.push_back(track ? 1 : 0);
  return static_cast<int>(values_.size()) - 1;
}

Var Tape::record(Op op, std::vector<int> ins, Tensor out, double a,
                 std::shared_ptr<const SparsePattern> pattern,
                 std::shared_ptr<const SparseMatrix> smat, IndexVecPtr idx,
                 ScatterGroupsPtr groups) {
  bool track = false;
  for (int s : ins) track = track || tracked(s);
  int slot = push_value(std::move(out), track);
  Node n;
  n.op = op;
  n.ins = std::move(ins);
  n.out = slot;
  n.a = a;
  n.pattern = std::move(pattern);
  n.smat = std::move(smat);
  n.idx = std::move(idx);
  n.groups = std::move(groups);
  nodes_.push_back(std::move(n));
  return Var{slot};
}

Var Tape::leaf(const Tensor& value) {
  int slot = push_value(value, true);
  nodes_.push_back(Node{Op::kLeaf, {}, slot, 0.0, nullptr, nullptr, nullptr, nullptr});
  return Var{slot};
}

Var Tape::constant(Tensor value) {
  int slot = push_value(std::move(value), false);
  nodes_.push_back(Node{Op::kConstant, {}, slot, 0.0, nullptr, nullptr, nullptr, nullptr});
  return Var{slot};
}

Var Tape::add(Var a, Var b) {
  const Tensor &x = val(a.slot), &y = val(b.slot);
  need_same_shape("add", x, y);
  Tensor out(x.shape());
  kern::add(x.numel(), x.data(), y.data(), out.data());
  return record(Op::kAdd, {a.slot, b.slot}, std::move(out));
}

Var Tape::sub(Var a, Var b) {
  const Tensor &x = val(a.slot), &y = val(b.slot);
  need_same_shape("sub", x, y);
  Tensor out(x.shape());
  kern::sub(x.numel(), x.data(), y.data(), out.data());
  return record(Op::kSub, {a.slot, b.slot}, std::move(out));
}

Var Tape::mul(Var a, Var b) {
  const Tensor &x = val(a.slot), &y = val(b.slot);
  need_same_shape("mul", x, y);
  Tensor out(x.shape());
  kern::mul(x.numel(), x.data(), y.data(), out.data());
  return record(Op::kMul, {a.slot, b.slot}, std::move(out));
}

Var Tape::scale(Var a, double c) {
  const Tensor& x = val(a.slot);
  Tensor out(x.shape());
  kern::scale(x.numel(), c, x.data(), out.data());
  return record(Op::kScale, {a.slot}, std::move(out), c);
}

Var Tape::add_rowvec(Var m, Var v) {
  const Tensor &x = val(m.slot), &b = val(v.slot);
  need_matrix("add_rowvec", x);
  need_vector("add_rowvec", b);
  if (x.cols() != b.numel()) {
    fail("add_rowvec", "matrix " + x.shape_string() + " vs vector " + b.shape_string());
  }
  Tensor out(x.shape());
  int64_t rows = x.rows(), cols = x.cols();
  for (int64_t i = 0; i < rows; ++i) {
    kern::add(cols, x.data() + i * cols, b.data(), out.data() + i * cols);
  }
  return record(Op::kAddRowVec, {m.slot, v.slot}, std::move(out));
}

Var Tape::scale_rows(Var m, Var d) {
  const Tensor &x = val(m.slot), &s = val(d.slot);
  need_matrix("scale_rows", x);
  need_vector("scale_rows", s);
  if (x.rows() != s.numel()) {
    fail("scale_rows", "matrix " + x.shape_string() + " vs scale vector " + s.shape_string());
  }
  Tensor out(x.shape());
  kern::scale_rows(x.rows(), x.cols(), x.data(), s.data(), out.data());
  return record(Op::kScaleRows, {m.slot, d.slot}, std::move(out));
}

Var Tape::scale_by(Var m, Var s) {
  const Tensor &x = val(m.slot), &c = val(s.slot);
  if (c.numel() != 1) fail("scale_by", "scale must be a scalar, got " + c.shape_string());
  Tensor out(x.shape());
  kern::scale(x.numel(), c.item(), x.data(), out.data());
  return record(Op::kScaleBy, {m.slot, s.slot}, std::move(out));
}

Var Tape::matmul(Var a, Var b) {
  const Tensor &x = val(a.slot), &y = val(b.slot);
  need_matrix("matmul", x);
  need_matrix("matmul", y);
  if (x.cols() != y.rows()) {
    fail("matmul", "inner extents differ (" + x.shape_string() + " * " + y.shape_string() + ")");
  }
  Tensor out({x.rows(), y.cols()});
  kern::matmul_nn(x.rows(), x.cols(), y.cols(), x.data(), y.data(), out.data());
  return record(Op::kMatmul, {a.slot, b.slot}, std::move(out));
}

Var Tape::transpose(Var a) {
  const Tensor& x = val(a.slot);
  need_matrix("transpose", x);
  Tensor out({x.cols(), x.rows()});
  for (int64_t i = 0; i < x.rows(); ++i) {
    for (int64_t j = 0; j < x.cols(); ++j) out.at(j, i) = x.at(i, j);
  }
  return record(Op::kTranspose, {a.slot}, std::move(out));
}

Var Tape::reshape(Var a, std::vector<int64_t> shape) {
  const Tensor& x = val(a.slot);
  Tensor out(std::move(shape), x.vec());
  return record(Op::kReshape, {a.slot}, std::move(out));
}

Var Tape::tanh(Var a) {
  const Tensor& x = val(a.slot);
  Tensor out(x.shape());
  kern::tanh_map(x.numel(), x.data(), out.data());
  return record(Op::kTanh, {a.slot}, std::move(out));
}

Var Tape::sigmoid(Var a) {
  const Tensor& x = val(a.slot);
  Tensor out(x.shape());
  kern::sigmoid_map(x.numel(), x.data(), out.data());
  return record(Op::kSigmoid, {a.slot}, std::move(out));
}

Var Tape::leaky_relu(Var a, double slope) {
  const Tensor& x = val(a.slot);
  Tensor out(x.shape());
  kern::leaky_relu_map(x.numel(), slope, x.data(), out.data());
  return record(Op::kLeakyRelu, {a.slot}, std::move(out), slope);
}

Var Tape::softplus(Var a) {
  const Tensor& x = val(a.slot);
  Tensor out(x.shape());
  kern::softplus_map(x.numel(), x.data(), out.data());
  return record(Op::kSoftplus, {a.slot}, std::move(out));
}

Var Tape::rsqrt_guard(Var a) {
  const Tensor& x = val(a.slot);
  Tensor out(x.shape());
  kern::rsqrt_guard_map(x.numel(), kGuard, x.data(), out.data());
  return record(Op::kRsqrtGuard, {a.slot}, std::move(out));
}

Var Tape::recip_guard(Var a) {
  const Tensor& x = val(a.slot);
  Tensor out(x.shape());
  kern::recip_guard_map(x.numel(), kGuard, x.data(), out.data());
  return record(Op::kRecipGuard, {a.slot}, std::move(out));
}

Var Tape::softmax_rows(Var a) {
  const Tensor& x = val(a.slot);
  if (x.rank() != 1 && x.rank() != 2) fail("softmax_rows", "rank must be 1 or 2, got " + x.shape_string());
  Tensor out(x.shape());
  kern::softmax_rows(x.rows(), x.cols(), x.data(), out.data());
  return record(Op::kSoftmaxRows, {a.slot}, std::move(out));
}

Var Tape::logsumexp_rows(Var a) {
  const Tensor& x = val(a.slot);
  need_matrix("logsumexp_rows", x);
  Tensor out({x.rows()});
  kern::logsumexp_rows(x.rows(), x.cols(), x.data(), out.data());
  return record(Op::kLogsumexpRows, {a.slot}, std::move(out));
}

Var Tape::layer_norm_rows(Var a) {
  const Tensor& x = val(a.slot);
  need_matrix("layer_norm_rows", x);
  Tensor out(x.shape());
  kern::layer_norm_rows(x.rows(), x.cols(), kLayerNormEps, x.data(), out.data());
  return record(Op::kLayerNormRows, {a.slot}, std::move(out));
}

Var Tape::normalize_rows(Var a) {
  const Tensor& x = val(a.slot);
  need_matrix("normalize_rows", x);
  Tensor out(x.shape());
  kern::normalize_rows(x.rows(), x.cols(), kGuard, x.data(), out.data());
  return record(Op::kNormalizeRows, {a.slot}, std::move(out));
}

Var Tape::concat0(const std::vector<Var>& xs) {
  if (xs.empty()) fail("concat0", "no inputs");
  const Tensor& first = val(xs[0].slot);
  int64_t rank = first.rank();
  if (rank != 1 && rank != 2) fail("concat0", "rank must be 1 or 2, got " + first.shape_string());
  int64_t total_rows = 0;
  std::vector<int> ins;
  for (Var v : xs) {
    const Tensor& t = val(v.slot);
    if (t.rank() != rank || (rank == 2 && t.cols() != first.cols())) {
      fail("concat0", "incompatible piece " + t.shape_string() + " vs " + first.shape_string());
    }
    total_rows += rank == 2 ? t.rows() : t.numel();
    ins.push_back(v.slot);
  }
  Tensor out(rank == 2 ? std::vector<int64_t>{total_rows, first.cols()}
                       : std::vector<int64_t>{total_rows});
  double* dst = out.data();
  for (Var v : xs) {
    const Tensor& t = val(v.slot);
    std::copy(t.data(), t.data() + t.numel(), dst);
    dst += t.numel();
  }
  return record(Op::kConcat0, std::move(ins), std::move(out));
}

Var Tape::reduce_sum(Var a) {
  const Tensor& x = val(a.slot);
  return record(Op::kReduceSum, {a.slot}, Tensor::scalar(kern::block_sum(x.numel(), x.data())));
}

Var Tape::reduce_mean(Var a) {
  const Tensor& x = val(a.slot);
  if (x.numel() == 0) fail("reduce_mean", "empty input");
  double s = kern::block_sum(x.numel(), x.data()) / static_cast<double>(x.numel());
  return record(Op::kReduceMean, {a.slot}, Tensor::scalar(s));
}

Var Tape::sum_rows(Var a) {
  const Tensor& x = val(a.slot);
  need_matrix("sum_rows", x);
  Tensor out({x.rows()});
  kern::sum_rows(x.rows(), x.cols(), x.data(), out.data());
  return record(Op::kSumRows, {a.slot}, std::move(out));
}

Var Tape::l2_norm_sq(Var a) {
  const Tensor& x = val(a.slot);
  return record(Op::kL2NormSq, {a.slot},
                Tensor::scalar(kern::block_dot(x.numel(), x.data(), x.data())));
}

Var Tape::gather_rows(Var m, IndexVecPtr idx) {
  const Tensor& x = val(m.slot);
  need_matrix("gather_rows", x);
  for (int64_t i : *idx) {
    if (i < 0 || i >= x.rows()) {
      fail("gather_rows", "row " + std::to_string(i) + " out of range [0," +
                              std::to_string(x.rows()) + ")");
    }
  }
  int64_t k = static_cast<int64_t>(idx->size());
  Tensor out({k, x.cols()});
  kern::gather_rows(k, x.cols(), idx->data(), x.data(), out.data());
  return record(Op::kGatherRows, {m.slot}, std::move(out), 0.0, nullptr, nullptr, std::move(idx));
}

Var Tape::diag_part(Var m) {
  const Tensor& x = val(m.slot);
  need_matrix("diag_part", x);
  if (x.rows() != x.cols()) fail("diag_part", "matrix not square " + x.shape_string());
  Tensor out({x.rows()});
  for (int64_t i = 0; i < x.rows(); ++i) out.at(i) = x.at(i, i);
  return record(Op::kDiagPart, {m.slot}, std::move(out));
}

Var Tape::element(Var v, int64_t i) {
  const Tensor& x = val(v.slot);
  if (i < 0 || i >= x.numel()) {
    fail("element", "index " + std::to_string(i) + " out of range for " + x.shape_string());
  }
  return record(Op::kElement, {v.slot}, Tensor::scalar(x.at(i)), static_cast<double>(i));
}

Var Tape::scatter_groups(const std::vector<Var>& parts, ScatterGroupsPtr groups,
                         int64_t out_size) {
  if (parts.size() != groups->positions.size()) {
    fail("scatter_groups", "have " + std::to_string(parts.size()) + " parts but " +
                               std::to_string(groups->positions.size()) + " position groups");
  }
  Tensor out({out_size});
  std::vector<char> seen(static_cast<size_t>(out_size), 0);
  std::vector<int> ins;
  for (size_t g = 0; g < parts.size(); ++g) {
    const Tensor& src = val(parts[g].slot);
    const IndexVec& pos = groups->positions[g];
    if (src.numel() != static_cast<int64_t>(pos.size())) {
      fail("scatter_groups", "group " + std::to_string(g) + " size mismatch");
    }
    for (size_t i = 0; i < pos.size(); ++i) {
      int64_t p = pos[i];
      if (p < 0 || p >= out_size || seen[static_cast<size_t>(p)]) {
        fail("scatter_groups", "positions are not a bijection at " + std::to_string(p));
      }
      seen[static_cast<size_t>(p)] = 1;
      out.at(p) = src.at(static_cast<int64_t>(i));
    }
    ins.push_back(parts[g].slot);
  }
  if (std::count(seen.begin(), seen.end(), 1) != out_size) {
    fail("scatter_groups", "positions do not cover the output");
  }
  return record(Op::kScatterGroups, std::move(ins), std::move(out), 0.0, nullptr, nullptr, nullptr,
                std::move(groups));
}

namespace {
void need_offsets(const char* op, const IndexVec& off, int64_t n) {
  if (off.empty() || off.front() != 0 || off.back() != n) {
    fail(op, "segment offsets must start at 0 and end at " + std::to_string(n));
  }
  for (size_t i = 1; i < off.size(); ++i) {
    if (off[i] < off[i - 1]) fail(op, "segment offsets must be non-decreasing");
  }
}
}  // namespace

Var Tape::segment_softmax(Var v, SpansPtr offsets) {
  const Tensor& x = val(v.slot);
  need_vector("segment_softmax", x);
  need_offsets("segment_softmax", *offsets, x.numel());
  Tensor out(x.shape());
  kern::segment_softmax(static_cast<int64_t>(offsets->size()) - 1, offsets->data(), x.data(),
                        out.data());
  return record(Op::kSegmentSoftmax, {v.slot}, std::move(out), 0.0, nullptr, nullptr,
                std::move(offsets));
}

Var Tape::segment_sum(Var v, SpansPtr offsets) {
  const Tensor& x = val(v.slot);
  need_vector("segment_sum", x);
  need_offsets("segment_sum", *offsets, x.numel());
  int64_t nseg = static_cast<int64_t>(offsets->size()) - 1;
  Tensor out({nseg});
  kern::segment_sum(nseg, offsets->data(), x.data(), out.data());
  return record(Op::kSegmentSum, {v.slot}, std::move(out), 0.0, nullptr, nullptr,
                std::move(offsets));
}

Var Tape::spmm_const(std::shared_ptr<const SparseMatrix> s, Var x) {
  const Tensor& xv = val(x.slot);
  need_matrix("spmm_const", xv);
  if (xv.rows() != s->cols()) {
    fail("spmm_const", "dense rows " + std::to_string(xv.rows()) + " != sparse cols " +
                           std::to_string(s->cols()));
  }
  Tensor out;
  s->spmm(xv, out);
  return record(Op::kSpmmConst, {x.slot}, std::move(out), 0.0, nullptr, std::move(s));
}

namespace {
void need_vals(const char* op, const Tensor& vals, const SparsePattern& p) {
  if (vals.rank() != 1 || vals.numel() != p.nnz()) {
    fail(op, "values " + vals.shape_string() + " do not match pattern nnz " +
                 std::to_string(p.nnz()));
  }
}
}  // namespace

Var Tape::spmm(std::shared_ptr<const SparsePattern> p, Var vals, Var x) {
  const Tensor &v = val(vals.slot), &xv = val(x.slot);
  need_vals("spmm", v, *p);
  need_matrix("spmm", xv);
  if (xv.rows() != p->cols) {
    fail("spmm", "dense rows " + std::to_string(xv.rows()) + " != pattern cols " +
                     std::to_string(p->cols));
  }
  Tensor out({p->rows, xv.cols()});
  kern::csr_spmm(p->rows, xv.cols(), p->row_ptr.data(), p->entry_col.data(), nullptr, v.data(),
                 xv.data(), out.data());
  return record(Op::kSpmm, {vals.slot, x.slot}, std::move(out), 0.0, std::move(p));
}

Var Tape::spmm_t(std::shared_ptr<const SparsePattern> p, Var vals, Var x) {
  const Tensor &v = val(vals.slot), &xv = val(x.slot);
  need_vals("spmm_t", v, *p);
  need_matrix("spmm_t", xv);
  if (xv.rows() != p->rows) {
    fail("spmm_t", "dense rows " + std::to_string(xv.rows()) + " != pattern rows " +
                       std::to_string(p->rows));
  }
  Tensor out({p->cols, xv.cols()});
  kern::csr_spmm(p->cols, xv.cols(), p->csc_ptr.data(), p->csc_row.data(), p->csc_perm.data(),
                 v.data(), xv.data(), out.data());
  return record(Op::kSpmmT, {vals.slot, x.slot}, std::move(out), 0.0, std::move(p));
}

Var Tape::sp_row_sums(std::shared_ptr<const SparsePattern> p, Var vals) {
  const Tensor& v = val(vals.slot);
  need_vals("sp_row_sums", v, *p);
  Tensor out({p->rows});
  kern::segment_sum(p->rows, p->row_ptr.data(), v.data(), out.data());
  return record(Op::kSpRowSums, {vals.slot}, std::move(out), 0.0, std::move(p));
}

Var Tape::sp_col_sums(std::shared_ptr<const SparsePattern> p, Var vals) {
  const Tensor& v = val(vals.slot);
  need_vals("sp_col_sums", v, *p);
  Tensor out({p->cols});
  kern::segment_sum_perm(p->cols, p->csc_ptr.data(), p->csc_perm.data(), v.data(), out.data());
  return record(Op::kSpColSums, {vals.slot}, std::move(out), 0.0, std::move(p));
}

Var Tape::pair_dot(std::shared_ptr<const SparsePattern> p, Var x, Var y) {
  const Tensor &xv = val(x.slot), &yv = val(y.slot);
  need_matrix("pair_dot", xv);
  need_matrix("pair_dot", yv);
  if (xv.rows() != p->rows || yv.rows() != p->cols || xv.cols() != yv.cols()) {
    fail("pair_dot", "shapes " + xv.shape_string() + ", " + yv.shape_string() +
                         " do not match pattern " + std::to_string(p->rows) + "x" +
                         std::to_string(p->cols));
  }
  Tensor out({p->nnz()});
  kern::pair_dot(p->nnz(), xv.cols(), p->entry_row.data(), p->entry_col.data(), xv.data(),
                 yv.data(), out.data());
  return record(Op::kPairDot, {x.slot, y.slot}, std::move(out), 0.0, std::move(p));
}

Tensor& Tape::grad_buf(int slot) {
  Tensor& g = grads_[static_cast<size_t>(slot)];
  if (g.vec().size() != val(slot).vec().size()) g = Tensor(val(slot).shape());
  return g;
}

const Tensor& Tape::grad(Var v) { return grad_buf(v.slot); }

void Tape::backward(Var loss) {
  const Tensor& l = val(loss.slot);
  if (l.numel() != 1) {
    fail("backward", "loss must be scalar, got " + l.shape_string());
  }
  if (!tracked(loss.slot)) {
    fail("backward", "loss does not depend on any tracked leaf");
  }
  for (Tensor& g : grads_) g = Tensor();
  grad_buf(loss.slot).at(0) = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    const Node& n = *it;
    if (!tracked(n.out)) continue;
    if (grads_[static_cast<size_t>(n.out)].numel() == 0) continue;  // no influence on loss
    backward_node(n);
  }
}

void Tape::backward_node(const Node& n) {
  const Tensor& g = grads_[static_cast<size_t>(n.out)];
  const Tensor& out = val(n.out);
  // Accumulate into d only when the input is tracked.
  auto want = [&](int i) { return tracked(n.ins[static_cast<size_t>(i)]); };
  auto gbuf = [&](int i) -> Tensor& { return grad_buf(n.ins[static_cast<size_t>(i)]); };
  auto ival = [&](int i) -> const Tensor& { return val(n.ins[static_cast<size_t>(i)]); };

  switch (n.op) {
    case Op::kLeaf:
    case Op::kConstant:
      break;
    case Op::kAdd: {
      if (want(0)) kern::axpy(g.numel(), 1.0, g.data(), gbuf(0).data());
      if (want(1)) kern::axpy(g.numel(), 1.0, g.data(), gbuf(1).data());
      break;
    }
    case Op::kSub: {
      if (want(0)) kern::axpy(g.numel(), 1.0, g.data(), gbuf(0).data());
      if (want(1)) kern::axpy(g.numel(), -1.0, g.data(), gbuf(1).data());
      break;
    }
    case Op::kMul: {
      if (want(0)) {
        Tensor t(g.shape());
        kern::mul(g.numel(), g.data(), ival(1).data(), t.data());
        kern::axpy(g.numel(), 1.0, t.data(), gbuf(0).data());
      }
      if (want(1)) {
        Tensor t(g.shape());
        kern::mul(g.numel(), g.data(), ival(0).data(), t.data());
        kern::axpy(g.numel(), 1.0, t.data(), gbuf(1).data());
      }
      break;
    }
    case Op::kScale: {
      if (want(0)) kern::axpy(g.numel(), n.a, g.data(), gbuf(0).data());
      break;
    }
    case Op::kAddRowVec: {
      if (want(0)) kern::axpy(g.numel(), 1.0, g.data(), gbuf(0).data());
      if (want(1)) {
        Tensor t({g.cols()});
        kern::col_sums(g.rows(), g.cols(), g.data(), t.data());
        kern::axpy(t.numel(), 1.0, t.data(), gbuf(1).data());
      }
      break;
    }
    case Op::kScaleRows: {
      const Tensor &m = ival(0), &d = ival(1);
      if (want(0)) {
        Tensor t(m.shape());
        kern::scale_rows(m.rows(), m.cols(), g.data(), d.data(), t.data());
        kern::axpy(t.numel(), 1.0, t.data(), gbuf(0).data());
      }
      if (want(1)) {
        Tensor& dd = gbuf(1);
        for (int64_t i = 0; i < m.rows(); ++i) {
          double s = 0;
          for (int64_t j = 0; j < m.cols(); ++j) s += g.at(i, j) * m.at(i, j);
          dd.at(i) += s;
        }
      }
      break;
    }
    case Op::kScaleBy: {
      const Tensor& m = ival(0);
      double c = ival(1).item();
      if (want(0)) kern::axpy(g.numel(), c, g.data(), gbuf(0).data());
      if (want(1)) gbuf(1).at(0) += kern::block_dot(g.numel(), g.data(), m.data());
      break;
    }
    case Op::kMatmul: {
      const Tensor &a = ival(0), &b = ival(1);
      if (want(0)) {
        Tensor t(a.shape());
        kern::matmul_nt(a.rows(), b.cols(), a.cols(), g.data(), b.data(), t.data());
        kern::axpy(t.numel(), 1.0, t.data(), gbuf(0).data());
      }
      if (want(1)) {
        Tensor t(b.shape());
        kern::matmul_tn(b.rows(), a.rows(), b.cols(), a.data(), g.data(), t.data());
        kern::axpy(t.numel(), 1.0, t.data(), gbuf(1).data());
      }
      break;
    }
    case Op::kTranspose: {
      if (want(0)) {
        Tensor& d = gbuf(0);
        for (int64_t i = 0; i < g.rows(); ++i) {
          for (int64_t j = 0; j < g.cols(); ++j) d.at(j, i) += g.at(i, j);
        }
      }
      break;
    }
    case Op::kReshape: {
      if (want(0)) kern::axpy(g.numel(), 1.0, g.data(), gbuf(0).data());
      break;
    }
    case Op::kTanh: {
      if (want(0)) {
        Tensor& d = gbuf(0);
        const double *y = out.data(), *gd = g.data();
        double* dd = d.data();
        for (int64_t i = 0; i < g.numel(); ++i) dd[i] += gd[i] * (1.0 - y[i] * y[i]);
      }
      break;
    }
    case Op::kSigmoid: {
      if (want(0)) {
        Tensor& d = gbuf(0);
        const double *y = out.data(), *gd = g.data();
        double* dd = d.data();
        for (int64_t i = 0; i < g.numel(); ++i) dd[i] += gd[i] * y[i] * (1.0 - y[i]);
      }
      break;
    }
    case Op::kLeakyRelu: {
      if (want(0)) {
        Tensor& d = gbuf(0);
        const double *x = ival(0).data(), *gd = g.data();
        double* dd = d.data();
        for (int64_t i = 0; i < g.numel(); ++i) dd[i] += gd[i] * (x[i] >= 0 ? 1.0 : n.a);
      }
      break;
    }
    case Op::kSoftplus: {
      if (want(0)) {
        Tensor t(g.shape());
        kern::sigmoid_map(g.numel(), ival(0).data(), t.data());
        const double* gd = g.data();
        double* dd = gbuf(0).data();
        for (int64_t i = 0; i < g.numel(); ++i) dd[i] += gd[i] * t.at(i);
      }
      break;
    }
    case Op::kRsqrtGuard: {
      if (want(0)) {
        const double *x = ival(0).data(), *gd = g.data();
        double* dd = gbuf(0).data();
        for (int64_t i = 0; i < g.numel(); ++i) {
          if (x[i] > kGuard) dd[i] += gd[i] * (-0.5) / (x[i] * std::sqrt(x[i]));
        }
      }
      break;
    }
    case Op::kRecipGuard: {
      if (want(0)) {
        const double *x = ival(0).data(), *gd = g.data();
        double* dd = gbuf(0).data();
        for (int64_t i = 0; i < g.numel(); ++i) {
          if (x[i] > kGuard) dd[i] += gd[i] * (-1.0) / (x[i] * x[i]);
        }
      }
      break;
    }
    case Op::kSoftmaxRows: {
      if (want(0)) {
        kern::softmax_rows_grad(out.rows(), out.cols(), out.data(), g.data(), gbuf(0).data());
      }
      break;
    }
    case Op::kLogsumexpRows: {
      if (want(0)) {
        const Tensor& x = ival(0);
        kern::logsumexp_rows_grad(x.rows(), x.cols(), x.data(), out.data(), g.data(),
                                  gbuf(0).data());
      }
      break;
    }
    case Op::kLayerNormRows: {
      if (want(0)) {
        const Tensor& x = ival(0);
        kern::layer_norm_rows_grad(x.rows(), x.cols(), kLayerNormEps, x.data(), out.data(),
                                   g.data(), gbuf(0).data());
      }
      break;
    }
    case Op::kNormalizeRows: {
      if (want(0)) {
        const Tensor& x = ival(0);
        kern::normalize_rows_grad(x.rows(), x.cols(), kGuard, x.data(), out.data(), g.data(),
                                  gbuf(0).data());
      }
      break;
    }
    case Op::kConcat0: {
      int64_t offset = 0;
      for (size_t i = 0; i < n.ins.size(); ++i) {
        const Tensor& piece = ival(static_cast<int>(i));
        if (want(static_cast<int>(i))) {
          kern::axpy(piece.numel(), 1.0, g.data() + offset, gbuf(static_cast<int>(i)).data());
        }
        offset += piece.numel();
      }
      break;
    }
    case Op::kReduceSum: {
      if (want(0)) {
        Tensor& d = gbuf(0);
        double gv = g.at(0);
        for (int64_t i = 0; i < d.numel(); ++i) d.at(i) += gv;
      }
      break;
    }
    case Op::kReduceMean: {
      if (want(0)) {
        Tensor& d = gbuf(0);
        double gv = g.at(0) / static_cast<double>(d.numel());
        for (int64_t i = 0; i < d.numel(); ++i) d.at(i) += gv;
      }
      break;
    }
    case Op::kSumRows: {
      if (want(0)) {
        const Tensor& x = ival(0);
        Tensor& d = gbuf(0);
        for (int64_t i = 0; i < x.rows(); ++i) {
          for (int64_t j = 0; j < x.cols(); ++j) d.at(i, j) += g.at(i);
        }
      }
      break;
    }
    case Op::kL2NormSq: {
      if (want(0)) {
        kern::axpy(ival(0).numel(), 2.0 * g.at(0), ival(0).data(), gbuf(0).data());
      }
      break;
    }
    case Op::kGatherRows: {
      if (want(0)) {
        kern::scatter_rows_add(static_cast<int64_t>(n.idx->size()), ival(0).cols(),
                               n.idx->data(), g.data(), gbuf(0).data());
      }
      break;
    }
    case Op::kDiagPart: {
      if (want(0)) {
        Tensor& d = gbuf(0);
        for (int64_t i = 0; i < g.numel(); ++i) d.at(i, i) += g.at(i);
      }
      break;
    }
    case Op::kElement: {
      if (want(0)) gbuf(0).at(static_cast<int64_t>(n.a)) += g.at(0);
      break;
    }
    case Op::kScatterGroups: {
      for (size_t gi = 0; gi < n.ins.size(); ++gi) {
        if (!want(static_cast<int>(gi))) continue;
        Tensor& d = gbuf(static_cast<int>(gi));
        const IndexVec& pos = n.groups->positions[gi];
        for (size_t i = 0; i < pos.size(); ++i) d.at(static_cast<int64_t>(i)) += g.at(pos[i]);
      }
      break;
    }
    case Op::kSegmentSoftmax: {
      if (want(0)) {
        kern::segment_softmax_grad(static_cast<int64_t>(n.idx->size()) - 1, n.idx->data(),
                                   out.data(), g.data(), gbuf(0).data());
      }
      break;
    }
    case Op::kSegmentSum: {
      if (want(0)) {
        Tensor& d = gbuf(0);
        const IndexVec& off = *n.idx;
        for (size_t s = 0; s + 1 < off.size(); ++s) {
          for (int64_t i = off[s]; i < off[s + 1]; ++i) d.at(i) += g.at(static_cast<int64_t>(s));
        }
      }
      break;
    }
    case Op::kSpmmConst: {
      if (want(0)) {
        Tensor t;
        n.smat->spmm_transposed(g, t);
        kern::axpy(t.numel(), 1.0, t.data(), gbuf(0).data());
      }
      break;
    }
    case Op::kSpmm: {
      const SparsePattern& p = *n.pattern;
      const Tensor &vals = ival(0), &x = ival(1);
      if (want(0)) {
        Tensor t({p.nnz()});
        kern::pair_dot(p.nnz(), x.cols(), p.entry_row.data(), p.entry_col.data(), g.data(),
                       x.data(), t.data());
        kern::axpy(t.numel(), 1.0, t.data(), gbuf(0).data());
      }
      if (want(1)) {
        Tensor t({p.cols, x.cols()});
        kern::csr_spmm(p.cols, x.cols(), p.csc_ptr.data(), p.csc_row.data(), p.csc_perm.data(),
                       vals.data(), g.data(), t.data());
        kern::axpy(t.numel(), 1.0, t.data(), gbuf(1).data());
      }
      break;
    }
    case Op::kSpmmT: {
      const SparsePattern& p = *n.pattern;
      const Tensor &vals = ival(0), &x = ival(1);
      if (want(0)) {
        Tensor t({p.nnz()});
        kern::pair_dot(p.nnz(), x.cols(), p.entry_col.data(), p.entry_row.data(), g.data(),
                       x.data(), t.data());
        kern::axpy(t.numel(), 1.0, t.data(), gbuf(0).data());
      }
      if (want(1)) {
        Tensor t({p.rows, x.cols()});
        kern::csr_spmm(p.rows, x.cols(), p.row_ptr.data(), p.entry_col.data(), nullptr,
                       vals.data(), g.data(), t.data());
        kern::axpy(t.numel(), 1.0, t.data(), gbuf(1).data());
      }
      break;
    }
    case Op::kSpRowSums: {
      if (want(0)) {
        const SparsePattern& p = *n.pattern;
        Tensor t({p.nnz()});
        kern::index_gather_add(p.nnz(), p.entry_row.data(), g.data(), t.data());
        kern::axpy(t.numel(), 1.0, t.data(), gbuf(0).data());
      }
      break;
    }
    case Op::kSpColSums: {
      if (want(0)) {
        const SparsePattern& p = *n.pattern;
        Tensor t({p.nnz()});
        kern::index_gather_add(p.nnz(), p.entry_col.data(), g.data(), t.data());
        kern::axpy(t.numel(), 1.0, t.data(), gbuf(0).data());
      }
      break;
    }
    case Op::kPairDot: {
      const SparsePattern& p = *n.pattern;
      const Tensor &x = ival(0), &y = ival(1);
      if (want(0)) {
        Tensor t(x.shape());
        kern::csr_spmm(p.rows, x.cols(), p.row_ptr.data(), p.entry_col.data(), nullptr, g.data(),
                       y.data(), t.data());
        kern::axpy(t.numel(), 1.0, t.data(), gbuf(0).data());
      }
      if (want(1)) {
        Tensor t(y.shape());
        kern::csr_spmm(p.cols, y.cols(), p.csc_ptr.data(), p.csc_row.data(), p.csc_perm.data(),
                       g.data(), x.data(), t.data());
        kern::axpy(t.numel(), 1.0, t.data(), gbuf(1).data());
      }
      break;
    }
  }
}

}  // namespace hyperrec
