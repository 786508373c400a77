#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "hyperrec/tensor.hpp"

namespace hyperrec {

// Immutable sparse matrix with fixed values. Entries are kept in row-major
// order with no duplicate (row, col); a column-major permutation is built so
// products with the transpose reuse the same value array.
class SparseMatrix {
 public:
  struct Entry {
    int64_t row;
    int64_t col;
    double value;
  };

  SparseMatrix() = default;
  SparseMatrix(int64_t rows, int64_t cols, std::vector<Entry> entries,
               bool sum_duplicates = false);

  static SparseMatrix identity(int64_t n);

  int64_t rows() const { return rows_; }
  int64_t cols() const { return cols_; }
  int64_t nnz() const { return static_cast<int64_t>(values_.size()); }

  const std::vector<int64_t>& row_ptr() const { return row_ptr_; }
  const std::vector<int64_t>& col_index() const { return col_index_; }
  const std::vector<double>& values() const { return values_; }
  const std::vector<int64_t>& csc_ptr() const { return csc_ptr_; }
  const std::vector<int64_t>& csc_row() const { return csc_row_; }
  const std::vector<int64_t>& csc_perm() const { return csc_perm_; }

  // y [rows x d] = A * x [cols x d]
  void spmm(const Tensor& x, Tensor& y) const;
  // y [cols x d] = A^T * x [rows x d]
  void spmm_transposed(const Tensor& x, Tensor& y) const;

  Tensor to_dense() const;

 private:
  int64_t rows_ = 0;
  int64_t cols_ = 0;
  std::vector<int64_t> row_ptr_;
  std::vector<int64_t> col_index_;
  std::vector<double> values_;
  std::vector<int64_t> csc_ptr_;
  std::vector<int64_t> csc_row_;
  std::vector<int64_t> csc_perm_;
};

// Fixed sparsity structure whose values are supplied at use time (they may be
// outputs of differentiable computation). Canonical entry order is row-major;
// both traversal directions are precomputed.
struct SparsePattern {
  int64_t rows = 0;
  int64_t cols = 0;

  std::vector<int64_t> entry_row;  // canonical order
  std::vector<int64_t> entry_col;

  std::vector<int64_t> row_ptr;  // rows + 1; canonical order is grouped by row
  std::vector<int64_t> csc_ptr;  // cols + 1
  std::vector<int64_t> csc_row;  // row id at each column-major position
  std::vector<int64_t> csc_perm; // canonical entry index at each column-major position

  int64_t nnz() const { return static_cast<int64_t>(entry_row.size()); }

  // `pairs` in (row, col) order; must be unique. Sorted internally.
  static std::shared_ptr<const SparsePattern> build(
      int64_t rows, int64_t cols, std::vector<std::pair<int64_t, int64_t>> pairs);
};

}  // namespace hyperrec
