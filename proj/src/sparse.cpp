#include "hyperrec/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "hyperrec/kernels.hpp"

namespace hyperrec {

namespace {

void check_index(int64_t v, int64_t bound, const char* what) {
  if (v < 0 || v >= bound) {
    throw std::invalid_argument(std::string("SparseMatrix: ") + what + " index " +
                                std::to_string(v) + " out of range [0," + std::to_string(bound) +
                                ")");
  }
}

}  // namespace

SparseMatrix::SparseMatrix(int64_t rows, int64_t cols, std::vector<Entry> entries,
                           bool sum_duplicates)
    : rows_(rows), cols_(cols) {
  for (const Entry& e : entries) {
    check_index(e.row, rows, "row");
    check_index(e.col, cols, "col");
    if (!std::isfinite(e.value)) {
      throw std::invalid_argument("SparseMatrix: non-finite value at (" + std::to_string(e.row) +
                                  "," + std::to_string(e.col) + ")");
    }
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  });
  std::vector<Entry> unique;
  unique.reserve(entries.size());
  for (const Entry& e : entries) {
    if (!unique.empty() && unique.back().row == e.row && unique.back().col == e.col) {
      if (!sum_duplicates) {
        throw std::invalid_argument("SparseMatrix: duplicate entry (" + std::to_string(e.row) +
                                    "," + std::to_string(e.col) + ")");
      }
      unique.back().value += e.value;
    } else {
      unique.push_back(e);
    }
  }

  row_ptr_.assign(static_cast<size_t>(rows_ + 1), 0);
  col_index_.reserve(unique.size());
  values_.reserve(unique.size());
  for (const Entry& e : unique) {
    ++row_ptr_[static_cast<size_t>(e.row + 1)];
    col_index_.push_back(e.col);
    values_.push_back(e.value);
  }
  for (int64_t r = 0; r < rows_; ++r) row_ptr_[static_cast<size_t>(r + 1)] += row_ptr_[static_cast<size_t>(r)];

  // Column-major permutation for transposed products.
  csc_ptr_.assign(static_cast<size_t>(cols_ + 1), 0);
  for (int64_t c : col_index_) ++csc_ptr_[static_cast<size_t>(c + 1)];
  for (int64_t c = 0; c < cols_; ++c) csc_ptr_[static_cast<size_t>(c + 1)] += csc_ptr_[static_cast<size_t>(c)];
  csc_row_.assign(col_index_.size(), 0);
  csc_perm_.assign(col_index_.size(), 0);
  std::vector<int64_t> cursor(csc_ptr_.begin(), csc_ptr_.end() - 1);
  for (int64_t r = 0; r < rows_; ++r) {
    for (int64_t e = row_ptr_[static_cast<size_t>(r)]; e < row_ptr_[static_cast<size_t>(r + 1)]; ++e) {
      int64_t c = col_index_[static_cast<size_t>(e)];
      int64_t pos = cursor[static_cast<size_t>(c)]++;
      csc_row_[static_cast<size_t>(pos)] = r;
      csc_perm_[static_cast<size_t>(pos)] = e;
    }
  }
}

SparseMatrix SparseMatrix::identity(int64_t n) {
  std::vector<Entry> entries;
  entries.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) entries.push_back({i, i, 1.0});
  return SparseMatrix(n, n, std::move(entries));
}

void SparseMatrix::spmm(const Tensor& x, Tensor& y) const {
  if (x.rows() != cols_) {
    throw std::invalid_argument("SparseMatrix::spmm: dense rows " + std::to_string(x.rows()) +
                                " != sparse cols " + std::to_string(cols_));
  }
  int64_t d = x.cols();
  y = Tensor({rows_, d});
  kern::csr_spmm(rows_, d, row_ptr_.data(), col_index_.data(), nullptr, values_.data(), x.data(),
                 y.data());
}

void SparseMatrix::spmm_transposed(const Tensor& x, Tensor& y) const {
  if (x.rows() != rows_) {
    throw std::invalid_argument("SparseMatrix::spmm_transposed: dense rows " +
                                std::to_string(x.rows()) + " != sparse rows " +
                                std::to_string(rows_));
  }
  int64_t d = x.cols();
  y = Tensor({cols_, d});
  kern::csr_spmm(cols_, d, csc_ptr_.data(), csc_row_.data(), csc_perm_.data(), values_.data(),
                 x.data(), y.data());
}

Tensor SparseMatrix::to_dense() const {
  Tensor d({rows_, cols_});
  for (int64_t r = 0; r < rows_; ++r) {
    for (int64_t e = row_ptr_[static_cast<size_t>(r)]; e < row_ptr_[static_cast<size_t>(r + 1)]; ++e) {
      d.at(r, col_index_[static_cast<size_t>(e)]) = values_[static_cast<size_t>(e)];
    }
  }
  return d;
}

std::shared_ptr<const SparsePattern> SparsePattern::build(
    int64_t rows, int64_t cols, std::vector<std::pair<int64_t, int64_t>> pairs) {
  std::sort(pairs.begin(), pairs.end());
  for (size_t i = 0; i < pairs.size(); ++i) {
    const auto& [r, c] = pairs[i];
    if (r < 0 || r >= rows || c < 0 || c >= cols) {
      throw std::invalid_argument("SparsePattern: entry (" + std::to_string(r) + "," +
                                  std::to_string(c) + ") out of range");
    }
    if (i > 0 && pairs[i] == pairs[i - 1]) {
      throw std::invalid_argument("SparsePattern: duplicate entry (" + std::to_string(r) + "," +
                                  std::to_string(c) + ")");
    }
  }

  auto pat = std::make_shared<SparsePattern>();
  pat->rows = rows;
  pat->cols = cols;
  pat->entry_row.reserve(pairs.size());
  pat->entry_col.reserve(pairs.size());
  pat->row_ptr.assign(static_cast<size_t>(rows + 1), 0);
  for (const auto& [r, c] : pairs) {
    pat->entry_row.push_back(r);
    pat->entry_col.push_back(c);
    ++pat->row_ptr[static_cast<size_t>(r + 1)];
  }
  for (int64_t r = 0; r < rows; ++r) pat->row_ptr[static_cast<size_t>(r + 1)] += pat->row_ptr[static_cast<size_t>(r)];

  pat->csc_ptr.assign(static_cast<size_t>(cols + 1), 0);
  for (const auto& [r, c] : pairs) ++pat->csc_ptr[static_cast<size_t>(c + 1)];
  for (int64_t c = 0; c < cols; ++c) pat->csc_ptr[static_cast<size_t>(c + 1)] += pat->csc_ptr[static_cast<size_t>(c)];
  pat->csc_row.assign(pairs.size(), 0);
  pat->csc_perm.assign(pairs.size(), 0);
  std::vector<int64_t> cursor(pat->csc_ptr.begin(), pat->csc_ptr.end() - 1);
  for (size_t k = 0; k < pairs.size(); ++k) {
    int64_t c = pairs[k].second;
    int64_t pos = cursor[static_cast<size_t>(c)]++;
    pat->csc_row[static_cast<size_t>(pos)] = pairs[k].first;
    pat->csc_perm[static_cast<size_t>(pos)] = static_cast<int64_t>(k);
  }
  return pat;
}

}  // namespace hyperrec
