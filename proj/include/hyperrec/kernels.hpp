#pragma once

#include <cstdint>

// Data-parallel inner loops. Every kernel exists twice: the OpenMP version in
// kern:: and a serial reference in kern::ref used by the tests and available
// as a fallback. Both compute bit-identical results: parallel kernels assign
// each output element to exactly one iteration, and full reductions use a
// fixed block decomposition whose partials are combined in block order, so
// results do not depend on the thread count.
namespace hyperrec::kern {

inline constexpr int64_t kSumBlock = 1024;

// C[m,n] = A[m,k] * B[k,n]
void matmul_nn(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c);
// C[m,n] = A[m,k] * B[n,k]^T
void matmul_nt(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c);
// C[m,n] = A[k,m]^T * B[k,n]
void matmul_tn(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c);

void add(int64_t n, const double* x, const double* y, double* out);
void sub(int64_t n, const double* x, const double* y, double* out);
void mul(int64_t n, const double* x, const double* y, double* out);
void scale(int64_t n, double c, const double* x, double* out);
// y += c * x
void axpy(int64_t n, double c, const double* x, double* y);

void tanh_map(int64_t n, const double* x, double* out);
void sigmoid_map(int64_t n, const double* x, double* out);
void leaky_relu_map(int64_t n, double slope, const double* x, double* out);
void softplus_map(int64_t n, const double* x, double* out);
// x <= guard maps to 0, else x^(-1/2) / x^(-1)
void rsqrt_guard_map(int64_t n, double guard, const double* x, double* out);
void recip_guard_map(int64_t n, double guard, const double* x, double* out);

double block_sum(int64_t n, const double* x);
double block_dot(int64_t n, const double* x, const double* y);

void softmax_rows(int64_t rows, int64_t cols, const double* x, double* out);
void logsumexp_rows(int64_t rows, int64_t cols, const double* x, double* out);
void layer_norm_rows(int64_t rows, int64_t cols, double eps, const double* x, double* out);
// d_x from d_y for layer_norm_rows; y is the forward output.
void layer_norm_rows_grad(int64_t rows, int64_t cols, double eps, const double* x,
                          const double* y, const double* dy, double* dx);
void normalize_rows(int64_t rows, int64_t cols, double guard, const double* x, double* out);
void normalize_rows_grad(int64_t rows, int64_t cols, double guard, const double* x,
                         const double* y, const double* dy, double* dx);

void sum_rows(int64_t rows, int64_t cols, const double* x, double* out);
void col_sums(int64_t rows, int64_t cols, const double* x, double* out);
// out[i,:] = x[i,:] * d[i]
void scale_rows(int64_t rows, int64_t cols, const double* x, const double* d, double* out);

void gather_rows(int64_t k, int64_t cols, const int64_t* idx, const double* x, double* out);
// x[idx[i],:] += g[i,:]; serial because idx may repeat.
void scatter_rows_add(int64_t k, int64_t cols, const int64_t* idx, const double* g, double* x);

// dx += softmax backward; y is the forward output.
void softmax_rows_grad(int64_t rows, int64_t cols, const double* y, const double* dy, double* dx);
// dx += dy[i] * softmax(x[i,:]) given lse[i] = logsumexp(x[i,:]).
void logsumexp_rows_grad(int64_t rows, int64_t cols, const double* x, const double* lse,
                         const double* dy, double* dx);

// Softmax / sum over contiguous segments given by offsets[0..nseg].
void segment_softmax(int64_t nseg, const int64_t* offsets, const double* x, double* out);
void segment_softmax_grad(int64_t nseg, const int64_t* offsets, const double* y,
                          const double* dy, double* dx);
void segment_sum(int64_t nseg, const int64_t* offsets, const double* x, double* out);
// out[s] = sum of x[perm[p]] over positions p in segment s.
void segment_sum_perm(int64_t nseg, const int64_t* offsets, const int64_t* perm, const double* x,
                      double* out);

// out[k] = dot(x[a[k],:], y[b[k],:])
void pair_dot(int64_t npairs, int64_t cols, const int64_t* a, const int64_t* b, const double* x,
              const double* y, double* out);
// out[k] += g[idx[k]]
void index_gather_add(int64_t n, const int64_t* idx, const double* g, double* out);

// Y[r,:] = sum_e vals[e] * X[col[e],:] over e in [row_ptr[r], row_ptr[r+1]).
// `perm` remaps storage position to the index into `vals` (pass nullptr for identity).
void csr_spmm(int64_t rows, int64_t cols_dense, const int64_t* row_ptr, const int64_t* col,
              const int64_t* perm, const double* vals, const double* x, double* y);

namespace ref {
void matmul_nn(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c);
void matmul_nt(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c);
void matmul_tn(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c);
void add(int64_t n, const double* x, const double* y, double* out);
void sub(int64_t n, const double* x, const double* y, double* out);
void mul(int64_t n, const double* x, const double* y, double* out);
void scale(int64_t n, double c, const double* x, double* out);
void axpy(int64_t n, double c, const double* x, double* y);
void tanh_map(int64_t n, const double* x, double* out);
void sigmoid_map(int64_t n, const double* x, double* out);
void leaky_relu_map(int64_t n, double slope, const double* x, double* out);
void softplus_map(int64_t n, const double* x, double* out);
void rsqrt_guard_map(int64_t n, double guard, const double* x, double* out);
void recip_guard_map(int64_t n, double guard, const double* x, double* out);
double block_sum(int64_t n, const double* x);
double block_dot(int64_t n, const double* x, const double* y);
void softmax_rows(int64_t rows, int64_t cols, const double* x, double* out);
void logsumexp_rows(int64_t rows, int64_t cols, const double* x, double* out);
void layer_norm_rows(int64_t rows, int64_t cols, double eps, const double* x, double* out);
void normalize_rows(int64_t rows, int64_t cols, double guard, const double* x, double* out);
void sum_rows(int64_t rows, int64_t cols, const double* x, double* out);
void col_sums(int64_t rows, int64_t cols, const double* x, double* out);
void scale_rows(int64_t rows, int64_t cols, const double* x, const double* d, double* out);
void segment_softmax(int64_t nseg, const int64_t* offsets, const double* x, double* out);
void segment_sum(int64_t nseg, const int64_t* offsets, const double* x, double* out);
void pair_dot(int64_t npairs, int64_t cols, const int64_t* a, const int64_t* b, const double* x,
              const double* y, double* out);
void csr_spmm(int64_t rows, int64_t cols_dense, const int64_t* row_ptr, const int64_t* col,
              const int64_t* perm, const double* vals, const double* x, double* y);
}  // namespace ref

}  // namespace hyperrec::kern
