#include "hyperrec/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace hyperrec::kern {

namespace {

inline double stable_sigmoid(double x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); }

inline void softmax_one(int64_t n, const double* x, double* out) {
  double m = -std::numeric_limits<double>::infinity();
  for (int64_t j = 0; j < n; ++j) m = std::max(m, x[j]);
  double z = 0;
  for (int64_t j = 0; j < n; ++j) {
    out[j] = std::exp(x[j] - m);
    z += out[j];
  }
  double inv = 1.0 / z;
  for (int64_t j = 0; j < n; ++j) out[j] *= inv;
}

inline double logsumexp_one(int64_t n, const double* x) {
  double m = -std::numeric_limits<double>::infinity();
  for (int64_t j = 0; j < n; ++j) m = std::max(m, x[j]);
  double z = 0;
  for (int64_t j = 0; j < n; ++j) z += std::exp(x[j] - m);
  return m + std::log(z);
}

inline void layer_norm_one(int64_t n, double eps, const double* x, double* out) {
  double mu = 0;
  for (int64_t j = 0; j < n; ++j) mu += x[j];
  mu /= static_cast<double>(n);
  double var = 0;
  for (int64_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
  var /= static_cast<double>(n);
  double inv = 1.0 / std::sqrt(var + eps);
  for (int64_t j = 0; j < n; ++j) out[j] = (x[j] - mu) * inv;
}

inline void normalize_one(int64_t n, double guard, const double* x, double* out) {
  double ss = 0;
  for (int64_t j = 0; j < n; ++j) ss += x[j] * x[j];
  double r = std::sqrt(ss);
  if (r <= guard) {
    for (int64_t j = 0; j < n; ++j) out[j] = 0.0;
    return;
  }
  double inv = 1.0 / r;
  for (int64_t j = 0; j < n; ++j) out[j] = x[j] * inv;
}

}  // namespace

void matmul_nn(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    std::fill(ci, ci + n, 0.0);
    const double* ai = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      double av = ai[p];
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void matmul_nt(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0;
      for (int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = s;
    }
  }
}

void matmul_tn(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    std::fill(ci, ci + n, 0.0);
    for (int64_t p = 0; p < k; ++p) {
      double av = a[p * m + i];
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void add(int64_t n, const double* x, const double* y, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
}

void sub(int64_t n, const double* x, const double* y, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] - y[i];
}

void mul(int64_t n, const double* x, const double* y, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
}

void scale(int64_t n, double c, const double* x, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = c * x[i];
}

void axpy(int64_t n, double c, const double* x, double* y) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) y[i] += c * x[i];
}

void tanh_map(int64_t n, const double* x, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = std::tanh(x[i]);
}

void sigmoid_map(int64_t n, const double* x, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = stable_sigmoid(x[i]);
}

void leaky_relu_map(int64_t n, double slope, const double* x, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] >= 0 ? x[i] : slope * x[i];
}

void softplus_map(int64_t n, const double* x, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = stable_softplus(x[i]);
}

void rsqrt_guard_map(int64_t n, double guard, const double* x, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] <= guard ? 0.0 : 1.0 / std::sqrt(x[i]);
}

void recip_guard_map(int64_t n, double guard, const double* x, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] <= guard ? 0.0 : 1.0 / x[i];
}

double block_sum(int64_t n, const double* x) {
  int64_t nblocks = (n + kSumBlock - 1) / kSumBlock;
  if (nblocks <= 1) {
    double s = 0;
    for (int64_t i = 0; i < n; ++i) s += x[i];
    return s;
  }
  std::vector<double> partial(static_cast<size_t>(nblocks), 0.0);
#pragma omp parallel for schedule(static)
  for (int64_t b = 0; b < nblocks; ++b) {
    int64_t lo = b * kSumBlock, hi = std::min(n, lo + kSumBlock);
    double s = 0;
    for (int64_t i = lo; i < hi; ++i) s += x[i];
    partial[static_cast<size_t>(b)] = s;
  }
  double total = 0;
  for (double p : partial) total += p;
  return total;
}

double block_dot(int64_t n, const double* x, const double* y) {
  int64_t nblocks = (n + kSumBlock - 1) / kSumBlock;
  if (nblocks <= 1) {
    double s = 0;
    for (int64_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
  }
  std::vector<double> partial(static_cast<size_t>(nblocks), 0.0);
#pragma omp parallel for schedule(static)
  for (int64_t b = 0; b < nblocks; ++b) {
    int64_t lo = b * kSumBlock, hi = std::min(n, lo + kSumBlock);
    double s = 0;
    for (int64_t i = lo; i < hi; ++i) s += x[i] * y[i];
    partial[static_cast<size_t>(b)] = s;
  }
  double total = 0;
  for (double p : partial) total += p;
  return total;
}

void softmax_rows(int64_t rows, int64_t cols, const double* x, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) softmax_one(cols, x + i * cols, out + i * cols);
}

void logsumexp_rows(int64_t rows, int64_t cols, const double* x, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) out[i] = logsumexp_one(cols, x + i * cols);
}

void layer_norm_rows(int64_t rows, int64_t cols, double eps, const double* x, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) layer_norm_one(cols, eps, x + i * cols, out + i * cols);
}

void layer_norm_rows_grad(int64_t rows, int64_t cols, double eps, const double* x,
                          const double* y, const double* dy, double* dx) {
  double nn = static_cast<double>(cols);
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) {
    const double* xi = x + i * cols;
    const double* yi = y + i * cols;
    const double* gi = dy + i * cols;
    double* di = dx + i * cols;
    double mu = 0;
    for (int64_t j = 0; j < cols; ++j) mu += xi[j];
    mu /= nn;
    double var = 0;
    for (int64_t j = 0; j < cols; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= nn;
    double inv = 1.0 / std::sqrt(var + eps);
    double gmean = 0, gymean = 0;
    for (int64_t j = 0; j < cols; ++j) {
      gmean += gi[j];
      gymean += gi[j] * yi[j];
    }
    gmean /= nn;
    gymean /= nn;
    for (int64_t j = 0; j < cols; ++j) di[j] += inv * (gi[j] - gmean - yi[j] * gymean);
  }
}

void normalize_rows(int64_t rows, int64_t cols, double guard, const double* x, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) normalize_one(cols, guard, x + i * cols, out + i * cols);
}

void normalize_rows_grad(int64_t rows, int64_t cols, double guard, const double* x,
                         const double* y, const double* dy, double* dx) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) {
    const double* xi = x + i * cols;
    const double* yi = y + i * cols;
    const double* gi = dy + i * cols;
    double* di = dx + i * cols;
    double ss = 0;
    for (int64_t j = 0; j < cols; ++j) ss += xi[j] * xi[j];
    double r = std::sqrt(ss);
    if (r <= guard) continue;
    double gy = 0;
    for (int64_t j = 0; j < cols; ++j) gy += gi[j] * yi[j];
    double inv = 1.0 / r;
    for (int64_t j = 0; j < cols; ++j) di[j] += (gi[j] - yi[j] * gy) * inv;
  }
}

void sum_rows(int64_t rows, int64_t cols, const double* x, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) {
    const double* xi = x + i * cols;
    double s = 0;
    for (int64_t j = 0; j < cols; ++j) s += xi[j];
    out[i] = s;
  }
}

void col_sums(int64_t rows, int64_t cols, const double* x, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t j = 0; j < cols; ++j) {
    double s = 0;
    for (int64_t i = 0; i < rows; ++i) s += x[i * cols + j];
    out[j] = s;
  }
}

void scale_rows(int64_t rows, int64_t cols, const double* x, const double* d, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) {
    double c = d[i];
    const double* xi = x + i * cols;
    double* oi = out + i * cols;
    for (int64_t j = 0; j < cols; ++j) oi[j] = c * xi[j];
  }
}

void gather_rows(int64_t k, int64_t cols, const int64_t* idx, const double* x, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < k; ++i) {
    const double* src = x + idx[i] * cols;
    double* dst = out + i * cols;
    std::copy(src, src + cols, dst);
  }
}

void scatter_rows_add(int64_t k, int64_t cols, const int64_t* idx, const double* g, double* x) {
  for (int64_t i = 0; i < k; ++i) {
    double* dst = x + idx[i] * cols;
    const double* src = g + i * cols;
    for (int64_t j = 0; j < cols; ++j) dst[j] += src[j];
  }
}

void softmax_rows_grad(int64_t rows, int64_t cols, const double* y, const double* dy, double* dx) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) {
    const double* yi = y + i * cols;
    const double* gi = dy + i * cols;
    double* di = dx + i * cols;
    double gy = 0;
    for (int64_t j = 0; j < cols; ++j) gy += gi[j] * yi[j];
    for (int64_t j = 0; j < cols; ++j) di[j] += yi[j] * (gi[j] - gy);
  }
}

void logsumexp_rows_grad(int64_t rows, int64_t cols, const double* x, const double* lse,
                         const double* dy, double* dx) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) {
    const double* xi = x + i * cols;
    double* di = dx + i * cols;
    for (int64_t j = 0; j < cols; ++j) di[j] += dy[i] * std::exp(xi[j] - lse[i]);
  }
}

void segment_softmax(int64_t nseg, const int64_t* offsets, const double* x, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t s = 0; s < nseg; ++s) {
    int64_t lo = offsets[s], hi = offsets[s + 1];
    if (hi > lo) softmax_one(hi - lo, x + lo, out + lo);
  }
}

void segment_softmax_grad(int64_t nseg, const int64_t* offsets, const double* y,
                          const double* dy, double* dx) {
#pragma omp parallel for schedule(static)
  for (int64_t s = 0; s < nseg; ++s) {
    int64_t lo = offsets[s], hi = offsets[s + 1];
    double gy = 0;
    for (int64_t i = lo; i < hi; ++i) gy += dy[i] * y[i];
    for (int64_t i = lo; i < hi; ++i) dx[i] += y[i] * (dy[i] - gy);
  }
}

void segment_sum(int64_t nseg, const int64_t* offsets, const double* x, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t s = 0; s < nseg; ++s) {
    int64_t lo = offsets[s], hi = offsets[s + 1];
    double v = 0;
    for (int64_t i = lo; i < hi; ++i) v += x[i];
    out[s] = v;
  }
}

void segment_sum_perm(int64_t nseg, const int64_t* offsets, const int64_t* perm, const double* x,
                      double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t s = 0; s < nseg; ++s) {
    int64_t lo = offsets[s], hi = offsets[s + 1];
    double v = 0;
    for (int64_t p = lo; p < hi; ++p) v += x[perm[p]];
    out[s] = v;
  }
}

void pair_dot(int64_t npairs, int64_t cols, const int64_t* a, const int64_t* b, const double* x,
              const double* y, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t k = 0; k < npairs; ++k) {
    const double* xa = x + a[k] * cols;
    const double* yb = y + b[k] * cols;
    double s = 0;
    for (int64_t j = 0; j < cols; ++j) s += xa[j] * yb[j];
    out[k] = s;
  }
}

void index_gather_add(int64_t n, const int64_t* idx, const double* g, double* out) {
#pragma omp parallel for schedule(static)
  for (int64_t k = 0; k < n; ++k) out[k] += g[idx[k]];
}

void csr_spmm(int64_t rows, int64_t cols_dense, const int64_t* row_ptr, const int64_t* col,
              const int64_t* perm, const double* vals, const double* x, double* y) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    double* yr = y + r * cols_dense;
    std::fill(yr, yr + cols_dense, 0.0);
    for (int64_t e = row_ptr[r]; e < row_ptr[r + 1]; ++e) {
      double v = vals[perm ? perm[e] : e];
      const double* xr = x + col[e] * cols_dense;
      for (int64_t j = 0; j < cols_dense; ++j) yr[j] += v * xr[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Serial reference implementations. Same arithmetic order as the parallel
// kernels above so the two agree bit for bit.
// ---------------------------------------------------------------------------
namespace ref {

void matmul_nn(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c) {
  for (int64_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    std::fill(ci, ci + n, 0.0);
    const double* ai = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      double av = ai[p];
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void matmul_nt(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0;
      for (int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = s;
    }
  }
}

void matmul_tn(int64_t m, int64_t k, int64_t n, const double* a, const double* b, double* c) {
  for (int64_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    std::fill(ci, ci + n, 0.0);
    for (int64_t p = 0; p < k; ++p) {
      double av = a[p * m + i];
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void add(int64_t n, const double* x, const double* y, double* out) {
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
}

void sub(int64_t n, const double* x, const double* y, double* out) {
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] - y[i];
}

void mul(int64_t n, const double* x, const double* y, double* out) {
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
}

void scale(int64_t n, double c, const double* x, double* out) {
  for (int64_t i = 0; i < n; ++i) out[i] = c * x[i];
}

void axpy(int64_t n, double c, const double* x, double* y) {
  for (int64_t i = 0; i < n; ++i) y[i] += c * x[i];
}

void tanh_map(int64_t n, const double* x, double* out) {
  for (int64_t i = 0; i < n; ++i) out[i] = std::tanh(x[i]);
}

void sigmoid_map(int64_t n, const double* x, double* out) {
  for (int64_t i = 0; i < n; ++i) out[i] = stable_sigmoid(x[i]);
}

void leaky_relu_map(int64_t n, double slope, const double* x, double* out) {
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] >= 0 ? x[i] : slope * x[i];
}

void softplus_map(int64_t n, const double* x, double* out) {
  for (int64_t i = 0; i < n; ++i) out[i] = stable_softplus(x[i]);
}

void rsqrt_guard_map(int64_t n, double guard, const double* x, double* out) {
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] <= guard ? 0.0 : 1.0 / std::sqrt(x[i]);
}

void recip_guard_map(int64_t n, double guard, const double* x, double* out) {
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] <= guard ? 0.0 : 1.0 / x[i];
}

double block_sum(int64_t n, const double* x) {
  int64_t nblocks = (n + kSumBlock - 1) / kSumBlock;
  double total = 0;
  for (int64_t b = 0; b < nblocks; ++b) {
    int64_t lo = b * kSumBlock, hi = std::min(n, lo + kSumBlock);
    double s = 0;
    for (int64_t i = lo; i < hi; ++i) s += x[i];
    total += s;
  }
  return total;
}

double block_dot(int64_t n, const double* x, const double* y) {
  int64_t nblocks = (n + kSumBlock - 1) / kSumBlock;
  double total = 0;
  for (int64_t b = 0; b < nblocks; ++b) {
    int64_t lo = b * kSumBlock, hi = std::min(n, lo + kSumBlock);
    double s = 0;
    for (int64_t i = lo; i < hi; ++i) s += x[i] * y[i];
    total += s;
  }
  return total;
}

void softmax_rows(int64_t rows, int64_t cols, const double* x, double* out) {
  for (int64_t i = 0; i < rows; ++i) softmax_one(cols, x + i * cols, out + i * cols);
}

void logsumexp_rows(int64_t rows, int64_t cols, const double* x, double* out) {
  for (int64_t i = 0; i < rows; ++i) out[i] = logsumexp_one(cols, x + i * cols);
}

void layer_norm_rows(int64_t rows, int64_t cols, double eps, const double* x, double* out) {
  for (int64_t i = 0; i < rows; ++i) layer_norm_one(cols, eps, x + i * cols, out + i * cols);
}

void normalize_rows(int64_t rows, int64_t cols, double guard, const double* x, double* out) {
  for (int64_t i = 0; i < rows; ++i) normalize_one(cols, guard, x + i * cols, out + i * cols);
}

void sum_rows(int64_t rows, int64_t cols, const double* x, double* out) {
  for (int64_t i = 0; i < rows; ++i) {
    const double* xi = x + i * cols;
    double s = 0;
    for (int64_t j = 0; j < cols; ++j) s += xi[j];
    out[i] = s;
  }
}

void col_sums(int64_t rows, int64_t cols, const double* x, double* out) {
  for (int64_t j = 0; j < cols; ++j) {
    double s = 0;
    for (int64_t i = 0; i < rows; ++i) s += x[i * cols + j];
    out[j] = s;
  }
}

void scale_rows(int64_t rows, int64_t cols, const double* x, const double* d, double* out) {
  for (int64_t i = 0; i < rows; ++i) {
    double c = d[i];
    for (int64_t j = 0; j < cols; ++j) out[i * cols + j] = c * x[i * cols + j];
  }
}

void segment_softmax(int64_t nseg, const int64_t* offsets, const double* x, double* out) {
  for (int64_t s = 0; s < nseg; ++s) {
    int64_t lo = offsets[s], hi = offsets[s + 1];
    if (hi > lo) softmax_one(hi - lo, x + lo, out + lo);
  }
}

void segment_sum(int64_t nseg, const int64_t* offsets, const double* x, double* out) {
  for (int64_t s = 0; s < nseg; ++s) {
    int64_t lo = offsets[s], hi = offsets[s + 1];
    double v = 0;
    for (int64_t i = lo; i < hi; ++i) v += x[i];
    out[s] = v;
  }
}

void pair_dot(int64_t npairs, int64_t cols, const int64_t* a, const int64_t* b, const double* x,
              const double* y, double* out) {
  for (int64_t k = 0; k < npairs; ++k) {
    const double* xa = x + a[k] * cols;
    const double* yb = y + b[k] * cols;
    double s = 0;
    for (int64_t j = 0; j < cols; ++j) s += xa[j] * yb[j];
    out[k] = s;
  }
}

void csr_spmm(int64_t rows, int64_t cols_dense, const int64_t* row_ptr, const int64_t* col,
              const int64_t* perm, const double* vals, const double* x, double* y) {
  for (int64_t r = 0; r < rows; ++r) {
    double* yr = y + r * cols_dense;
    std::fill(yr, yr + cols_dense, 0.0);
    for (int64_t e = row_ptr[r]; e < row_ptr[r + 1]; ++e) {
      double v = vals[perm ? perm[e] : e];
      const double* xr = x + col[e] * cols_dense;
      for (int64_t j = 0; j < cols_dense; ++j) yr[j] += v * xr[j];
    }
  }
}

}  // namespace ref

}  // namespace hyperrec::kern
