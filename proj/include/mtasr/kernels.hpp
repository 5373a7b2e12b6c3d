#pragma once

namespace mtasr {

// Additive-bias sentinel standing in for -inf (attention masks, CTC DP init).
inline constexpr double kNegInf = -1e30;
// Bias entries at or below this threshold are treated as exactly -inf.
inline constexpr double kMaskThreshold = -1e29;

// OpenMP-parallel compute kernels. Every kernel sums in a fixed order that is
// independent of the thread count, so results are bit-identical to the serial
// reference in mtasr::serial (tests assert this; bench/ compares throughput).
namespace kernels {

// c[m x n] = a[m x k] * b[k x n]   (+= when accumulate)
void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n,
             bool accumulate);

// c[m x k] = a[m x n] * b[k x n]^T
void gemm_nt(const double* a, const double* b, double* c, int m, int n, int k,
             bool accumulate);

// c[k x n] = a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n,
             bool accumulate);

// Row-wise softmax over the last dimension with optional additive bias
// (same shape as x). Bias entries <= kMaskThreshold give exactly zero weight.
// Returns -1, or the index of the first fully masked row.
int softmax_rows(const double* x, const double* bias, double* y, int rows,
                 int cols);

// dx += dsoftmax given forward output y; also valid for dbias.
void softmax_rows_backward(const double* y, const double* dy, double* dx,
                           int rows, int cols);

void log_softmax_rows(const double* x, double* y, int rows, int cols);
void log_softmax_rows_backward(const double* y, const double* dy, double* dx,
                               int rows, int cols);

// Per-row layer normalization; stores per-row mean and reciprocal std for the
// backward pass.
void layernorm_rows(const double* x, const double* gain, const double* offset,
                    double eps, double* y, double* mu, double* rstd, int rows,
                    int cols);
void layernorm_rows_backward(const double* x, const double* gain,
                             const double* mu, const double* rstd,
                             const double* dy, double* dx, double* dgain,
                             double* doffset, int rows, int cols);

}  // namespace kernels

// Serial reference implementations with identical contracts; used by the unit
// tests to cross-check the parallel kernels and by bench/ as the baseline.
namespace serial {

void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n,
             bool accumulate);
void gemm_nt(const double* a, const double* b, double* c, int m, int n, int k,
             bool accumulate);
void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n,
             bool accumulate);
int softmax_rows(const double* x, const double* bias, double* y, int rows,
                 int cols);
void layernorm_rows(const double* x, const double* gain, const double* offset,
                    double eps, double* y, double* mu, double* rstd, int rows,
                    int cols);

}  // namespace serial
}  // namespace mtasr
