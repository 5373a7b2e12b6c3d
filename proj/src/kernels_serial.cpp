#include "mtasr/kernels.hpp"

#include <algorithm>
#include <cmath>

// Textbook single-threaded implementations. These stay deliberately naive so
// the parallel kernels have an independent reference to be checked against.
namespace mtasr::serial {

void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n,
             bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = accumulate ? c[1LL * i * n + j] : 0.0;
      for (int l = 0; l < k; ++l) s += a[1LL * i * k + l] * b[1LL * l * n + j];
      c[1LL * i * n + j] = s;
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, int m, int n, int k,
             bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < k; ++j) {
      double s = accumulate ? c[1LL * i * k + j] : 0.0;
      for (int l = 0; l < n; ++l) s += a[1LL * i * n + l] * b[1LL * j * n + l];
      c[1LL * i * k + j] = s;
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n,
             bool accumulate) {
  for (int l = 0; l < k; ++l) {
    for (int j = 0; j < n; ++j) {
      double s = accumulate ? c[1LL * l * n + j] : 0.0;
      for (int i = 0; i < m; ++i) s += a[1LL * i * k + l] * b[1LL * i * n + j];
      c[1LL * l * n + j] = s;
    }
  }
}

int softmax_rows(const double* x, const double* bias, double* y, int rows,
                 int cols) {
  for (int r = 0; r < rows; ++r) {
    const double* xr = x + 1LL * r * cols;
    const double* br = bias ? bias + 1LL * r * cols : nullptr;
    double* yr = y + 1LL * r * cols;
    double mx = kNegInf;
    for (int j = 0; j < cols; ++j) {
      if (br && br[j] <= kMaskThreshold) continue;
      const double v = br ? xr[j] + br[j] : xr[j];
      mx = std::max(mx, v);
    }
    if (mx <= kMaskThreshold) return r;
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) {
      if (br && br[j] <= kMaskThreshold) {
        yr[j] = 0.0;
        continue;
      }
      yr[j] = std::exp((br ? xr[j] + br[j] : xr[j]) - mx);
      sum += yr[j];
    }
    for (int j = 0; j < cols; ++j) yr[j] /= sum;
  }
  return -1;
}

void layernorm_rows(const double* x, const double* gain, const double* offset,
                    double eps, double* y, double* mu, double* rstd, int rows,
                    int cols) {
  for (int r = 0; r < rows; ++r) {
    const double* xr = x + 1LL * r * cols;
    double* yr = y + 1LL * r * cols;
    double m = 0.0;
    for (int j = 0; j < cols; ++j) m += xr[j];
    m /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) var += (xr[j] - m) * (xr[j] - m);
    var /= cols;
    const double rs = 1.0 / std::sqrt(var + eps);
    mu[r] = m;
    rstd[r] = rs;
    for (int j = 0; j < cols; ++j)
      yr[j] = (xr[j] - m) * rs * gain[j] + offset[j];
  }
}

}  // namespace mtasr::serial
