#include "mtasr/kernels.hpp"

#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mtasr::kernels {

namespace {

// Minimum work before a kernel bothers spawning threads. Nested regions stay
// serial (training already parallelizes across batch samples).
constexpr long long kParallelGrain = 1 << 15;

inline bool go_parallel(long long work) {
#ifdef _OPENMP
  return work >= kParallelGrain && !omp_in_parallel();
#else
  (void)work;
  return false;
#endif
}

}  // namespace

void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n,
             bool accumulate) {
  const long long work = 1LL * m * k * n;
#pragma omp parallel for schedule(static) if (go_parallel(work))
  for (int i = 0; i < m; ++i) {
    double* crow = c + 1LL * i * n;
    if (!accumulate) std::memset(crow, 0, sizeof(double) * n);
    const double* arow = a + 1LL * i * k;
    for (int l = 0; l < k; ++l) {
      const double ail = arow[l];
      const double* brow = b + 1LL * l * n;
      for (int j = 0; j < n; ++j) crow[j] += ail * brow[j];
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, int m, int n, int k,
             bool accumulate) {
  const long long work = 1LL * m * n * k;
#pragma omp parallel for schedule(static) if (go_parallel(work))
  for (int i = 0; i < m; ++i) {
    const double* arow = a + 1LL * i * n;
    double* crow = c + 1LL * i * k;
    for (int j = 0; j < k; ++j) {
      const double* brow = b + 1LL * j * n;
      double s = 0.0;
      for (int l = 0; l < n; ++l) s += arow[l] * brow[l];
      crow[j] = accumulate ? crow[j] + s : s;
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n,
             bool accumulate) {
  const long long work = 1LL * m * k * n;
#pragma omp parallel for schedule(static) if (go_parallel(work))
  for (int l = 0; l < k; ++l) {
    double* crow = c + 1LL * l * n;
    if (!accumulate) std::memset(crow, 0, sizeof(double) * n);
    for (int i = 0; i < m; ++i) {
      const double ail = a[1LL * i * k + l];
      const double* brow = b + 1LL * i * n;
      for (int j = 0; j < n; ++j) crow[j] += ail * brow[j];
    }
  }
}

int softmax_rows(const double* x, const double* bias, double* y, int rows,
                 int cols) {
  int bad_row = -1;
#pragma omp parallel for schedule(static) if (go_parallel(1LL * rows * cols * 8))
  for (int r = 0; r < rows; ++r) {
    const double* xr = x + 1LL * r * cols;
    const double* br = bias ? bias + 1LL * r * cols : nullptr;
    double* yr = y + 1LL * r * cols;
    double mx = kNegInf;
    for (int j = 0; j < cols; ++j) {
      if (br && br[j] <= kMaskThreshold) continue;
      const double v = br ? xr[j] + br[j] : xr[j];
      if (v > mx) mx = v;
    }
    if (mx <= kMaskThreshold) {
#pragma omp critical
      {
        if (bad_row < 0 || r < bad_row) bad_row = r;
      }
      continue;
    }
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) {
      if (br && br[j] <= kMaskThreshold) {
        yr[j] = 0.0;
        continue;
      }
      const double v = br ? xr[j] + br[j] : xr[j];
      yr[j] = std::exp(v - mx);
      sum += yr[j];
    }
    for (int j = 0; j < cols; ++j) yr[j] /= sum;
  }
  return bad_row;
}

void softmax_rows_backward(const double* y, const double* dy, double* dx,
                           int rows, int cols) {
#pragma omp parallel for schedule(static) if (go_parallel(1LL * rows * cols * 4))
  for (int r = 0; r < rows; ++r) {
    const double* yr = y + 1LL * r * cols;
    const double* dyr = dy + 1LL * r * cols;
    double* dxr = dx + 1LL * r * cols;
    double dot = 0.0;
    for (int j = 0; j < cols; ++j) dot += yr[j] * dyr[j];
    for (int j = 0; j < cols; ++j) dxr[j] += yr[j] * (dyr[j] - dot);
  }
}

void log_softmax_rows(const double* x, double* y, int rows, int cols) {
#pragma omp parallel for schedule(static) if (go_parallel(1LL * rows * cols * 8))
  for (int r = 0; r < rows; ++r) {
    const double* xr = x + 1LL * r * cols;
    double* yr = y + 1LL * r * cols;
    double mx = xr[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) sum += std::exp(xr[j] - mx);
    const double lse = mx + std::log(sum);
    for (int j = 0; j < cols; ++j) yr[j] = xr[j] - lse;
  }
}

void log_softmax_rows_backward(const double* y, const double* dy, double* dx,
                               int rows, int cols) {
#pragma omp parallel for schedule(static) if (go_parallel(1LL * rows * cols * 8))
  for (int r = 0; r < rows; ++r) {
    const double* yr = y + 1LL * r * cols;
    const double* dyr = dy + 1LL * r * cols;
    double* dxr = dx + 1LL * r * cols;
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) sum += dyr[j];
    for (int j = 0; j < cols; ++j) dxr[j] += dyr[j] - std::exp(yr[j]) * sum;
  }
}

void layernorm_rows(const double* x, const double* gain, const double* offset,
                    double eps, double* y, double* mu, double* rstd, int rows,
                    int cols) {
#pragma omp parallel for schedule(static) if (go_parallel(1LL * rows * cols * 4))
  for (int r = 0; r < rows; ++r) {
    const double* xr = x + 1LL * r * cols;
    double* yr = y + 1LL * r * cols;
    double m = 0.0;
    for (int j = 0; j < cols; ++j) m += xr[j];
    m /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double d = xr[j] - m;
      var += d * d;
    }
    var /= cols;
    const double rs = 1.0 / std::sqrt(var + eps);
    mu[r] = m;
    rstd[r] = rs;
    for (int j = 0; j < cols; ++j)
      yr[j] = (xr[j] - m) * rs * gain[j] + offset[j];
  }
}

void layernorm_rows_backward(const double* x, const double* gain,
                             const double* mu, const double* rstd,
                             const double* dy, double* dx, double* dgain,
                             double* doffset, int rows, int cols) {
  if (dx) {
#pragma omp parallel for schedule(static) if (go_parallel(1LL * rows * cols * 6))
    for (int r = 0; r < rows; ++r) {
      const double* xr = x + 1LL * r * cols;
      const double* dyr = dy + 1LL * r * cols;
      double* dxr = dx + 1LL * r * cols;
      const double m = mu[r];
      const double rs = rstd[r];
      double s1 = 0.0, s2 = 0.0;
      for (int j = 0; j < cols; ++j) {
        const double dxhat = dyr[j] * gain[j];
        const double xhat = (xr[j] - m) * rs;
        s1 += dxhat;
        s2 += dxhat * xhat;
      }
      s1 /= cols;
      s2 /= cols;
      for (int j = 0; j < cols; ++j) {
        const double dxhat = dyr[j] * gain[j];
        const double xhat = (xr[j] - m) * rs;
        dxr[j] += rs * (dxhat - s1 - xhat * s2);
      }
    }
  }
  // Parameter grads reduce over rows; kept serial for a fixed summation order.
  if (dgain || doffset) {
    for (int r = 0; r < rows; ++r) {
      const double* xr = x + 1LL * r * cols;
      const double* dyr = dy + 1LL * r * cols;
      const double m = mu[r];
      const double rs = rstd[r];
      for (int j = 0; j < cols; ++j) {
        if (dgain) dgain[j] += dyr[j] * (xr[j] - m) * rs;
        if (doffset) doffset[j] += dyr[j];
      }
    }
  }
}

}  // namespace mtasr::kernels
