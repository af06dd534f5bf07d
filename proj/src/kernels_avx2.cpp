#include "mhelab/kernels.hpp"

#if MHELAB_X86

#include <immintrin.h>

#include <cmath>

#define MHELAB_AVX2 __attribute__((target("avx2,fma")))

namespace mhelab::kern::avx2 {

namespace {

MHELAB_AVX2 inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

MHELAB_AVX2 inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
}

// C-row accumulation microkernel: c[i, j0:j0+W) += sum_p a_broadcast(p) * b[p, j0:j0+W).
// Shared by the NN and TN paths, which differ only in how A is indexed.

MHELAB_AVX2 void gemm_bcast_f32(std::size_t m, std::size_t n, std::size_t k, float alpha,
                                const float* a, std::size_t a_row_stride,
                                std::size_t a_col_stride, const float* b, float* c) {
  constexpr std::size_t W = 32;  // 4 x 8 lanes
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    std::size_t j = 0;
    for (; j + W <= n; j += W) {
      __m256 acc0 = _mm256_loadu_ps(crow + j);
      __m256 acc1 = _mm256_loadu_ps(crow + j + 8);
      __m256 acc2 = _mm256_loadu_ps(crow + j + 16);
      __m256 acc3 = _mm256_loadu_ps(crow + j + 24);
      for (std::size_t p = 0; p < k; ++p) {
        const __m256 av = _mm256_set1_ps(alpha * a[i * a_row_stride + p * a_col_stride]);
        const float* brow = b + p * n + j;
        acc0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow), acc0);
        acc1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 8), acc1);
        acc2 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 16), acc2);
        acc3 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 24), acc3);
      }
      _mm256_storeu_ps(crow + j, acc0);
      _mm256_storeu_ps(crow + j + 8, acc1);
      _mm256_storeu_ps(crow + j + 16, acc2);
      _mm256_storeu_ps(crow + j + 24, acc3);
    }
    for (; j + 8 <= n; j += 8) {
      __m256 acc = _mm256_loadu_ps(crow + j);
      for (std::size_t p = 0; p < k; ++p) {
        const __m256 av = _mm256_set1_ps(alpha * a[i * a_row_stride + p * a_col_stride]);
        acc = _mm256_fmadd_ps(av, _mm256_loadu_ps(b + p * n + j), acc);
      }
      _mm256_storeu_ps(crow + j, acc);
    }
    if (j < n) {
      for (std::size_t p = 0; p < k; ++p) {
        const float av = alpha * a[i * a_row_stride + p * a_col_stride];
        for (std::size_t jj = j; jj < n; ++jj) crow[jj] += av * b[p * n + jj];
      }
    }
  }
}

MHELAB_AVX2 void gemm_bcast_f64(std::size_t m, std::size_t n, std::size_t k, double alpha,
                                const double* a, std::size_t a_row_stride,
                                std::size_t a_col_stride, const double* b, double* c) {
  constexpr std::size_t W = 16;  // 4 x 4 lanes
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    std::size_t j = 0;
    for (; j + W <= n; j += W) {
      __m256d acc0 = _mm256_loadu_pd(crow + j);
      __m256d acc1 = _mm256_loadu_pd(crow + j + 4);
      __m256d acc2 = _mm256_loadu_pd(crow + j + 8);
      __m256d acc3 = _mm256_loadu_pd(crow + j + 12);
      for (std::size_t p = 0; p < k; ++p) {
        const __m256d av = _mm256_set1_pd(alpha * a[i * a_row_stride + p * a_col_stride]);
        const double* brow = b + p * n + j;
        acc0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow), acc0);
        acc1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + 4), acc1);
        acc2 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + 8), acc2);
        acc3 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + 12), acc3);
      }
      _mm256_storeu_pd(crow + j, acc0);
      _mm256_storeu_pd(crow + j + 4, acc1);
      _mm256_storeu_pd(crow + j + 8, acc2);
      _mm256_storeu_pd(crow + j + 12, acc3);
    }
    for (; j + 4 <= n; j += 4) {
      __m256d acc = _mm256_loadu_pd(crow + j);
      for (std::size_t p = 0; p < k; ++p) {
        const __m256d av = _mm256_set1_pd(alpha * a[i * a_row_stride + p * a_col_stride]);
        acc = _mm256_fmadd_pd(av, _mm256_loadu_pd(b + p * n + j), acc);
      }
      _mm256_storeu_pd(crow + j, acc);
    }
    if (j < n) {
      for (std::size_t p = 0; p < k; ++p) {
        const double av = alpha * a[i * a_row_stride + p * a_col_stride];
        for (std::size_t jj = j; jj < n; ++jj) crow[jj] += av * b[p * n + jj];
      }
    }
  }
}

MHELAB_AVX2 inline float dot_f32(const float* a, const float* b, std::size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8)
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
  float s = hsum(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

MHELAB_AVX2 inline double dot_f64(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
void beta_pass(T* c, std::size_t count, T beta) {
  if (beta == T(0)) {
    for (std::size_t i = 0; i < count; ++i) c[i] = T(0);
  } else if (beta != T(1)) {
    for (std::size_t i = 0; i < count; ++i) c[i] *= beta;
  }
}

}  // namespace

MHELAB_AVX2 void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, float alpha,
                      const float* a, const float* b, float beta, float* c) {
  if (ta && tb) {  // cold path, not used by the tensor engine
    scalar::gemm(ta, tb, m, n, k, alpha, a, b, beta, c);
    return;
  }
  beta_pass(c, m * n, beta);
  if (!ta && !tb) {
    gemm_bcast_f32(m, n, k, alpha, a, k, 1, b, c);
  } else if (ta && !tb) {
    gemm_bcast_f32(m, n, k, alpha, a, 1, m, b, c);
  } else {  // NT: rows of A dotted with rows of B
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += alpha * dot_f32(a + i * k, b + j * k, k);
  }
}

MHELAB_AVX2 void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
                      const double* a, const double* b, double beta, double* c) {
  if (ta && tb) {
    scalar::gemm(ta, tb, m, n, k, alpha, a, b, beta, c);
    return;
  }
  beta_pass(c, m * n, beta);
  if (!ta && !tb) {
    gemm_bcast_f64(m, n, k, alpha, a, k, 1, b, c);
  } else if (ta && !tb) {
    gemm_bcast_f64(m, n, k, alpha, a, 1, m, b, c);
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += alpha * dot_f64(a + i * k, b + j * k, k);
  }
}

// Softmax keeps std::exp scalar; only the normalization sweep is vectorized,
// so scalar and AVX2 outputs agree bitwise.
MHELAB_AVX2 void softmax_rows(const float* x, float* y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x + r * cols;
    float* yr = y + r * cols;
    float mx = xr[0];
    for (std::size_t j = 1; j < cols; ++j) mx = xr[j] > mx ? xr[j] : mx;
    float s = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    const float inv = 1.0f / s;
    const __m256 vinv = _mm256_set1_ps(inv);
    std::size_t j = 0;
    for (; j + 8 <= cols; j += 8)
      _mm256_storeu_ps(yr + j, _mm256_mul_ps(_mm256_loadu_ps(yr + j), vinv));
    for (; j < cols; ++j) yr[j] *= inv;
  }
}

MHELAB_AVX2 void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols) {
  scalar::softmax_rows(x, y, rows, cols);
}

MHELAB_AVX2 void softmax_rows_grad(const float* y, const float* dy, float* dx, std::size_t rows,
                                   std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* yr = y + r * cols;
    const float* dyr = dy + r * cols;
    float* dxr = dx + r * cols;
    const float dotv = dot_f32(yr, dyr, cols);
    const __m256 vdot = _mm256_set1_ps(dotv);
    std::size_t j = 0;
    for (; j + 8 <= cols; j += 8) {
      const __m256 vy = _mm256_loadu_ps(yr + j);
      const __m256 vdy = _mm256_loadu_ps(dyr + j);
      const __m256 v = _mm256_fmadd_ps(vy, _mm256_sub_ps(vdy, vdot), _mm256_loadu_ps(dxr + j));
      _mm256_storeu_ps(dxr + j, v);
    }
    for (; j < cols; ++j) dxr[j] += yr[j] * (dyr[j] - dotv);
  }
}

MHELAB_AVX2 void softmax_rows_grad(const double* y, const double* dy, double* dx, std::size_t rows,
                                   std::size_t cols) {
  scalar::softmax_rows_grad(y, dy, dx, rows, cols);
}

MHELAB_AVX2 void add(const float* a, const float* b, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}
MHELAB_AVX2 void add(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}
MHELAB_AVX2 void mul(const float* a, const float* b, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}
MHELAB_AVX2 void mul(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}

MHELAB_AVX2 void add_rowvec(const float* a, const float* v, float* y, std::size_t rows,
                            std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) add(a + r * cols, v, y + r * cols, cols);
}
MHELAB_AVX2 void add_rowvec(const double* a, const double* v, double* y, std::size_t rows,
                            std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) add(a + r * cols, v, y + r * cols, cols);
}
MHELAB_AVX2 void mul_rowvec(const float* a, const float* v, float* y, std::size_t rows,
                            std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) mul(a + r * cols, v, y + r * cols, cols);
}
MHELAB_AVX2 void mul_rowvec(const double* a, const double* v, double* y, std::size_t rows,
                            std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) mul(a + r * cols, v, y + r * cols, cols);
}

MHELAB_AVX2 void axpy(float alpha, const float* x, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}
MHELAB_AVX2 void axpy(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

MHELAB_AVX2 void scale(float* x, float alpha, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(x + i, _mm256_mul_ps(_mm256_loadu_ps(x + i), va));
  for (; i < n; ++i) x[i] *= alpha;
}
MHELAB_AVX2 void scale(double* x, double alpha, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(x + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), va));
  for (; i < n; ++i) x[i] *= alpha;
}

MHELAB_AVX2 float sum(const float* x, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  float s = hsum(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}
MHELAB_AVX2 double sum(const double* x, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
  double s = hsum(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

MHELAB_AVX2 float dot(const float* a, const float* b, std::size_t n) { return dot_f32(a, b, n); }
MHELAB_AVX2 double dot(const double* a, const double* b, std::size_t n) {
  return dot_f64(a, b, n);
}
MHELAB_AVX2 float sumsq(const float* x, std::size_t n) { return dot_f32(x, x, n); }
MHELAB_AVX2 double sumsq(const double* x, std::size_t n) { return dot_f64(x, x, n); }

MHELAB_AVX2 void colsum_accum(const float* x, float* out, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x + r * cols;
    std::size_t j = 0;
    for (; j + 8 <= cols; j += 8)
      _mm256_storeu_ps(out + j, _mm256_add_ps(_mm256_loadu_ps(out + j), _mm256_loadu_ps(xr + j)));
    for (; j < cols; ++j) out[j] += xr[j];
  }
}
MHELAB_AVX2 void colsum_accum(const double* x, double* out, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    std::size_t j = 0;
    for (; j + 4 <= cols; j += 4)
      _mm256_storeu_pd(out + j, _mm256_add_pd(_mm256_loadu_pd(out + j), _mm256_loadu_pd(xr + j)));
    for (; j < cols; ++j) out[j] += xr[j];
  }
}

MHELAB_AVX2 void adamw(float* p, const float* g, float* m, float* v, std::size_t n, float lr,
                       float beta1, float beta2, float eps, float wd, float inv_bc1,
                       float inv_bc2) {
  const __m256 vb1 = _mm256_set1_ps(beta1);
  const __m256 vb2 = _mm256_set1_ps(beta2);
  const __m256 v1mb1 = _mm256_set1_ps(1.0f - beta1);
  const __m256 v1mb2 = _mm256_set1_ps(1.0f - beta2);
  const __m256 vbc1 = _mm256_set1_ps(inv_bc1);
  const __m256 vbc2 = _mm256_set1_ps(inv_bc2);
  const __m256 veps = _mm256_set1_ps(eps);
  const __m256 vlr = _mm256_set1_ps(lr);
  const __m256 vwd = _mm256_set1_ps(wd);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 vg = _mm256_loadu_ps(g + i);
    __m256 vm = _mm256_fmadd_ps(vb1, _mm256_loadu_ps(m + i), _mm256_mul_ps(v1mb1, vg));
    __m256 vv = _mm256_fmadd_ps(vb2, _mm256_loadu_ps(v + i),
                                _mm256_mul_ps(v1mb2, _mm256_mul_ps(vg, vg)));
    _mm256_storeu_ps(m + i, vm);
    _mm256_storeu_ps(v + i, vv);
    const __m256 mhat = _mm256_mul_ps(vm, vbc1);
    const __m256 vhat = _mm256_mul_ps(vv, vbc2);
    const __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(vhat), veps);
    __m256 vp = _mm256_loadu_ps(p + i);
    const __m256 upd = _mm256_fmadd_ps(vwd, vp, _mm256_div_ps(mhat, denom));
    vp = _mm256_fnmadd_ps(vlr, upd, vp);
    _mm256_storeu_ps(p + i, vp);
  }
  if (i < n) scalar::adamw(p + i, g + i, m + i, v + i, n - i, lr, beta1, beta2, eps, wd, inv_bc1,
                           inv_bc2);
}

MHELAB_AVX2 void adamw(double* p, const double* g, double* m, double* v, std::size_t n, double lr,
                       double beta1, double beta2, double eps, double wd, double inv_bc1,
                       double inv_bc2) {
  scalar::adamw(p, g, m, v, n, lr, beta1, beta2, eps, wd, inv_bc1, inv_bc2);
}

}  // namespace mhelab::kern::avx2

#endif  // MHELAB_X86
