#include "mhelab/kernels.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <string>

#include "mhelab/errors.hpp"

namespace mhelab::kern {

const char* isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

bool cpu_has_avx2() {
#if MHELAB_X86 && (defined(__GNUC__) || defined(__clang__))
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

Isa detect_isa() {
  if (const char* env = std::getenv("MHELAB_KERNELS")) {
    std::string want(env);
    if (want == "scalar") return Isa::scalar;
    if (want == "avx2") {
      if (!cpu_has_avx2()) throw ContractError("MHELAB_KERNELS=avx2 but CPU lacks AVX2/FMA");
      return Isa::avx2;
    }
    if (!want.empty()) throw ContractError("unknown MHELAB_KERNELS value: " + want);
  }
  return cpu_has_avx2() ? Isa::avx2 : Isa::scalar;
}

Isa g_isa = detect_isa();

}  // namespace

Isa active_isa() { return g_isa; }

void force_isa(Isa isa) {
  if (isa == Isa::avx2 && !cpu_has_avx2())
    throw ContractError("cannot force avx2 kernels: CPU lacks AVX2/FMA");
  g_isa = isa;
}

// ---------------------------------------------------------------------------
// Scalar reference kernels
// ---------------------------------------------------------------------------

namespace scalar {
namespace {

template <typename T>
void gemm_impl(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
               const T* b, T beta, T* c) {
  for (std::size_t i = 0; i < m * n; ++i) c[i] = beta == T(0) ? T(0) : beta * c[i];
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const T aik = alpha * a[i * k + p];
        const T* brow = b + p * n;
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
      }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        T acc = 0;
        const T* arow = a + i * k;
        const T* brow = b + j * k;
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        c[i * n + j] += alpha * acc;
      }
  } else if (ta && !tb) {
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t i = 0; i < m; ++i) {
        const T aik = alpha * a[p * m + i];
        const T* brow = b + p * n;
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
      }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        T acc = 0;
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] += alpha * acc;
      }
  }
}

template <typename T>
void softmax_rows_impl(const T* x, T* y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    T mx = xr[0];
    for (std::size_t j = 1; j < cols; ++j) mx = xr[j] > mx ? xr[j] : mx;
    T s = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    const T inv = T(1) / s;
    for (std::size_t j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

template <typename T>
void softmax_rows_grad_impl(const T* y, const T* dy, T* dx, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* yr = y + r * cols;
    const T* dyr = dy + r * cols;
    T* dxr = dx + r * cols;
    T dotv = 0;
    for (std::size_t j = 0; j < cols; ++j) dotv += yr[j] * dyr[j];
    for (std::size_t j = 0; j < cols; ++j) dxr[j] += yr[j] * (dyr[j] - dotv);
  }
}

}  // namespace

void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, float alpha,
          const float* a, const float* b, float beta, float* c) {
  gemm_impl(ta, tb, m, n, k, alpha, a, b, beta, c);
}
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, const double* b, double beta, double* c) {
  gemm_impl(ta, tb, m, n, k, alpha, a, b, beta, c);
}

void softmax_rows(const float* x, float* y, std::size_t rows, std::size_t cols) {
  softmax_rows_impl(x, y, rows, cols);
}
void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols) {
  softmax_rows_impl(x, y, rows, cols);
}
void softmax_rows_grad(const float* y, const float* dy, float* dx, std::size_t rows,
                       std::size_t cols) {
  softmax_rows_grad_impl(y, dy, dx, rows, cols);
}
void softmax_rows_grad(const double* y, const double* dy, double* dx, std::size_t rows,
                       std::size_t cols) {
  softmax_rows_grad_impl(y, dy, dx, rows, cols);
}

void add(const float* a, const float* b, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}
void add(const double* a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}
void mul(const float* a, const float* b, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}
void mul(const double* a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}

namespace {
template <typename T, typename Op>
void rowvec_impl(const T* a, const T* v, T* y, std::size_t rows, std::size_t cols, Op op) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* ar = a + r * cols;
    T* yr = y + r * cols;
    for (std::size_t j = 0; j < cols; ++j) yr[j] = op(ar[j], v[j]);
  }
}
}  // namespace

void add_rowvec(const float* a, const float* v, float* y, std::size_t rows, std::size_t cols) {
  rowvec_impl(a, v, y, rows, cols, [](float x, float w) { return x + w; });
}
void add_rowvec(const double* a, const double* v, double* y, std::size_t rows, std::size_t cols) {
  rowvec_impl(a, v, y, rows, cols, [](double x, double w) { return x + w; });
}
void mul_rowvec(const float* a, const float* v, float* y, std::size_t rows, std::size_t cols) {
  rowvec_impl(a, v, y, rows, cols, [](float x, float w) { return x * w; });
}
void mul_rowvec(const double* a, const double* v, double* y, std::size_t rows, std::size_t cols) {
  rowvec_impl(a, v, y, rows, cols, [](double x, double w) { return x * w; });
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}
void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}
void scale(float* x, float alpha, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}
void scale(double* x, double alpha, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

float sum(const float* x, std::size_t n) {
  float s = 0;
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}
double sum(const double* x, std::size_t n) {
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}
float dot(const float* a, const float* b, std::size_t n) {
  float s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}
double dot(const double* a, const double* b, std::size_t n) {
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}
float sumsq(const float* x, std::size_t n) { return dot(x, x, n); }
double sumsq(const double* x, std::size_t n) { return dot(x, x, n); }

void colsum_accum(const float* x, float* out, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) out[j] += x[r * cols + j];
}
void colsum_accum(const double* x, double* out, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) out[j] += x[r * cols + j];
}

namespace {
template <typename T>
void adamw_impl(T* p, const T* g, T* m, T* v, std::size_t n, T lr, T beta1, T beta2, T eps, T wd,
                T inv_bc1, T inv_bc2) {
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
    v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
    const T mhat = m[i] * inv_bc1;
    const T vhat = v[i] * inv_bc2;
    p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
  }
}
}  // namespace

void adamw(float* p, const float* g, float* m, float* v, std::size_t n, float lr, float beta1,
           float beta2, float eps, float wd, float inv_bc1, float inv_bc2) {
  adamw_impl(p, g, m, v, n, lr, beta1, beta2, eps, wd, inv_bc1, inv_bc2);
}
void adamw(double* p, const double* g, double* m, double* v, std::size_t n, double lr,
           double beta1, double beta2, double eps, double wd, double inv_bc1, double inv_bc2) {
  adamw_impl(p, g, m, v, n, lr, beta1, beta2, eps, wd, inv_bc1, inv_bc2);
}

}  // namespace scalar

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

#if MHELAB_X86
#define MHELAB_DISPATCH(fn, ...) \
  (g_isa == Isa::avx2 ? avx2::fn(__VA_ARGS__) : scalar::fn(__VA_ARGS__))
#else
#define MHELAB_DISPATCH(fn, ...) scalar::fn(__VA_ARGS__)
#endif

template <typename T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          const T* b, T beta, T* c) {
  MHELAB_DISPATCH(gemm, ta, tb, m, n, k, alpha, a, b, beta, c);
}
template void gemm<float>(bool, bool, std::size_t, std::size_t, std::size_t, float, const float*,
                          const float*, float, float*);
template void gemm<double>(bool, bool, std::size_t, std::size_t, std::size_t, double,
                           const double*, const double*, double, double*);

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols) {
  MHELAB_DISPATCH(softmax_rows, x, y, rows, cols);
}
template void softmax_rows<float>(const float*, float*, std::size_t, std::size_t);
template void softmax_rows<double>(const double*, double*, std::size_t, std::size_t);

template <typename T>
void softmax_rows_grad(const T* y, const T* dy, T* dx, std::size_t rows, std::size_t cols) {
  MHELAB_DISPATCH(softmax_rows_grad, y, dy, dx, rows, cols);
}
template void softmax_rows_grad<float>(const float*, const float*, float*, std::size_t,
                                       std::size_t);
template void softmax_rows_grad<double>(const double*, const double*, double*, std::size_t,
                                        std::size_t);

template <typename T>
void add(const T* a, const T* b, T* y, std::size_t n) {
  MHELAB_DISPATCH(add, a, b, y, n);
}
template void add<float>(const float*, const float*, float*, std::size_t);
template void add<double>(const double*, const double*, double*, std::size_t);

template <typename T>
void mul(const T* a, const T* b, T* y, std::size_t n) {
  MHELAB_DISPATCH(mul, a, b, y, n);
}
template void mul<float>(const float*, const float*, float*, std::size_t);
template void mul<double>(const double*, const double*, double*, std::size_t);

template <typename T>
void add_rowvec(const T* a, const T* v, T* y, std::size_t rows, std::size_t cols) {
  MHELAB_DISPATCH(add_rowvec, a, v, y, rows, cols);
}
template void add_rowvec<float>(const float*, const float*, float*, std::size_t, std::size_t);
template void add_rowvec<double>(const double*, const double*, double*, std::size_t, std::size_t);

template <typename T>
void mul_rowvec(const T* a, const T* v, T* y, std::size_t rows, std::size_t cols) {
  MHELAB_DISPATCH(mul_rowvec, a, v, y, rows, cols);
}
template void mul_rowvec<float>(const float*, const float*, float*, std::size_t, std::size_t);
template void mul_rowvec<double>(const double*, const double*, double*, std::size_t, std::size_t);

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  MHELAB_DISPATCH(axpy, alpha, x, y, n);
}
template void axpy<float>(float, const float*, float*, std::size_t);
template void axpy<double>(double, const double*, double*, std::size_t);

template <typename T>
void scale(T* x, T alpha, std::size_t n) {
  MHELAB_DISPATCH(scale, x, alpha, n);
}
template void scale<float>(float*, float, std::size_t);
template void scale<double>(double*, double, std::size_t);

template <typename T>
T sum(const T* x, std::size_t n) {
  return MHELAB_DISPATCH(sum, x, n);
}
template float sum<float>(const float*, std::size_t);
template double sum<double>(const double*, std::size_t);

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  return MHELAB_DISPATCH(dot, a, b, n);
}
template float dot<float>(const float*, const float*, std::size_t);
template double dot<double>(const double*, const double*, std::size_t);

template <typename T>
T sumsq(const T* x, std::size_t n) {
  return MHELAB_DISPATCH(sumsq, x, n);
}
template float sumsq<float>(const float*, std::size_t);
template double sumsq<double>(const double*, std::size_t);

template <typename T>
void colsum_accum(const T* x, T* out, std::size_t rows, std::size_t cols) {
  MHELAB_DISPATCH(colsum_accum, x, out, rows, cols);
}
template void colsum_accum<float>(const float*, float*, std::size_t, std::size_t);
template void colsum_accum<double>(const double*, double*, std::size_t, std::size_t);

template <typename T>
void adamw(T* p, const T* g, T* m, T* v, std::size_t n, T lr, T beta1, T beta2, T eps, T wd,
           T inv_bc1, T inv_bc2) {
  MHELAB_DISPATCH(adamw, p, g, m, v, n, lr, beta1, beta2, eps, wd, inv_bc1, inv_bc2);
}
template void adamw<float>(float*, const float*, float*, float*, std::size_t, float, float, float,
                           float, float, float, float);
template void adamw<double>(double*, const double*, double*, double*, std::size_t, double, double,
                            double, double, double, double, double);

#undef MHELAB_DISPATCH

}  // namespace mhelab::kern
