#pragma once

#include <cstddef>

// Data-parallel inner loops behind the tensor engine. Every kernel has a
// scalar reference implementation; on x86-64 an AVX2+FMA variant is selected
// at runtime (override with MHELAB_KERNELS=scalar|avx2 or force_isa()).
// Scalar and SIMD variants are equivalence-tested against each other.

#if defined(__x86_64__) || defined(_M_X64)
#define MHELAB_X86 1
#else
#define MHELAB_X86 0
#endif

namespace mhelab::kern {

enum class Isa { scalar, avx2 };

const char* isa_name(Isa isa);
bool cpu_has_avx2();

// Active ISA is resolved once from CPU features and the MHELAB_KERNELS
// environment variable; tests may override it.
Isa active_isa();
void force_isa(Isa isa);

namespace scalar {

// C = alpha * op(A) * op(B) + beta * C, row-major, op(A): m x k, op(B): k x n.
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, float alpha,
          const float* a, const float* b, float beta, float* c);
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, const double* b, double beta, double* c);

void softmax_rows(const float* x, float* y, std::size_t rows, std::size_t cols);
void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols);

// dx += y * (dy - rowdot(dy, y)); y is the softmax output.
void softmax_rows_grad(const float* y, const float* dy, float* dx, std::size_t rows,
                       std::size_t cols);
void softmax_rows_grad(const double* y, const double* dy, double* dx, std::size_t rows,
                       std::size_t cols);

void add(const float* a, const float* b, float* y, std::size_t n);
void add(const double* a, const double* b, double* y, std::size_t n);
void mul(const float* a, const float* b, float* y, std::size_t n);
void mul(const double* a, const double* b, double* y, std::size_t n);

// y[r][c] = a[r][c] (+|*) v[c]
void add_rowvec(const float* a, const float* v, float* y, std::size_t rows, std::size_t cols);
void add_rowvec(const double* a, const double* v, double* y, std::size_t rows, std::size_t cols);
void mul_rowvec(const float* a, const float* v, float* y, std::size_t rows, std::size_t cols);
void mul_rowvec(const double* a, const double* v, double* y, std::size_t rows, std::size_t cols);

void axpy(float alpha, const float* x, float* y, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void scale(float* x, float alpha, std::size_t n);
void scale(double* x, double alpha, std::size_t n);

float sum(const float* x, std::size_t n);
double sum(const double* x, std::size_t n);
float dot(const float* a, const float* b, std::size_t n);
double dot(const double* a, const double* b, std::size_t n);
float sumsq(const float* x, std::size_t n);
double sumsq(const double* x, std::size_t n);

// out[c] += sum over rows of x[r][c]
void colsum_accum(const float* x, float* out, std::size_t rows, std::size_t cols);
void colsum_accum(const double* x, double* out, std::size_t rows, std::size_t cols);

// Decoupled-weight-decay Adam step with bias correction factors
// inv_bc1 = 1/(1-beta1^t), inv_bc2 = 1/(1-beta2^t).
void adamw(float* p, const float* g, float* m, float* v, std::size_t n, float lr, float beta1,
           float beta2, float eps, float wd, float inv_bc1, float inv_bc2);
void adamw(double* p, const double* g, double* m, double* v, std::size_t n, double lr,
           double beta1, double beta2, double eps, double wd, double inv_bc1, double inv_bc2);

}  // namespace scalar

#if MHELAB_X86
namespace avx2 {

void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, float alpha,
          const float* a, const float* b, float beta, float* c);
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, const double* b, double beta, double* c);

void softmax_rows(const float* x, float* y, std::size_t rows, std::size_t cols);
void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols);
void softmax_rows_grad(const float* y, const float* dy, float* dx, std::size_t rows,
                       std::size_t cols);
void softmax_rows_grad(const double* y, const double* dy, double* dx, std::size_t rows,
                       std::size_t cols);

void add(const float* a, const float* b, float* y, std::size_t n);
void add(const double* a, const double* b, double* y, std::size_t n);
void mul(const float* a, const float* b, float* y, std::size_t n);
void mul(const double* a, const double* b, double* y, std::size_t n);

void add_rowvec(const float* a, const float* v, float* y, std::size_t rows, std::size_t cols);
void add_rowvec(const double* a, const double* v, double* y, std::size_t rows, std::size_t cols);
void mul_rowvec(const float* a, const float* v, float* y, std::size_t rows, std::size_t cols);
void mul_rowvec(const double* a, const double* v, double* y, std::size_t rows, std::size_t cols);

void axpy(float alpha, const float* x, float* y, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void scale(float* x, float alpha, std::size_t n);
void scale(double* x, double alpha, std::size_t n);

float sum(const float* x, std::size_t n);
double sum(const double* x, std::size_t n);
float dot(const float* a, const float* b, std::size_t n);
double dot(const double* a, const double* b, std::size_t n);
float sumsq(const float* x, std::size_t n);
double sumsq(const double* x, std::size_t n);

void colsum_accum(const float* x, float* out, std::size_t rows, std::size_t cols);
void colsum_accum(const double* x, double* out, std::size_t rows, std::size_t cols);

void adamw(float* p, const float* g, float* m, float* v, std::size_t n, float lr, float beta1,
           float beta2, float eps, float wd, float inv_bc1, float inv_bc2);
void adamw(double* p, const double* g, double* m, double* v, std::size_t n, double lr,
          double beta1, double beta2, double eps, double wd, double inv_bc1, double inv_bc2);

}  // namespace avx2
#endif  // MHELAB_X86

// Dispatching entry points used by the tensor engine.
template <typename T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          const T* b, T beta, T* c);
template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols);
template <typename T>
void softmax_rows_grad(const T* y, const T* dy, T* dx, std::size_t rows, std::size_t cols);
template <typename T>
void add(const T* a, const T* b, T* y, std::size_t n);
template <typename T>
void mul(const T* a, const T* b, T* y, std::size_t n);
template <typename T>
void add_rowvec(const T* a, const T* v, T* y, std::size_t rows, std::size_t cols);
template <typename T>
void mul_rowvec(const T* a, const T* v, T* y, std::size_t rows, std::size_t cols);
template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n);
template <typename T>
void scale(T* x, T alpha, std::size_t n);
template <typename T>
T sum(const T* x, std::size_t n);
template <typename T>
T dot(const T* a, const T* b, std::size_t n);
template <typename T>
T sumsq(const T* x, std::size_t n);
template <typename T>
void colsum_accum(const T* x, T* out, std::size_t rows, std::size_t cols);
template <typename T>
void adamw(T* p, const T* g, T* m, T* v, std::size_t n, T lr, T beta1, T beta2, T eps, T wd,
           T inv_bc1, T inv_bc2);

}  // namespace mhelab::kern
