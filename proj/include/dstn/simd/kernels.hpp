#pragma once

// Dense inner-loop kernels. Every kernel has a portable scalar reference
// implementation and, on x86-64, an AVX2+FMA variant. The variant is picked
// once at startup from CPUID and can be pinned with DSTN_SIMD=scalar|avx2.

#include <cstddef>
#include <string_view>

namespace dstn::simd {

enum class Isa { scalar, avx2 };

/// Function table for one instruction-set variant.
struct KernelTable {
  Isa isa;
  const char* name;

  // sum_i a[i] * b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);

  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);

  // C[m x n] += A[m x k] * B[k x n]; all row-major with leading dimensions.
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k,
                  const double* a, std::size_t lda,
                  const double* b, std::size_t ldb,
                  double* c, std::size_t ldc);

  // acc[i] += g[i]^2; param[i] -= lr * g[i] / (sqrt(acc[i]) + eps)
  void (*adagrad)(double* param, double* acc, const double* grad,
                  std::size_t n, double lr, double eps);

  // x[i] = max(0, x[i])
  void (*relu)(double* x, std::size_t n);
};

const KernelTable& scalar_kernels();

/// nullptr when the AVX2 variant was not compiled in.
const KernelTable* avx2_kernels();

bool cpu_has_avx2_fma();

/// The active table. Resolved once; thread-safe.
const KernelTable& active();

/// Overrides the active table (tests and benchmarks). Throws if the
/// requested variant is unavailable on this build or CPU.
void select(Isa isa);

Isa parse_isa(std::string_view name);

// Convenience wrappers over active().
inline double dot(const double* a, const double* b, std::size_t n) {
  return active().dot(a, b, n);
}
inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  active().axpy(alpha, x, y, n);
}
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
                    std::size_t lda, const double* b, std::size_t ldb, double* c,
                    std::size_t ldc) {
  active().gemm_nn(m, n, k, a, lda, b, ldb, c, ldc);
}
inline void adagrad(double* param, double* acc, const double* grad, std::size_t n,
                    double lr, double eps) {
  active().adagrad(param, acc, grad, n, lr, eps);
}
inline void relu(double* x, std::size_t n) { active().relu(x, n); }

}  // namespace dstn::simd
