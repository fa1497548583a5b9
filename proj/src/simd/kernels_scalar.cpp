#include <algorithm>
#include <cmath>

#include "dstn/simd/kernels.hpp"

namespace dstn::simd {
namespace {

double dot_ref(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_ref(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void gemm_nn_ref(std::size_t m, std::size_t n, std::size_t k, const double* a,
                 std::size_t lda, const double* b, std::size_t ldb, double* c,
                 std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * ldc;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * lda + p];
      if (aip == 0.0) continue;
      const double* bp = b + p * ldb;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void adagrad_ref(double* param, double* acc, const double* grad, std::size_t n,
                 double lr, double eps) {
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    acc[i] += g * g;
    if (g != 0.0) param[i] -= lr * g / (std::sqrt(acc[i]) + eps);
  }
}

void relu_ref(double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = std::max(0.0, x[i]);
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table{Isa::scalar, "scalar",   dot_ref, axpy_ref,
                                 gemm_nn_ref, adagrad_ref, relu_ref};
  return table;
}

}  // namespace dstn::simd
