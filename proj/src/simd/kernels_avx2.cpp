// Compiled with -mavx2 -mfma. Only reached after a CPUID check.

#include <immintrin.h>

#include <algorithm>
#include <cmath>

#include "dstn/simd/kernels.hpp"

namespace dstn::simd {
namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d s0 = _mm256_setzero_pd();
  __m256d s1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
    s1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), s1);
  }
  for (; i + 4 <= n; i += 4) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
  }
  double s = hsum(_mm256_add_pd(s0, s1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vy = _mm256_loadu_pd(y + i);
    vy = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy);
    _mm256_storeu_pd(y + i, vy);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

constexpr std::size_t kBlockK = 256;
constexpr std::size_t kBlockN = 256;

// C[4 x 8] += A[4 x kc] * B[kc x 8]
inline void micro_4x8(std::size_t kc, const double* a, std::size_t lda,
                      const double* b, std::size_t ldb, double* c, std::size_t ldc) {
  __m256d c00 = _mm256_loadu_pd(c);
  __m256d c01 = _mm256_loadu_pd(c + 4);
  __m256d c10 = _mm256_loadu_pd(c + ldc);
  __m256d c11 = _mm256_loadu_pd(c + ldc + 4);
  __m256d c20 = _mm256_loadu_pd(c + 2 * ldc);
  __m256d c21 = _mm256_loadu_pd(c + 2 * ldc + 4);
  __m256d c30 = _mm256_loadu_pd(c + 3 * ldc);
  __m256d c31 = _mm256_loadu_pd(c + 3 * ldc + 4);
  for (std::size_t p = 0; p < kc; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * ldb);
    const __m256d b1 = _mm256_loadu_pd(b + p * ldb + 4);
    __m256d av = _mm256_broadcast_sd(a + p);
    c00 = _mm256_fmadd_pd(av, b0, c00);
    c01 = _mm256_fmadd_pd(av, b1, c01);
    av = _mm256_broadcast_sd(a + lda + p);
    c10 = _mm256_fmadd_pd(av, b0, c10);
    c11 = _mm256_fmadd_pd(av, b1, c11);
    av = _mm256_broadcast_sd(a + 2 * lda + p);
    c20 = _mm256_fmadd_pd(av, b0, c20);
    c21 = _mm256_fmadd_pd(av, b1, c21);
    av = _mm256_broadcast_sd(a + 3 * lda + p);
    c30 = _mm256_fmadd_pd(av, b0, c30);
    c31 = _mm256_fmadd_pd(av, b1, c31);
  }
  _mm256_storeu_pd(c, c00);
  _mm256_storeu_pd(c + 4, c01);
  _mm256_storeu_pd(c + ldc, c10);
  _mm256_storeu_pd(c + ldc + 4, c11);
  _mm256_storeu_pd(c + 2 * ldc, c20);
  _mm256_storeu_pd(c + 2 * ldc + 4, c21);
  _mm256_storeu_pd(c + 3 * ldc, c30);
  _mm256_storeu_pd(c + 3 * ldc + 4, c31);
}

// One row of C over columns [0, n): c += a[0..kc) * B.
inline void row_update(std::size_t n, std::size_t kc, const double* a,
                       const double* b, std::size_t ldb, double* c) {
  for (std::size_t p = 0; p < kc; ++p) {
    const double ap = a[p];
    if (ap == 0.0) continue;
    axpy_avx2(ap, b + p * ldb, c, n);
  }
}

void gemm_nn_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a,
                  std::size_t lda, const double* b, std::size_t ldb, double* c,
                  std::size_t ldc) {
  for (std::size_t jc = 0; jc < n; jc += kBlockN) {
    const std::size_t nc = std::min(kBlockN, n - jc);
    const std::size_t nc8 = nc / 8 * 8;
    for (std::size_t pc = 0; pc < k; pc += kBlockK) {
      const std::size_t kc = std::min(kBlockK, k - pc);
      const double* bp = b + pc * ldb + jc;
      std::size_t i = 0;
      for (; i + 4 <= m; i += 4) {
        const double* ap = a + i * lda + pc;
        double* cp = c + i * ldc + jc;
        for (std::size_t j = 0; j < nc8; j += 8) {
          micro_4x8(kc, ap, lda, bp + j, ldb, cp + j, ldc);
        }
        if (nc8 < nc) {
          for (std::size_t r = 0; r < 4; ++r) {
            row_update(nc - nc8, kc, ap + r * lda, bp + nc8, ldb, cp + r * ldc + nc8);
          }
        }
      }
      for (; i < m; ++i) {
        row_update(nc, kc, a + i * lda + pc, bp, ldb, c + i * ldc + jc);
      }
    }
  }
}

void adagrad_avx2(double* param, double* acc, const double* grad, std::size_t n,
                  double lr, double eps) {
  const __m256d vlr = _mm256_set1_pd(lr);
  const __m256d veps = _mm256_set1_pd(eps);
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d g = _mm256_loadu_pd(grad + i);
    // Separate mul and add keep the accumulator bit-identical to the scalar path.
    __m256d a = _mm256_add_pd(_mm256_loadu_pd(acc + i), _mm256_mul_pd(g, g));
    _mm256_storeu_pd(acc + i, a);
    const __m256d step =
        _mm256_div_pd(_mm256_mul_pd(vlr, g), _mm256_add_pd(_mm256_sqrt_pd(a), veps));
    const __m256d nonzero = _mm256_cmp_pd(g, zero, _CMP_NEQ_UQ);
    const __m256d p = _mm256_loadu_pd(param + i);
    _mm256_storeu_pd(param + i, _mm256_blendv_pd(p, _mm256_sub_pd(p, step), nonzero));
  }
  for (; i < n; ++i) {
    const double g = grad[i];
    acc[i] += g * g;
    if (g != 0.0) param[i] -= lr * g / (std::sqrt(acc[i]) + eps);
  }
}

void relu_avx2(double* x, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(x + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
  }
  for (; i < n; ++i) x[i] = std::max(0.0, x[i]);
}

}  // namespace

const KernelTable* avx2_kernels() {
  static const KernelTable table{Isa::avx2,   "avx2",       dot_avx2, axpy_avx2,
                                 gemm_nn_avx2, adagrad_avx2, relu_avx2};
  return &table;
}

}  // namespace dstn::simd
