// Compiled with -mavx2 -mfma. Only reached after a CPUID check.
#include <immintrin.h>

#include <cstring>

#include "gemm_common.hpp"
#include "mor/kernels/kernels.hpp"

namespace mor::kernels {
namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  __m256d acc2 = _mm256_setzero_pd();
  __m256d acc3 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    acc2 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 8), _mm256_loadu_pd(b + i + 8), acc2);
    acc3 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 12), _mm256_loadu_pd(b + i + 12), acc3);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  }
  double acc = hsum(_mm256_add_pd(_mm256_add_pd(acc0, acc1), _mm256_add_pd(acc2, acc3)));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d s = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(s, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    _mm256_storeu_pd(y + i + 4,
                     _mm256_fmadd_pd(s, _mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4)));
  }
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(s, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// Register-blocked over 16 output columns; each A element is broadcast once
// per column block and C stays in registers across the full k loop.
void gemm_nn_avx2(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a_row = a + i * k;
    double* c_row = c + i * n;
    std::size_t j = 0;
    for (; j + 16 <= n; j += 16) {
      __m256d c0, c1, c2, c3;
      if (accumulate) {
        c0 = _mm256_loadu_pd(c_row + j);
        c1 = _mm256_loadu_pd(c_row + j + 4);
        c2 = _mm256_loadu_pd(c_row + j + 8);
        c3 = _mm256_loadu_pd(c_row + j + 12);
      } else {
        c0 = c1 = c2 = c3 = _mm256_setzero_pd();
      }
      for (std::size_t p = 0; p < k; ++p) {
        const __m256d s = _mm256_broadcast_sd(a_row + p);
        const double* b_row = b + p * n + j;
        c0 = _mm256_fmadd_pd(s, _mm256_loadu_pd(b_row), c0);
        c1 = _mm256_fmadd_pd(s, _mm256_loadu_pd(b_row + 4), c1);
        c2 = _mm256_fmadd_pd(s, _mm256_loadu_pd(b_row + 8), c2);
        c3 = _mm256_fmadd_pd(s, _mm256_loadu_pd(b_row + 12), c3);
      }
      _mm256_storeu_pd(c_row + j, c0);
      _mm256_storeu_pd(c_row + j + 4, c1);
      _mm256_storeu_pd(c_row + j + 8, c2);
      _mm256_storeu_pd(c_row + j + 12, c3);
    }
    for (; j + 4 <= n; j += 4) {
      __m256d c0 = accumulate ? _mm256_loadu_pd(c_row + j) : _mm256_setzero_pd();
      for (std::size_t p = 0; p < k; ++p) {
        c0 = _mm256_fmadd_pd(_mm256_broadcast_sd(a_row + p), _mm256_loadu_pd(b + p * n + j), c0);
      }
      _mm256_storeu_pd(c_row + j, c0);
    }
    for (; j < n; ++j) {
      double acc = accumulate ? c_row[j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a_row[p] * b[p * n + j];
      c_row[j] = acc;
    }
  }
}

void gemm_nt_avx2(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c, bool accumulate) {
  detail::gemm_nt_via_dot<&dot_avx2>(m, k, n, a, b, c, accumulate);
}

void gemm_tn_avx2(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c, bool accumulate) {
  detail::gemm_tn_via_axpy<&axpy_avx2>(m, k, n, a, b, c, accumulate);
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable table{&dot_avx2, &axpy_avx2, &gemm_nn_avx2, &gemm_nt_avx2,
                                 &gemm_tn_avx2};
  return &table;
}

}  // namespace mor::kernels
