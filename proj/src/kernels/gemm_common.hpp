#pragma once

// Transposed GEMM flavours expressed through a backend's dot/axpy. Included
// by each backend translation unit so the loops are compiled with that
// unit's target flags.

#include <cstddef>
#include <cstring>

namespace mor::kernels::detail {

template <auto Dot>
inline void gemm_nt_via_dot(std::size_t m, std::size_t k, std::size_t n, const double* a,
                            const double* b, double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a_row = a + i * k;
    double* c_row = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = Dot(a_row, b + j * k, k);
      c_row[j] = accumulate ? c_row[j] + v : v;
    }
  }
}

template <auto Axpy>
inline void gemm_tn_via_axpy(std::size_t m, std::size_t k, std::size_t n, const double* a,
                             const double* b, double* c, bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(double) * m * n);
  for (std::size_t p = 0; p < k; ++p) {
    const double* a_row = a + p * m;
    const double* b_row = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double s = a_row[i];
      if (s != 0.0) Axpy(s, b_row, c + i * n, n);
    }
  }
}

}  // namespace mor::kernels::detail
