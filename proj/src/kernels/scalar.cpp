#include <cstring>

#include "gemm_common.hpp"
#include "mor/kernels/kernels.hpp"

namespace mor::kernels {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void gemm_nn_scalar(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* b, double* c, bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(double) * m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double* c_row = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a[i * k + p];
      const double* b_row = b + p * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += s * b_row[j];
    }
  }
}

void gemm_nt_scalar(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* b, double* c, bool accumulate) {
  detail::gemm_nt_via_dot<&dot_scalar>(m, k, n, a, b, c, accumulate);
}

void gemm_tn_scalar(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* b, double* c, bool accumulate) {
  detail::gemm_tn_via_axpy<&axpy_scalar>(m, k, n, a, b, c, accumulate);
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{&dot_scalar, &axpy_scalar, &gemm_nn_scalar, &gemm_nt_scalar,
                                 &gemm_tn_scalar};
  return table;
}

}  // namespace mor::kernels
