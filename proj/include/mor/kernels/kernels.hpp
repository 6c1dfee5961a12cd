#pragma once

// Dense double-precision inner loops used by the autograd tensor library.
//
// Every kernel has a scalar reference implementation and, on x86-64 hosts
// with AVX2+FMA, a vectorized variant. The active backend is chosen once at
// first use from CPUID, and can be pinned with MOR_KERNELS=scalar|avx2 or
// set_backend(). All matrices are dense row-major.

#include <cstddef>
#include <span>
#include <string_view>

namespace mor::kernels {

enum class Backend { Scalar, Avx2 };

struct KernelTable {
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // C[m x n] (+)= A[m x k] * B[k x n]
  void (*gemm_nn)(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c, bool accumulate);
  // C[m x n] (+)= A[m x k] * B[n x k]^T
  void (*gemm_nt)(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c, bool accumulate);
  // C[m x n] (+)= A[k x m]^T * B[k x n]
  void (*gemm_tn)(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c, bool accumulate);
};

const KernelTable& scalar_table();
// nullptr when the AVX2 variant was not compiled in.
const KernelTable* avx2_table();

bool backend_supported(Backend backend);
Backend active_backend();
// Throws ConfigError when the backend is not supported on this host.
void set_backend(Backend backend);
std::string_view backend_name(Backend backend);
Backend parse_backend(std::string_view name);

const KernelTable& table_for(Backend backend);
const KernelTable& active();

double dot(std::span<const double> a, std::span<const double> b);
void axpy(double alpha, std::span<const double> x, std::span<double> y);
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate = false);
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate = false);
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate = false);

}  // namespace mor::kernels
