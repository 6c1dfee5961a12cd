#include <atomic>
#include <cstdlib>
#include <string>

#include "mor/errors.hpp"
#include "mor/kernels/kernels.hpp"

namespace mor::kernels {

#ifndef MOR_HAVE_AVX2
const KernelTable* avx2_table() { return nullptr; }
#endif

namespace {

bool cpu_has_avx2_fma() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Backend detect_default() {
  if (const char* env = std::getenv("MOR_KERNELS"); env != nullptr && *env != '\0') {
    const Backend requested = parse_backend(env);
    if (backend_supported(requested)) return requested;
  }
  return backend_supported(Backend::Avx2) ? Backend::Avx2 : Backend::Scalar;
}

std::atomic<const KernelTable*>& active_slot() {
  static std::atomic<const KernelTable*> slot{&table_for(detect_default())};
  return slot;
}

void check_len(std::size_t have, std::size_t need, const char* what) {
  if (have < need) {
    throw DimensionError(std::string("kernel buffer too small: ") + what);
  }
}

}  // namespace

bool backend_supported(Backend backend) {
  switch (backend) {
    case Backend::Scalar:
      return true;
    case Backend::Avx2:
      return avx2_table() != nullptr && cpu_has_avx2_fma();
  }
  return false;
}

std::string_view backend_name(Backend backend) {
  return backend == Backend::Avx2 ? "avx2" : "scalar";
}

Backend parse_backend(std::string_view name) {
  if (name == "scalar") return Backend::Scalar;
  if (name == "avx2") return Backend::Avx2;
  throw ConfigError("unknown kernel backend: " + std::string(name));
}

const KernelTable& table_for(Backend backend) {
  if (backend == Backend::Avx2 && avx2_table() != nullptr) return *avx2_table();
  return scalar_table();
}

Backend active_backend() {
  return active_slot().load() == &scalar_table() ? Backend::Scalar : Backend::Avx2;
}

void set_backend(Backend backend) {
  if (!backend_supported(backend)) {
    throw ConfigError("kernel backend not supported on this host: " +
                      std::string(backend_name(backend)));
  }
  active_slot().store(&table_for(backend));
}

const KernelTable& active() { return *active_slot().load(); }

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  return active().dot(a.data(), b.data(), a.size());
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw DimensionError("axpy: length mismatch");
  active().axpy(alpha, x.data(), y.data(), x.size());
}

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate) {
  check_len(a.size(), m * k, "gemm_nn A");
  check_len(b.size(), k * n, "gemm_nn B");
  check_len(c.size(), m * n, "gemm_nn C");
  active().gemm_nn(m, k, n, a.data(), b.data(), c.data(), accumulate);
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate) {
  check_len(a.size(), m * k, "gemm_nt A");
  check_len(b.size(), n * k, "gemm_nt B");
  check_len(c.size(), m * n, "gemm_nt C");
  active().gemm_nt(m, k, n, a.data(), b.data(), c.data(), accumulate);
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate) {
  check_len(a.size(), k * m, "gemm_tn A");
  check_len(b.size(), k * n, "gemm_tn B");
  check_len(c.size(), m * n, "gemm_tn C");
  active().gemm_tn(m, k, n, a.data(), b.data(), c.data(), accumulate);
}

}  // namespace mor::kernels
