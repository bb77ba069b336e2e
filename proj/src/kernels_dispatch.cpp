#include "posesynth/kernels.hpp"

#include "posesynth/errors.hpp"

namespace posesynth::kernels {
namespace {

const detail::KernelTable* g_table = nullptr;
Backend g_backend = Backend::kAuto;

void ensure_init() {
  if (g_table) return;
  if (avx2_available()) {
    g_table = &detail::avx2_table();
    g_backend = Backend::kAvx2;
  } else {
    g_table = &detail::scalar_table();
    g_backend = Backend::kScalar;
  }
}

}  // namespace

bool avx2_available() {
#if (defined(__x86_64__) || defined(_M_X64)) && defined(__GNUC__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

void set_backend(Backend backend) {
  switch (backend) {
    case Backend::kAuto:
      g_table = nullptr;
      ensure_init();
      break;
    case Backend::kScalar:
      g_table = &detail::scalar_table();
      g_backend = Backend::kScalar;
      break;
    case Backend::kAvx2:
      if (!avx2_available()) throw ConfigError("avx2 backend not available on this cpu");
      g_table = &detail::avx2_table();
      g_backend = Backend::kAvx2;
      break;
  }
}

Backend active_backend() {
  ensure_init();
  return g_backend;
}

std::string backend_name(Backend backend) {
  switch (backend) {
    case Backend::kAuto: return "auto";
    case Backend::kScalar: return "scalar";
    case Backend::kAvx2: return "avx2";
  }
  return "unknown";
}

Backend backend_from_name(const std::string& name) {
  if (name == "auto") return Backend::kAuto;
  if (name == "scalar") return Backend::kScalar;
  if (name == "avx2") return Backend::kAvx2;
  throw ConfigError("unknown kernel backend: " + name);
}

double dot(const double* a, const double* b, size_t n) {
  ensure_init();
  return g_table->dot(a, b, n);
}

void axpy(double alpha, const double* x, double* y, size_t n) {
  ensure_init();
  g_table->axpy(alpha, x, y, n);
}

void scale(double alpha, double* x, size_t n) {
  ensure_init();
  g_table->scale(alpha, x, n);
}

void gemm_nt(const double* a, const double* b, double* c, size_t m, size_t n,
             size_t k, bool accumulate) {
  ensure_init();
  g_table->gemm_nt(a, b, c, m, n, k, accumulate);
}

void gemm_nn(const double* a, const double* b, double* c, size_t m, size_t n,
             size_t k, bool accumulate) {
  ensure_init();
  g_table->gemm_nn(a, b, c, m, n, k, accumulate);
}

void gemm_tn(const double* a, const double* b, double* c, size_t m, size_t n,
             size_t k, bool accumulate) {
  ensure_init();
  g_table->gemm_tn(a, b, c, m, n, k, accumulate);
}

}  // namespace posesynth::kernels
