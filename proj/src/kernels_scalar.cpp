// Reference kernels. Plain loops, kept branch-free in the inner dimension so
// the compiler can autovectorize at the baseline ISA; the AVX2 variants are
// validated against these.

#include "posesynth/kernels.hpp"

namespace posesynth::kernels {
namespace {

double dot_scalar(const double* a, const double* b, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy_scalar(double alpha, const double* x, double* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_scalar(double alpha, double* x, size_t n) {
  for (size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void gemm_nt_scalar(const double* a, const double* b, double* c, size_t m,
                    size_t n, size_t k, bool accumulate) {
  for (size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (size_t j = 0; j < n; ++j) {
      double acc = accumulate ? ci[j] : 0.0;
      const double* bj = b + j * k;
      for (size_t l = 0; l < k; ++l) acc += ai[l] * bj[l];
      ci[j] = acc;
    }
  }
}

void gemm_nn_scalar(const double* a, const double* b, double* c, size_t m,
                    size_t n, size_t k, bool accumulate) {
  for (size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    if (!accumulate) {
      for (size_t j = 0; j < n; ++j) ci[j] = 0.0;
    }
    const double* ai = a + i * k;
    for (size_t l = 0; l < k; ++l) {
      const double al = ai[l];
      const double* bl = b + l * n;
      for (size_t j = 0; j < n; ++j) ci[j] += al * bl[j];
    }
  }
}

void gemm_tn_scalar(const double* a, const double* b, double* c, size_t m,
                    size_t n, size_t k, bool accumulate) {
  if (!accumulate) {
    for (size_t i = 0; i < m * n; ++i) c[i] = 0.0;
  }
  for (size_t l = 0; l < k; ++l) {
    const double* al = a + l * m;
    const double* bl = b + l * n;
    for (size_t i = 0; i < m; ++i) {
      const double ali = al[i];
      double* ci = c + i * n;
      for (size_t j = 0; j < n; ++j) ci[j] += ali * bl[j];
    }
  }
}

}  // namespace

namespace detail {

const KernelTable& scalar_table() {
  static const KernelTable table = {dot_scalar,     axpy_scalar,
                                    scale_scalar,   gemm_nt_scalar,
                                    gemm_nn_scalar, gemm_tn_scalar};
  return table;
}

}  // namespace detail
}  // namespace posesynth::kernels
