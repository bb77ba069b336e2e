#pragma once

#include <cstddef>
#include <string>

// Dense double-precision kernels behind the tensor math. Every kernel has a
// scalar reference implementation and an AVX2+FMA variant; the active variant
// is picked at runtime from CPU capabilities and can be pinned for
// reproducibility or equivalence testing.
//
// All matrices are row-major.

namespace posesynth::kernels {

enum class Backend { kAuto, kScalar, kAvx2 };

// Pins the backend. kAuto re-probes the CPU. Throws ConfigError if the
// requested backend is not available on this machine.
void set_backend(Backend backend);

// The backend calls currently dispatch to (never kAuto).
Backend active_backend();

bool avx2_available();

std::string backend_name(Backend backend);
Backend backend_from_name(const std::string& name);

double dot(const double* a, const double* b, size_t n);

// y += alpha * x
void axpy(double alpha, const double* x, double* y, size_t n);

void scale(double alpha, double* x, size_t n);

// C (m x n) = A (m x k) * B^T, B is (n x k). accumulate adds into C.
void gemm_nt(const double* a, const double* b, double* c, size_t m, size_t n,
             size_t k, bool accumulate);

// C (m x n) = A (m x k) * B, B is (k x n).
void gemm_nn(const double* a, const double* b, double* c, size_t m, size_t n,
             size_t k, bool accumulate);

// C (m x n) = A^T * B, A is (k x m), B is (k x n).
void gemm_tn(const double* a, const double* b, double* c, size_t m, size_t n,
             size_t k, bool accumulate);

namespace detail {

struct KernelTable {
  double (*dot)(const double*, const double*, size_t);
  void (*axpy)(double, const double*, double*, size_t);
  void (*scale)(double, double*, size_t);
  void (*gemm_nt)(const double*, const double*, double*, size_t, size_t,
                  size_t, bool);
  void (*gemm_nn)(const double*, const double*, double*, size_t, size_t,
                  size_t, bool);
  void (*gemm_tn)(const double*, const double*, double*, size_t, size_t,
                  size_t, bool);
};

const KernelTable& scalar_table();
const KernelTable& avx2_table();  // only valid when avx2_available()

}  // namespace detail

}  // namespace posesynth::kernels
