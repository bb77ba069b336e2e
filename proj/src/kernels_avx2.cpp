// AVX2+FMA kernels. This translation unit is the only one compiled with
// -mavx2 -mfma; callers must check avx2_available() before dispatching here.

#include "posesynth/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

namespace posesynth::kernels {
namespace {

inline double hsum4(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d swap = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, swap));
}

double dot_avx2(const double* a, const double* b, size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  }
  double tail = 0.0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return hsum4(_mm256_add_pd(acc0, acc1)) + tail;
}

void axpy_avx2(double alpha, const double* x, double* y, size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vy = _mm256_loadu_pd(y + i);
    vy = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy);
    _mm256_storeu_pd(y + i, vy);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_avx2(double alpha, double* x, size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(x + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) x[i] *= alpha;
}

void gemm_nt_avx2(const double* a, const double* b, double* c, size_t m,
                  size_t n, size_t k, bool accumulate) {
  for (size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    size_t j = 0;
    // two output columns share each load of ai
    for (; j + 2 <= n; j += 2) {
      const double* b0 = b + j * k;
      const double* b1 = b0 + k;
      __m256d acc0 = _mm256_setzero_pd();
      __m256d acc1 = _mm256_setzero_pd();
      size_t l = 0;
      for (; l + 4 <= k; l += 4) {
        __m256d va = _mm256_loadu_pd(ai + l);
        acc0 = _mm256_fmadd_pd(va, _mm256_loadu_pd(b0 + l), acc0);
        acc1 = _mm256_fmadd_pd(va, _mm256_loadu_pd(b1 + l), acc1);
      }
      double s0 = hsum4(acc0), s1 = hsum4(acc1);
      for (; l < k; ++l) {
        s0 += ai[l] * b0[l];
        s1 += ai[l] * b1[l];
      }
      ci[j] = (accumulate ? ci[j] : 0.0) + s0;
      ci[j + 1] = (accumulate ? ci[j + 1] : 0.0) + s1;
    }
    for (; j < n; ++j) {
      ci[j] = (accumulate ? ci[j] : 0.0) + dot_avx2(ai, b + j * k, k);
    }
  }
}

// saxpy-form inner loop shared by gemm_nn and gemm_tn: ci += s * bl
inline void row_fma(double s, const double* bl, double* ci, size_t n) {
  const __m256d vs = _mm256_set1_pd(s);
  size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    __m256d c0 = _mm256_loadu_pd(ci + j);
    __m256d c1 = _mm256_loadu_pd(ci + j + 4);
    c0 = _mm256_fmadd_pd(vs, _mm256_loadu_pd(bl + j), c0);
    c1 = _mm256_fmadd_pd(vs, _mm256_loadu_pd(bl + j + 4), c1);
    _mm256_storeu_pd(ci + j, c0);
    _mm256_storeu_pd(ci + j + 4, c1);
  }
  for (; j + 4 <= n; j += 4) {
    __m256d c0 = _mm256_loadu_pd(ci + j);
    c0 = _mm256_fmadd_pd(vs, _mm256_loadu_pd(bl + j), c0);
    _mm256_storeu_pd(ci + j, c0);
  }
  for (; j < n; ++j) ci[j] += s * bl[j];
}

void gemm_nn_avx2(const double* a, const double* b, double* c, size_t m,
                  size_t n, size_t k, bool accumulate) {
  for (size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    if (!accumulate) {
      size_t j = 0;
      const __m256d z = _mm256_setzero_pd();
      for (; j + 4 <= n; j += 4) _mm256_storeu_pd(ci + j, z);
      for (; j < n; ++j) ci[j] = 0.0;
    }
    const double* ai = a + i * k;
    for (size_t l = 0; l < k; ++l) row_fma(ai[l], b + l * n, ci, n);
  }
}

void gemm_tn_avx2(const double* a, const double* b, double* c, size_t m,
                  size_t n, size_t k, bool accumulate) {
  if (!accumulate) {
    size_t i = 0;
    const __m256d z = _mm256_setzero_pd();
    for (; i + 4 <= m * n; i += 4) _mm256_storeu_pd(c + i, z);
    for (; i < m * n; ++i) c[i] = 0.0;
  }
  for (size_t l = 0; l < k; ++l) {
    const double* al = a + l * m;
    const double* bl = b + l * n;
    for (size_t i = 0; i < m; ++i) row_fma(al[i], bl, c + i * n, n);
  }
}

}  // namespace

namespace detail {

const KernelTable& avx2_table() {
  static const KernelTable table = {dot_avx2,     axpy_avx2,    scale_avx2,
                                    gemm_nt_avx2, gemm_nn_avx2, gemm_tn_avx2};
  return table;
}

}  // namespace detail
}  // namespace posesynth::kernels

#else  // non-x86 build: table must not be referenced

namespace posesynth::kernels::detail {

const KernelTable& avx2_table() { return scalar_table(); }

}  // namespace posesynth::kernels::detail

#endif
