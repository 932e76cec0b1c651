#include "mtm/detail/gemm.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#if defined(__AVX512F__) || defined(__AVX2__)
#include <immintrin.h>
#endif

namespace mtm::detail {
namespace {

// Every path computes each output as the same ascending-k fma chain, so the
// choice of instruction set never changes a single bit of the result.

#if defined(__AVX512F__)
constexpr int kNr = 16;  // two zmm registers per row

template <int MR>
void micro_kernel(int k, const double* a, int lda, const double* b, int ldb,
                  double* c, int ldc, bool accumulate) {
  __m512d lo[MR];
  __m512d hi[MR];
  for (int r = 0; r < MR; ++r) {
    lo[r] = accumulate ? _mm512_loadu_pd(c + r * ldc) : _mm512_setzero_pd();
    hi[r] = accumulate ? _mm512_loadu_pd(c + r * ldc + 8) : _mm512_setzero_pd();
  }
  for (int p = 0; p < k; ++p) {
    const double* brow = b + static_cast<long>(p) * ldb;
    const __m512d b0 = _mm512_loadu_pd(brow);
    const __m512d b1 = _mm512_loadu_pd(brow + 8);
    for (int r = 0; r < MR; ++r) {
      const __m512d av = _mm512_set1_pd(a[r * lda + p]);
      lo[r] = _mm512_fmadd_pd(av, b0, lo[r]);
      hi[r] = _mm512_fmadd_pd(av, b1, hi[r]);
    }
  }
  for (int r = 0; r < MR; ++r) {
    _mm512_storeu_pd(c + r * ldc, lo[r]);
    _mm512_storeu_pd(c + r * ldc + 8, hi[r]);
  }
}
constexpr int kMr = 12;

#elif defined(__AVX2__) && defined(__FMA__)
constexpr int kNr = 8;

template <int MR>
void micro_kernel(int k, const double* a, int lda, const double* b, int ldb,
                  double* c, int ldc, bool accumulate) {
  __m256d lo[MR];
  __m256d hi[MR];
  for (int r = 0; r < MR; ++r) {
    lo[r] = accumulate ? _mm256_loadu_pd(c + r * ldc) : _mm256_setzero_pd();
    hi[r] = accumulate ? _mm256_loadu_pd(c + r * ldc + 4) : _mm256_setzero_pd();
  }
  for (int p = 0; p < k; ++p) {
    const double* brow = b + static_cast<long>(p) * ldb;
    const __m256d b0 = _mm256_loadu_pd(brow);
    const __m256d b1 = _mm256_loadu_pd(brow + 4);
    for (int r = 0; r < MR; ++r) {
      const __m256d av = _mm256_set1_pd(a[r * lda + p]);
      lo[r] = _mm256_fmadd_pd(av, b0, lo[r]);
      hi[r] = _mm256_fmadd_pd(av, b1, hi[r]);
    }
  }
  for (int r = 0; r < MR; ++r) {
    _mm256_storeu_pd(c + r * ldc, lo[r]);
    _mm256_storeu_pd(c + r * ldc + 4, hi[r]);
  }
}
constexpr int kMr = 6;

#else
constexpr int kNr = 8;

template <int MR>
void micro_kernel(int k, const double* a, int lda, const double* b, int ldb,
                  double* c, int ldc, bool accumulate) {
  double acc[MR][kNr];
  for (int r = 0; r < MR; ++r)
    for (int j = 0; j < kNr; ++j) acc[r][j] = accumulate ? c[r * ldc + j] : 0.0;
  for (int p = 0; p < k; ++p) {
    const double* brow = b + static_cast<long>(p) * ldb;
    for (int r = 0; r < MR; ++r) {
      const double av = a[r * lda + p];
      for (int j = 0; j < kNr; ++j) acc[r][j] = std::fma(av, brow[j], acc[r][j]);
    }
  }
  for (int r = 0; r < MR; ++r)
    for (int j = 0; j < kNr; ++j) c[r * ldc + j] = acc[r][j];
}
constexpr int kMr = 4;
#endif

template <int MR>
void dispatch_rows(int rows, int k, const double* a, int lda, const double* b,
                   int ldb, double* c, int ldc, bool accumulate) {
  if constexpr (MR == 1) {
    micro_kernel<1>(k, a, lda, b, ldb, c, ldc, accumulate);
  } else {
    if (rows == MR) {
      micro_kernel<MR>(k, a, lda, b, ldb, c, ldc, accumulate);
    } else {
      dispatch_rows<MR - 1>(rows, k, a, lda, b, ldb, c, ldc, accumulate);
    }
  }
}

void column_block(int m, int k, const double* a, int lda, const double* b,
                  int ldb, double* c, int ldc, bool accumulate) {
  for (int i0 = 0; i0 < m; i0 += kMr) {
    const int rows = std::min(kMr, m - i0);
    dispatch_rows<kMr>(rows, k, a + static_cast<long>(i0) * lda, lda, b, ldb,
                       c + static_cast<long>(i0) * ldc, ldc, accumulate);
  }
}

}  // namespace

void gemm(int m, int n, int k, const double* a, int lda, const double* b,
          int ldb, double* c, int ldc, bool accumulate) {
  if (m <= 0 || n <= 0) return;
  const int full = n - n % kNr;
  for (int j0 = 0; j0 < full; j0 += kNr) {
    column_block(m, k, a, lda, b + j0, ldb, c + j0, ldc, accumulate);
  }
  if (full == n) return;

  // Column tail: run the same kernel on zero-padded copies.
  const int tail = n - full;
  std::vector<double> bpad(static_cast<std::size_t>(std::max(k, 1)) * kNr, 0.0);
  for (int p = 0; p < k; ++p) {
    std::copy_n(b + static_cast<long>(p) * ldb + full, tail,
                bpad.data() + static_cast<std::size_t>(p) * kNr);
  }
  std::vector<double> cpad(static_cast<std::size_t>(m) * kNr, 0.0);
  if (accumulate) {
    for (int r = 0; r < m; ++r)
      std::copy_n(c + static_cast<long>(r) * ldc + full, tail,
                  cpad.data() + static_cast<std::size_t>(r) * kNr);
  }
  column_block(m, k, a, lda, bpad.data(), kNr, cpad.data(), kNr, accumulate);
  for (int r = 0; r < m; ++r)
    std::copy_n(cpad.data() + static_cast<std::size_t>(r) * kNr, tail,
                c + static_cast<long>(r) * ldc + full);
}

}  // namespace mtm::detail
