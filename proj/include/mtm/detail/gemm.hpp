#pragma once

namespace mtm::detail {

/// c[i][j] = (accumulate ? c[i][j] : 0) + sum_k a[i][k] * b[k][j]
///
/// Every output element is a chain of std::fma over k in ascending order, so
/// the result is identical to a naive triple loop that uses the same fma chain.
void gemm(int m, int n, int k, const double* a, int lda, const double* b,
          int ldb, double* c, int ldc, bool accumulate);

}  // namespace mtm::detail
