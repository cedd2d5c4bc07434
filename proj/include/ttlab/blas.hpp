#pragma once

#include <cstdint>

namespace ttlab::blas {

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C, where op(A) is
// [m x k] and op(B) is [k x n].  Dispatches to OpenBLAS when the shared
// library can be loaded, otherwise falls back to a portable kernel.
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
          float alpha, const float* a, int64_t lda, const float* b, int64_t ldb,
          float beta, float* c, int64_t ldc);
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
          double alpha, const double* a, int64_t lda, const double* b, int64_t ldb,
          double beta, double* c, int64_t ldc);

// "openblas:<kernel>" or "builtin".
const char* backend_name();

}  // namespace ttlab::blas
