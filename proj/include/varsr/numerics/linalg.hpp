#pragma once

namespace varsr::linalg {

// Row-major C = alpha * op(A) * op(B) + beta * C, backed by CBLAS.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc);

// Pins the BLAS backend to a single thread so reductions run in a fixed order.
void set_deterministic(bool on);
bool deterministic();

}  // namespace varsr::linalg
