#pragma once

namespace swp {

// Row-major single-precision C = alpha * op(A) * op(B) + beta * C.
// op(A) is m x k, op(B) is k x n.
void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
           const float* b, int ldb, float beta, float* c, int ldc);

// Restrict the BLAS backend to one thread so reductions run in a fixed order.
void set_single_threaded(bool single);

}  // namespace swp
