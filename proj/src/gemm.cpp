#include "swp/gemm.hpp"

#include <cblas.h>

extern "C" void openblas_set_num_threads(int num_threads);
extern "C" int openblas_get_num_procs(void);

namespace swp {

void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
           const float* b, int ldb, float beta, float* c, int ldc) {
  if (m == 0 || n == 0) return;
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
              alpha, a, lda, b, ldb, beta, c, ldc);
}

void set_single_threaded(bool single) { openblas_set_num_threads(single ? 1 : openblas_get_num_procs()); }

}  // namespace swp
