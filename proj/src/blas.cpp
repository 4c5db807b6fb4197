#include "arbor/blas.hpp"

#include <cstdlib>

extern "C" {
void sgemm_(const char* transa, const char* transb, const int* m, const int* n,
            const int* k, const float* alpha, const float* a, const int* lda,
            const float* b, const int* ldb, const float* beta, float* c,
            const int* ldc);
void dgemm_(const char* transa, const char* transb, const int* m, const int* n,
            const int* k, const double* alpha, const double* a, const int* lda,
            const double* b, const int* ldb, const double* beta, double* c,
            const int* ldc);
}

namespace arbor {

namespace {

// Row-major C = op(A)op(B) maps onto column-major C^T = op(B)^T op(A)^T.
struct CmArgs {
  char transa, transb;
  int m, n, k, lda, ldb, ldc;
};

CmArgs map_row_major(bool ta, bool tb, int64_t m, int64_t n, int64_t k) {
  CmArgs a;
  a.transa = tb ? 'T' : 'N';
  a.transb = ta ? 'T' : 'N';
  a.m = static_cast<int>(n);
  a.n = static_cast<int>(m);
  a.k = static_cast<int>(k);
  a.lda = tb ? static_cast<int>(k) : static_cast<int>(n);
  a.ldb = ta ? static_cast<int>(m) : static_cast<int>(k);
  a.ldc = static_cast<int>(n);
  return a;
}

}  // namespace

template <>
void gemm<float>(bool ta, bool tb, int64_t m, int64_t n, int64_t k, float alpha,
                 const float* a, const float* b, float beta, float* c) {
  if (m == 0 || n == 0 || k == 0) return;
  CmArgs g = map_row_major(ta, tb, m, n, k);
  sgemm_(&g.transa, &g.transb, &g.m, &g.n, &g.k, &alpha, b, &g.lda, a, &g.ldb,
         &beta, c, &g.ldc);
}

template <>
void gemm<double>(bool ta, bool tb, int64_t m, int64_t n, int64_t k,
                  double alpha, const double* a, const double* b, double beta,
                  double* c) {
  if (m == 0 || n == 0 || k == 0) return;
  CmArgs g = map_row_major(ta, tb, m, n, k);
  dgemm_(&g.transa, &g.transb, &g.m, &g.n, &g.k, &alpha, b, &g.lda, a, &g.ldb,
         &beta, c, &g.ldc);
}

void pin_blas_single_thread() {
  // Must run before the first BLAS call; OpenBLAS reads this at init.
  setenv("OPENBLAS_NUM_THREADS", "1", 0);
  setenv("OMP_NUM_THREADS", "1", 0);
}

}  // namespace arbor
