#ifndef ARBOR_BLAS_HPP_
#define ARBOR_BLAS_HPP_

#include <cstdint>

namespace arbor {

// C[m x n] = alpha * op(A)[m x k] * op(B)[k x n] + beta * C, all row-major.
// ta/tb transpose the stored matrix: with ta, A is stored k x m.
// Backed by the system BLAS; deterministic at a fixed BLAS thread count.
template <typename T>
void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, T alpha,
          const T* a, const T* b, T beta, T* c);

// Pins BLAS to a single internal thread so the pipeline controls all
// parallelism itself (required for deterministic gradient reduction).
void pin_blas_single_thread();

}  // namespace arbor

#endif  // ARBOR_BLAS_HPP_
