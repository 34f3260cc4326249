#pragma once

// Minimal CBLAS surface for the GEMM-backed kernels. Prototypes are declared
// directly (the CBLAS ABI is stable) so no BLAS vendor header is needed.

extern "C" {
void cblas_sgemm(int order, int trans_a, int trans_b, int m, int n, int k,
                 float alpha, const float* a, int lda, const float* b, int ldb,
                 float beta, float* c, int ldc);
void cblas_dgemm(int order, int trans_a, int trans_b, int m, int n, int k,
                 double alpha, const double* a, int lda, const double* b,
                 int ldb, double beta, double* c, int ldc);
void openblas_set_num_threads(int n);
}

namespace zsdfa {

inline constexpr int kCblasRowMajor = 101;
inline constexpr int kCblasNoTrans = 111;
inline constexpr int kCblasTrans = 112;

/// BLAS-internal threading is pinned to 1: parallelism lives at the sample /
/// run level, and a fixed thread count keeps results bit-reproducible.
inline void pin_blas_threads() {
    static const bool once = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)once;
}

/// C(m x n) = alpha * op(A) * op(B) + beta * C, all row-major.
/// op(A) is (m x k): stored m x k when !trans_a, k x m when trans_a.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a,
          const T* b, T beta, T* c) {
    pin_blas_threads();
    const int lda = trans_a ? m : k;
    const int ldb = trans_b ? k : n;
    if constexpr (sizeof(T) == sizeof(float)) {
        cblas_sgemm(kCblasRowMajor, trans_a ? kCblasTrans : kCblasNoTrans,
                    trans_b ? kCblasTrans : kCblasNoTrans, m, n, k, alpha, a,
                    lda, b, ldb, beta, c, n);
    } else {
        cblas_dgemm(kCblasRowMajor, trans_a ? kCblasTrans : kCblasNoTrans,
                    trans_b ? kCblasTrans : kCblasNoTrans, m, n, k, alpha, a,
                    lda, b, ldb, beta, c, n);
    }
}

} // namespace zsdfa
