#pragma once

// Dense float GEMM kernels. Every kernel accumulates each output element in
// increasing order of the shared index, so the three layouts agree bit-for-bit
// with a naive triple loop. Build with -ffp-contract=off.

#include <cstddef>

namespace bitmar::kernels {

/// C[m×n] += A[m×k] · B[k×n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const float* __restrict a,
                    const float* __restrict b, float* __restrict c) {
    for (std::size_t i = 0; i < m; ++i) {
        float* __restrict ci = c + i * n;
        const float* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const float av = ai[p];
            const float* __restrict bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

/// C[m×n] += A[k×m]ᵀ · B[k×n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const float* __restrict a,
                    const float* __restrict b, float* __restrict c) {
    for (std::size_t p = 0; p < k; ++p) {
        const float* ap = a + p * m;
        const float* __restrict bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const float av = ap[i];
            float* __restrict ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

/// out[n×m] = in[m×n]ᵀ
inline void transpose(std::size_t m, std::size_t n, const float* __restrict in, float* __restrict out) {
    constexpr std::size_t kBlock = 16;
    for (std::size_t i0 = 0; i0 < m; i0 += kBlock) {
        for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
            const std::size_t i1 = i0 + kBlock < m ? i0 + kBlock : m;
            const std::size_t j1 = j0 + kBlock < n ? j0 + kBlock : n;
            for (std::size_t i = i0; i < i1; ++i)
                for (std::size_t j = j0; j < j1; ++j) out[j * m + i] = in[i * n + j];
        }
    }
}

}  // namespace bitmar::kernels
