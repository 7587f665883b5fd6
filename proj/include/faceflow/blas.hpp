#pragma once

#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "faceflow/common.hpp"

namespace faceflow::detail {

// Small GEMM kernels, deterministic for a fixed thread count: work is
// partitioned over output rows and every C element is reduced serially.

// C[M,N] = (accumulate ? C : 0) + A[M,K] * B[K,N]
template <class S>
void gemm_nn(const S* A, const S* B, S* C, int M, int K, int N, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int m = 0; m < M; ++m) {
        S* c = C + static_cast<int64_t>(m) * N;
        if (!accumulate)
            for (int n = 0; n < N; ++n) c[n] = S(0);
        const S* a = A + static_cast<int64_t>(m) * K;
        for (int k = 0; k < K; ++k) {
            const S ak = a[k];
            const S* b = B + static_cast<int64_t>(k) * N;
            for (int n = 0; n < N; ++n) c[n] += ak * b[n];
        }
    }
}

// C[M,N] = (accumulate ? C : 0) + A^T * B with A[K,M], B[K,N]
template <class S>
void gemm_tn(const S* A, const S* B, S* C, int M, int K, int N, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int m = 0; m < M; ++m) {
        S* c = C + static_cast<int64_t>(m) * N;
        if (!accumulate)
            for (int n = 0; n < N; ++n) c[n] = S(0);
        for (int k = 0; k < K; ++k) {
            const S ak = A[static_cast<int64_t>(k) * M + m];
            const S* b = B + static_cast<int64_t>(k) * N;
            for (int n = 0; n < N; ++n) c[n] += ak * b[n];
        }
    }
}

// C[M,N] = (accumulate ? C : 0) + A * B^T with A[M,K], B[N,K]
template <class S>
void gemm_nt(const S* A, const S* B, S* C, int M, int K, int N, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int m = 0; m < M; ++m) {
        const S* a = A + static_cast<int64_t>(m) * K;
        S* c = C + static_cast<int64_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            const S* b = B + static_cast<int64_t>(n) * K;
            // four independent accumulators; fixed association, still deterministic
            S s0 = 0, s1 = 0, s2 = 0, s3 = 0;
            int k = 0;
            for (; k + 4 <= K; k += 4) {
                s0 += a[k] * b[k];
                s1 += a[k + 1] * b[k + 1];
                s2 += a[k + 2] * b[k + 2];
                s3 += a[k + 3] * b[k + 3];
            }
            for (; k < K; ++k) s0 += a[k] * b[k];
            const S dot = ((s0 + s1) + (s2 + s3));
            c[n] = accumulate ? c[n] + dot : dot;
        }
    }
}

// im2col for one image: img[C,H,W] -> col[C*kh*kw, gh*gw] where grid cell
// (gy,gx) reads img at (gy*stride - pad + i, gx*stride - pad + j).
template <class S>
void im2col(const S* img, int C, int H, int W, int kh, int kw, int stride, int pad,
            int gh, int gw, S* col) {
    const int64_t cells = static_cast<int64_t>(gh) * gw;
    for (int c = 0; c < C; ++c) {
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                S* row = col + ((static_cast<int64_t>(c) * kh + i) * kw + j) * cells;
                for (int gy = 0; gy < gh; ++gy) {
                    const int y = gy * stride - pad + i;
                    S* out = row + static_cast<int64_t>(gy) * gw;
                    if (y < 0 || y >= H) {
                        for (int gx = 0; gx < gw; ++gx) out[gx] = S(0);
                        continue;
                    }
                    const S* src = img + (static_cast<int64_t>(c) * H + y) * W;
                    for (int gx = 0; gx < gw; ++gx) {
                        const int x = gx * stride - pad + j;
                        out[gx] = (x >= 0 && x < W) ? src[x] : S(0);
                    }
                }
            }
        }
    }
}

// Transpose of im2col: scatter-adds col back into img (img must be zeroed or
// carry a running accumulation).
template <class S>
void col2im(const S* col, int C, int H, int W, int kh, int kw, int stride, int pad,
            int gh, int gw, S* img) {
    const int64_t cells = static_cast<int64_t>(gh) * gw;
    for (int c = 0; c < C; ++c) {
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                const S* row = col + ((static_cast<int64_t>(c) * kh + i) * kw + j) * cells;
                for (int gy = 0; gy < gh; ++gy) {
                    const int y = gy * stride - pad + i;
                    if (y < 0 || y >= H) continue;
                    S* dst = img + (static_cast<int64_t>(c) * H + y) * W;
                    const S* src = row + static_cast<int64_t>(gy) * gw;
                    for (int gx = 0; gx < gw; ++gx) {
                        const int x = gx * stride - pad + j;
                        if (x >= 0 && x < W) dst[x] += src[gx];
                    }
                }
            }
        }
    }
}

}  // namespace faceflow::detail
