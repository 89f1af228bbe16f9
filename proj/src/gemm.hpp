#pragma once

#include <cstdint>

#include "anodet/common.hpp"

// Row-major GEMM kernels. Every output element is produced by exactly one
// worker with a fixed in-loop summation order, so results do not depend on
// the thread count. The nt kernel splits its reduction into 8 fixed lanes
// that are combined in a fixed order.

namespace anodet::detail {

// C[M,N] = (accumulate ? C : 0) + A[M,K] * B[K,N]
template <class T>
void gemm_nn(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N, bool accumulate) {
  parallel_for(M, [&](int64_t m) {
    T* c = C + m * N;
    if (!accumulate)
      for (int64_t n = 0; n < N; ++n) c[n] = T(0);
    const T* a = A + m * K;
    for (int64_t k = 0; k < K; ++k) {
      T av = a[k];
      if (av == T(0)) continue;
      const T* b = B + k * N;
      for (int64_t n = 0; n < N; ++n) c[n] += av * b[n];
    }
  });
}

// C[M,N] += A[M,K] * B[N,K]^T   (dot-product form, 8-lane reduction)
template <class T>
void gemm_nt_acc(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N) {
  parallel_for(M, [&](int64_t m) {
    const T* a = A + m * K;
    T* c = C + m * N;
    for (int64_t n = 0; n < N; ++n) {
      const T* b = B + n * K;
      T lanes[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
      int64_t k = 0;
      for (; k + 8 <= K; k += 8)
        for (int j = 0; j < 8; ++j) lanes[j] += a[k + j] * b[k + j];
      T s = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
            ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
      for (; k < K; ++k) s += a[k] * b[k];
      c[n] += s;
    }
  });
}

// C[K,N] = (accumulate ? C : 0) + A[M,K]^T * B[M,N]
template <class T>
void gemm_tn(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N, bool accumulate) {
  parallel_for(K, [&](int64_t k) {
    T* c = C + k * N;
    if (!accumulate)
      for (int64_t n = 0; n < N; ++n) c[n] = T(0);
    for (int64_t m = 0; m < M; ++m) {
      T av = A[m * K + k];
      if (av == T(0)) continue;
      const T* b = B + m * N;
      for (int64_t n = 0; n < N; ++n) c[n] += av * b[n];
    }
  });
}

}  // namespace anodet::detail
