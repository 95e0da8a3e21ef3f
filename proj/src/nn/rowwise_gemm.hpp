#pragma once

#include <cstddef>
#include <cstring>

namespace pfnf::nn::detail {

// out[i, :] = bias + x[i, :] * w for row-major operands with leading
// dimensions. Every output row runs the same instruction sequence no matter
// where it sits in x, so reordering rows reorders results bit-exactly (a
// blocked GEMM does not promise that at tile edges).

template <typename T, std::size_t Bytes>
struct Vec {
  typedef T type __attribute__((vector_size(Bytes)));
  static constexpr std::size_t kLanes = Bytes / sizeof(T);
};

template <typename T, std::size_t Bytes, int R, int NV>
inline void gemm_chunk(const T* x, std::size_t ldx, std::size_t k_dim, const T* w, std::size_t ldw,
                       std::size_t n0, const T* bias, T* out, std::size_t ldo) {
  using V = typename Vec<T, Bytes>::type;
  constexpr std::size_t L = Vec<T, Bytes>::kLanes;
  V init[NV];
  for (int j = 0; j < NV; ++j) {
    if (bias) {
      std::memcpy(&init[j], bias + n0 + j * L, Bytes);
    } else {
      init[j] = V{};
    }
  }
  V acc[R][NV];
  for (int r = 0; r < R; ++r) {
    for (int j = 0; j < NV; ++j) acc[r][j] = init[j];
  }
  for (std::size_t k = 0; k < k_dim; ++k) {
    V wk[NV];
    for (int j = 0; j < NV; ++j) std::memcpy(&wk[j], w + k * ldw + n0 + j * L, Bytes);
    for (int r = 0; r < R; ++r) {
      const T a = x[r * ldx + k];
      for (int j = 0; j < NV; ++j) acc[r][j] += a * wk[j];
    }
  }
  for (int r = 0; r < R; ++r) {
    for (int j = 0; j < NV; ++j) std::memcpy(out + r * ldo + n0 + j * L, &acc[r][j], Bytes);
  }
}

template <typename T, int R>
inline void gemm_tile(const T* x, std::size_t ldx, std::size_t k_dim, const T* w, std::size_t ldw,
                      std::size_t n_dim, const T* bias, T* out, std::size_t ldo) {
  constexpr std::size_t L = 64 / sizeof(T);
  std::size_t n0 = 0;
  for (; n0 + 2 * L <= n_dim; n0 += 2 * L) gemm_chunk<T, 64, R, 2>(x, ldx, k_dim, w, ldw, n0, bias, out, ldo);
  if (n0 + L <= n_dim) {
    gemm_chunk<T, 64, R, 1>(x, ldx, k_dim, w, ldw, n0, bias, out, ldo);
    n0 += L;
  }
  if (n0 + L / 2 <= n_dim) {
    gemm_chunk<T, 32, R, 1>(x, ldx, k_dim, w, ldw, n0, bias, out, ldo);
    n0 += L / 2;
  }
  if (n0 + L / 4 <= n_dim) {
    gemm_chunk<T, 16, R, 1>(x, ldx, k_dim, w, ldw, n0, bias, out, ldo);
    n0 += L / 4;
  }
  for (int r = 0; r < R; ++r) {
    for (std::size_t c = n0; c < n_dim; ++c) {
      T s = bias ? bias[c] : T{0};
      for (std::size_t k = 0; k < k_dim; ++k) s += x[r * ldx + k] * w[k * ldw + c];
      out[r * ldo + c] = s;
    }
  }
}

template <typename T>
void gemm_rows(const T* x, std::size_t ldx, std::size_t m_dim, std::size_t k_dim, const T* w, std::size_t ldw,
               std::size_t n_dim, const T* bias, T* out, std::size_t ldo) {
  std::size_t i = 0;
  for (; i + 4 <= m_dim; i += 4) {
    gemm_tile<T, 4>(x + i * ldx, ldx, k_dim, w, ldw, n_dim, bias, out + i * ldo, ldo);
  }
  for (; i < m_dim; ++i) gemm_tile<T, 1>(x + i * ldx, ldx, k_dim, w, ldw, n_dim, bias, out + i * ldo, ldo);
}

}  // namespace pfnf::nn::detail
