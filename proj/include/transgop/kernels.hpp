#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

// Raw dense kernels on row-major buffers. No allocation beyond scratch,
// no autodiff. Everything in ops.hpp is built on these.

namespace transgop::kernels {

/// C[m x n] (+)= A[m x k] * B[k x n].
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* __restrict a,
             const T* __restrict b, T* __restrict c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C[m x n] (+)= A^T * B with A stored [k x m].
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* __restrict a,
             const T* __restrict b, T* __restrict c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

/// C[m x n] (+)= A * B^T with B stored [n x k].
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  thread_local std::vector<T> scratch;
  scratch.resize(n * k);
  transpose(n, k, b, scratch.data());
  gemm_nn(m, n, k, a, scratch.data(), c, accumulate);
}

struct ConvGeometry {
  std::size_t c_in, h, w, k, stride, pad, h_out, w_out;
  std::size_t patch() const { return c_in * k * k; }
  std::size_t positions() const { return h_out * w_out; }
};

/// Unfolds x[C x H x W] into cols[(C*k*k) x (H_out*W_out)].
template <class T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const std::size_t npos = g.positions();
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((c * g.k + ky) * g.k + kx) * npos;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          T* out = row + oy * g.w_out;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(out, out + g.w_out, T(0));
            continue;
          }
          const T* in = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            out[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : in[ix];
          }
        }
      }
}

/// Adjoint of im2col: scatters cols back into dx (accumulating).
template <class T>
void col2im(const ConvGeometry& g, const T* cols, T* dx) {
  const std::size_t npos = g.positions();
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((c * g.k + ky) * g.k + kx) * npos;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* out = dx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const T* in = row + oy * g.w_out;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) out[ix] += in[ox];
          }
        }
      }
}

}  // namespace transgop::kernels
