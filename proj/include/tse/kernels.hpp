// Copyright 2026 TSE Cascade Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Low-level numeric kernels. Every kernel has a serial reference
// implementation (kernels::serial) and an OpenMP one (kernels::par); the
// un-namespaced wrappers dispatch at runtime. The parallel versions are
// written so that the accumulation order of every output element is fixed,
// independent of the thread count: reductions use fixed-size blocks and the
// per-element inner loops never change order. tools/bench_kernels compares
// the two families for speed and agreement.

#ifndef TSE_KERNELS_HPP_
#define TSE_KERNELS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace tse {
namespace kernels {

// Runtime switch used by tests and the benchmark.
bool force_serial();
void set_force_serial(bool v);
int max_threads();

inline bool use_parallel(int64_t work) {
#ifdef _OPENMP
  if (force_serial()) return false;
  if (omp_in_parallel()) return false;  // caller already parallel
  return work >= (1 << 14);
#else
  (void)work;
  return false;
#endif
}

// ---------------------------------------------------------------------------
// GEMM: C = alpha * op(A) * op(B) + beta * C, row-major.
// ---------------------------------------------------------------------------

namespace serial {

template <class T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, T alpha,
          const T* a, int64_t lda, const T* b, int64_t ldb, T beta, T* c,
          int64_t ldc) {
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    if (beta == T(0)) {
      std::fill(crow, crow + n, T(0));
    } else if (beta != T(1)) {
      for (int64_t j = 0; j < n; ++j) crow[j] *= beta;
    }
    if (!trans_b) {
      for (int64_t p = 0; p < k; ++p) {
        const T av = alpha * (trans_a ? a[p * lda + i] : a[i * lda + p]);
        const T* brow = b + p * ldb;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    } else {
      for (int64_t j = 0; j < n; ++j) {
        T acc = T(0);
        const T* brow = b + j * ldb;
        if (!trans_a) {
          const T* arow = a + i * lda;
          for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        } else {
          for (int64_t p = 0; p < k; ++p) acc += a[p * lda + i] * brow[p];
        }
        crow[j] += alpha * acc;
      }
    }
  }
}

}  // namespace serial

namespace par {

// A (not transposed) times B (not transposed). Rows of C are independent;
// a 4-row unroll reuses each B row four times.
template <class T>
void gemm_nn(int64_t m, int64_t n, int64_t k, T alpha, const T* a, int64_t lda,
             const T* b, int64_t ldb, T beta, T* c, int64_t ldc) {
#pragma omp parallel for schedule(static)
  for (int64_t i0 = 0; i0 < m; i0 += 4) {
    const int64_t ib = std::min<int64_t>(4, m - i0);
    for (int64_t i = i0; i < i0 + ib; ++i) {
      T* crow = c + i * ldc;
      if (beta == T(0)) {
        std::fill(crow, crow + n, T(0));
      } else if (beta != T(1)) {
        for (int64_t j = 0; j < n; ++j) crow[j] *= beta;
      }
    }
    if (ib == 4) {
      T* c0 = c + (i0 + 0) * ldc;
      T* c1 = c + (i0 + 1) * ldc;
      T* c2 = c + (i0 + 2) * ldc;
      T* c3 = c + (i0 + 3) * ldc;
      for (int64_t p = 0; p < k; ++p) {
        const T* brow = b + p * ldb;
        const T a0 = alpha * a[(i0 + 0) * lda + p];
        const T a1 = alpha * a[(i0 + 1) * lda + p];
        const T a2 = alpha * a[(i0 + 2) * lda + p];
        const T a3 = alpha * a[(i0 + 3) * lda + p];
#pragma omp simd
        for (int64_t j = 0; j < n; ++j) {
          const T bv = brow[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    } else {
      for (int64_t i = i0; i < i0 + ib; ++i) {
        T* crow = c + i * ldc;
        for (int64_t p = 0; p < k; ++p) {
          const T av = alpha * a[i * lda + p];
          const T* brow = b + p * ldb;
#pragma omp simd
          for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
}

// A times B transposed: dot products along contiguous rows.
template <class T>
void gemm_nt(int64_t m, int64_t n, int64_t k, T alpha, const T* a, int64_t lda,
             const T* b, int64_t ldb, T beta, T* c, int64_t ldc) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * lda;
    T* crow = c + i * ldc;
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * ldb;
      T acc = T(0);
#pragma omp simd reduction(+ : acc)
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = alpha * acc + (beta == T(0) ? T(0) : beta * crow[j]);
    }
  }
}

// A transposed times B: parallel over rows of C (columns of A).
template <class T>
void gemm_tn(int64_t m, int64_t n, int64_t k, T alpha, const T* a, int64_t lda,
             const T* b, int64_t ldb, T beta, T* c, int64_t ldc) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    if (beta == T(0)) {
      std::fill(crow, crow + n, T(0));
    } else if (beta != T(1)) {
      for (int64_t j = 0; j < n; ++j) crow[j] *= beta;
    }
    for (int64_t p = 0; p < k; ++p) {
      const T av = alpha * a[p * lda + i];
      const T* brow = b + p * ldb;
#pragma omp simd
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, T alpha,
          const T* a, int64_t lda, const T* b, int64_t ldb, T beta, T* c,
          int64_t ldc) {
  if (!trans_a && !trans_b) {
    gemm_nn(m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  } else if (!trans_a && trans_b) {
    gemm_nt(m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  } else if (trans_a && !trans_b) {
    gemm_tn(m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  } else {
    serial::gemm(true, true, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  }
}

}  // namespace par

template <class T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, T alpha,
          const T* a, int64_t lda, const T* b, int64_t ldb, T beta, T* c,
          int64_t ldc) {
  if (use_parallel(m * n * k)) {
    par::gemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  } else {
    serial::gemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c,
                 ldc);
  }
}

// ---------------------------------------------------------------------------
// Elementwise maps.
// ---------------------------------------------------------------------------

namespace serial {

template <class T, class F>
void map(const T* x, T* y, int64_t n, F f) {
  for (int64_t i = 0; i < n; ++i) y[i] = f(x[i]);
}

template <class T, class F>
void map2(const T* x, const T* y, T* z, int64_t n, F f) {
  for (int64_t i = 0; i < n; ++i) z[i] = f(x[i], y[i]);
}

}  // namespace serial

namespace par {

template <class T, class F>
void map(const T* x, T* y, int64_t n, F f) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) y[i] = f(x[i]);
}

template <class T, class F>
void map2(const T* x, const T* y, T* z, int64_t n, F f) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) z[i] = f(x[i], y[i]);
}

}  // namespace par

template <class T, class F>
void map(const T* x, T* y, int64_t n, F f) {
  if (use_parallel(n * 4)) {
    par::map(x, y, n, f);
  } else {
    serial::map(x, y, n, f);
  }
}

template <class T, class F>
void map2(const T* x, const T* y, T* z, int64_t n, F f) {
  if (use_parallel(n * 4)) {
    par::map2(x, y, z, n, f);
  } else {
    serial::map2(x, y, z, n, f);
  }
}

template <class T>
void axpy(int64_t n, T alpha, const T* x, T* y) {
  if (use_parallel(n * 2)) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
  } else {
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
  }
}

// ---------------------------------------------------------------------------
// Reductions. Partial sums are computed over fixed 4096-element blocks and
// combined in block order, so the result does not depend on the number of
// threads. Accumulation is in double.
// ---------------------------------------------------------------------------

inline constexpr int64_t kRedBlock = 4096;

namespace serial {

template <class T>
double block_sum(const T* x, int64_t n) {
  double total = 0.0;
  for (int64_t b = 0; b < n; b += kRedBlock) {
    const int64_t e = std::min(n, b + kRedBlock);
    double s = 0.0;
    for (int64_t i = b; i < e; ++i) s += static_cast<double>(x[i]);
    total += s;
  }
  return total;
}

template <class T>
double block_dot(const T* x, const T* y, int64_t n) {
  double total = 0.0;
  for (int64_t b = 0; b < n; b += kRedBlock) {
    const int64_t e = std::min(n, b + kRedBlock);
    double s = 0.0;
    for (int64_t i = b; i < e; ++i)
      s += static_cast<double>(x[i]) * static_cast<double>(y[i]);
    total += s;
  }
  return total;
}

}  // namespace serial

namespace par {

template <class T>
double block_sum(const T* x, int64_t n) {
  const int64_t nblocks = (n + kRedBlock - 1) / kRedBlock;
  std::vector<double> partial(static_cast<size_t>(nblocks));
#pragma omp parallel for schedule(static)
  for (int64_t bi = 0; bi < nblocks; ++bi) {
    const int64_t b = bi * kRedBlock;
    const int64_t e = std::min(n, b + kRedBlock);
    double s = 0.0;
    for (int64_t i = b; i < e; ++i) s += static_cast<double>(x[i]);
    partial[static_cast<size_t>(bi)] = s;
  }
  double total = 0.0;
  for (double v : partial) total += v;
  return total;
}

template <class T>
double block_dot(const T* x, const T* y, int64_t n) {
  const int64_t nblocks = (n + kRedBlock - 1) / kRedBlock;
  std::vector<double> partial(static_cast<size_t>(nblocks));
#pragma omp parallel for schedule(static)
  for (int64_t bi = 0; bi < nblocks; ++bi) {
    const int64_t b = bi * kRedBlock;
    const int64_t e = std::min(n, b + kRedBlock);
    double s = 0.0;
    for (int64_t i = b; i < e; ++i)
      s += static_cast<double>(x[i]) * static_cast<double>(y[i]);
    partial[static_cast<size_t>(bi)] = s;
  }
  double total = 0.0;
  for (double v : partial) total += v;
  return total;
}

}  // namespace par

template <class T>
double block_sum(const T* x, int64_t n) {
  return use_parallel(n) ? par::block_sum(x, n) : serial::block_sum(x, n);
}

template <class T>
double block_dot(const T* x, const T* y, int64_t n) {
  return use_parallel(n) ? par::block_dot(x, y, n) : serial::block_dot(x, y, n);
}

// ---------------------------------------------------------------------------
// Row softmax (numerically stabilized), used by attention.
// ---------------------------------------------------------------------------

namespace serial {

template <class T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    T mx = xr[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      const double e = std::exp(static_cast<double>(xr[j] - mx));
      yr[j] = static_cast<T>(e);
      denom += e;
    }
    const T inv = static_cast<T>(1.0 / denom);
    for (int64_t j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

}  // namespace serial

namespace par {

template <class T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    serial::softmax_rows(x + r * cols, y + r * cols, 1, cols);
  }
}

}  // namespace par

template <class T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols) {
  if (use_parallel(rows * cols * 8)) {
    par::softmax_rows(x, y, rows, cols);
  } else {
    serial::softmax_rows(x, y, rows, cols);
  }
}

// ---------------------------------------------------------------------------
// im2col / col2im for 2-D convolution on channel-major [C, H, W] grids.
// cols is [out_h*out_w, C*kh*kw] row-major.
// ---------------------------------------------------------------------------

struct Conv2dGeom {
  int64_t c_in, h, w;
  int64_t kh, kw;
  int64_t stride_h, stride_w;
  int64_t pad_h, pad_w;
  int64_t out_h() const { return (h + 2 * pad_h - kh) / stride_h + 1; }
  int64_t out_w() const { return (w + 2 * pad_w - kw) / stride_w + 1; }
};

namespace serial {

template <class T>
void im2col(const Conv2dGeom& g, const T* x, T* cols) {
  const int64_t oh = g.out_h(), ow = g.out_w();
  const int64_t kk = g.c_in * g.kh * g.kw;
  for (int64_t p = 0; p < oh * ow; ++p) {
    const int64_t oy = p / ow, ox = p % ow;
    T* dst = cols + p * kk;
    for (int64_t c = 0; c < g.c_in; ++c) {
      const T* plane = x + c * g.h * g.w;
      for (int64_t ky = 0; ky < g.kh; ++ky) {
        const int64_t iy = oy * g.stride_h + ky - g.pad_h;
        for (int64_t kx = 0; kx < g.kw; ++kx) {
          const int64_t ix = ox * g.stride_w + kx - g.pad_w;
          *dst++ = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
                       ? plane[iy * g.w + ix]
                       : T(0);
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates dcols back into dx (gather form, one writer
// per input pixel).
template <class T>
void col2im(const Conv2dGeom& g, const T* dcols, T* dx) {
  const int64_t ow = g.out_w(), oh = g.out_h();
  const int64_t kk = g.c_in * g.kh * g.kw;
  for (int64_t c = 0; c < g.c_in; ++c) {
    T* plane = dx + c * g.h * g.w;
    for (int64_t iy = 0; iy < g.h; ++iy) {
      for (int64_t ix = 0; ix < g.w; ++ix) {
        T acc = T(0);
        for (int64_t ky = 0; ky < g.kh; ++ky) {
          const int64_t ny = iy + g.pad_h - ky;
          if (ny < 0 || ny % g.stride_h != 0) continue;
          const int64_t oy = ny / g.stride_h;
          if (oy >= oh) continue;
          for (int64_t kx = 0; kx < g.kw; ++kx) {
            const int64_t nx = ix + g.pad_w - kx;
            if (nx < 0 || nx % g.stride_w != 0) continue;
            const int64_t ox = nx / g.stride_w;
            if (ox >= ow) continue;
            const int64_t p = oy * ow + ox;
            acc += dcols[p * kk + (c * g.kh + ky) * g.kw + kx];
          }
        }
        plane[iy * g.w + ix] += acc;
      }
    }
  }
}

}  // namespace serial

namespace par {

template <class T>
void im2col(const Conv2dGeom& g, const T* x, T* cols) {
  const int64_t oh = g.out_h(), ow = g.out_w();
  const int64_t kk = g.c_in * g.kh * g.kw;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < oh * ow; ++p) {
    const int64_t oy = p / ow, ox = p % ow;
    T* dst = cols + p * kk;
    for (int64_t c = 0; c < g.c_in; ++c) {
      const T* plane = x + c * g.h * g.w;
      for (int64_t ky = 0; ky < g.kh; ++ky) {
        const int64_t iy = oy * g.stride_h + ky - g.pad_h;
        for (int64_t kx = 0; kx < g.kw; ++kx) {
          const int64_t ix = ox * g.stride_w + kx - g.pad_w;
          *dst++ = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
                       ? plane[iy * g.w + ix]
                       : T(0);
        }
      }
    }
  }
}

template <class T>
void col2im(const Conv2dGeom& g, const T* dcols, T* dx) {
#pragma omp parallel for schedule(static)
  for (int64_t c = 0; c < g.c_in; ++c) {
    Conv2dGeom g1 = g;
    g1.c_in = 1;
    // Offset into the single-channel view of dcols via a strided walk.
    const int64_t kk = g.c_in * g.kh * g.kw;
    const int64_t oh = g.out_h(), ow = g.out_w();
    T* plane = dx + c * g.h * g.w;
    for (int64_t iy = 0; iy < g.h; ++iy) {
      for (int64_t ix = 0; ix < g.w; ++ix) {
        T acc = T(0);
        for (int64_t ky = 0; ky < g.kh; ++ky) {
          const int64_t ny = iy + g.pad_h - ky;
          if (ny < 0 || ny % g.stride_h != 0) continue;
          const int64_t oy = ny / g.stride_h;
          if (oy >= oh) continue;
          for (int64_t kx = 0; kx < g.kw; ++kx) {
            const int64_t nx = ix + g.pad_w - kx;
            if (nx < 0 || nx % g.stride_w != 0) continue;
            const int64_t ox = nx / g.stride_w;
            if (ox >= ow) continue;
            const int64_t p = oy * ow + ox;
            acc += dcols[p * kk + (c * g.kh + ky) * g.kw + kx];
          }
        }
        plane[iy * g.w + ix] += acc;
      }
    }
  }
}

}  // namespace par

template <class T>
void im2col(const Conv2dGeom& g, const T* x, T* cols) {
  const int64_t work = g.out_h() * g.out_w() * g.c_in * g.kh * g.kw;
  if (use_parallel(work)) {
    par::im2col(g, x, cols);
  } else {
    serial::im2col(g, x, cols);
  }
}

template <class T>
void col2im(const Conv2dGeom& g, const T* dcols, T* dx) {
  const int64_t work = g.h * g.w * g.c_in * g.kh * g.kw;
  if (use_parallel(work)) {
    par::col2im(g, dcols, dx);
  } else {
    serial::col2im(g, dcols, dx);
  }
}

}  // namespace kernels
}  // namespace tse

#endif  // TSE_KERNELS_HPP_
