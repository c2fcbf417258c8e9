// Copyright 2026 TSE Cascade Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Reverse-mode autodiff over dense row-major tensors. Ops take an optional
// Tape; passing nullptr disables recording (inference mode). Gradients are
// accumulated into lazily allocated buffers shared between views, so
// reshape() is free. Templated on the scalar so tests can run the exact same
// graph code in double for finite-difference checks.

#ifndef TSE_TENSOR_HPP_
#define TSE_TENSOR_HPP_

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "tse/common.hpp"
#include "tse/kernels.hpp"
#include "tse/rng.hpp"

namespace tse {
namespace nn {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

template <class T>
struct TensorData {
  Shape shape;
  std::shared_ptr<std::vector<T>> v;
  std::shared_ptr<std::vector<T>> g;  // allocated on first use
  bool requires_grad = false;
};

template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = s;
    t.d_->v = std::make_shared<std::vector<T>>(
        static_cast<size_t>(shape_numel(s)), T(0));
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_vector(const Shape& s, std::vector<T> data,
                            bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = s;
    assert(static_cast<int64_t>(data.size()) == shape_numel(s));
    t.d_->v = std::make_shared<std::vector<T>>(std::move(data));
    t.d_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int64_t dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int64_t ndim() const { return static_cast<int64_t>(d_->shape.size()); }
  int64_t numel() const { return shape_numel(d_->shape); }
  bool requires_grad() const { return d_ && d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  T* data() { return d_->v->data(); }
  const T* data() const { return d_->v->data(); }
  std::vector<T>& vec() { return *d_->v; }
  const std::vector<T>& vec() const { return *d_->v; }

  bool has_grad() const { return d_->g != nullptr; }
  T* grad() {
    ensure_grad();
    return d_->g->data();
  }
  const std::vector<T>& grad_vec() const { return *d_->g; }
  void ensure_grad() {
    if (!d_->g)
      d_->g = std::make_shared<std::vector<T>>(
          static_cast<size_t>(numel()), T(0));
  }
  void zero_grad() {
    if (d_->g) std::fill(d_->g->begin(), d_->g->end(), T(0));
  }
  void drop_grad() { d_->g = nullptr; }

  // Zero-copy view with a new shape (same element count).
  Tensor reshape(const Shape& s) const {
    check_config(shape_numel(s) == numel(),
                 "reshape: element count mismatch " + shape_str(d_->shape) +
                     " -> " + shape_str(s));
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>(*d_);
    t.d_->shape = s;
    return t;
  }

  Tensor detach() const {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>(*d_);
    t.d_->requires_grad = false;
    t.d_->g = nullptr;
    return t;
  }

  Tensor clone() const {
    Tensor t = zeros(shape(), requires_grad());
    std::copy(vec().begin(), vec().end(), t.vec().begin());
    return t;
  }

  void fill_normal(Rng& rng, T stddev) {
    for (auto& x : *d_->v) x = static_cast<T>(rng.normal()) * stddev;
  }

  bool all_finite() const {
    for (T x : *d_->v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

 private:
  std::shared_ptr<TensorData<T>> d_;
};

template <class T>
class Tape {
 public:
  void record(std::function<void()> backward_op) {
    ops_.push_back(std::move(backward_op));
  }

  // Seeds d(root)/d(root) = 1 for a scalar root and replays the tape.
  void backward(Tensor<T> root) {
    check_config(root.numel() == 1, "backward: root must be scalar");
    root.grad()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  void clear() { ops_.clear(); }
  size_t size() const { return ops_.size(); }

 private:
  std::vector<std::function<void()>> ops_;
};

template <class T>
inline bool track(Tape<T>* tape, const Tensor<T>& a) {
  return tape && a.requires_grad();
}
template <class T>
inline bool track(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return tape && (a.requires_grad() || b.requires_grad());
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  check_config(a.shape() == b.shape(), "add: shape mismatch");
  auto out = Tensor<T>::zeros(a.shape());
  kernels::map2(a.data(), b.data(), out.data(), a.numel(),
                [](T x, T y) { return x + y; });
  if (track(tape, a, b)) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc]() mutable {
      const T* og = oc.grad();
      if (ac.requires_grad()) kernels::axpy(ac.numel(), T(1), og, ac.grad());
      if (bc.requires_grad()) kernels::axpy(bc.numel(), T(1), og, bc.grad());
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  check_config(a.shape() == b.shape(), "sub: shape mismatch");
  auto out = Tensor<T>::zeros(a.shape());
  kernels::map2(a.data(), b.data(), out.data(), a.numel(),
                [](T x, T y) { return x - y; });
  if (track(tape, a, b)) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc]() mutable {
      const T* og = oc.grad();
      if (ac.requires_grad()) kernels::axpy(ac.numel(), T(1), og, ac.grad());
      if (bc.requires_grad()) kernels::axpy(bc.numel(), T(-1), og, bc.grad());
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  check_config(a.shape() == b.shape(), "mul: shape mismatch");
  auto out = Tensor<T>::zeros(a.shape());
  kernels::map2(a.data(), b.data(), out.data(), a.numel(),
                [](T x, T y) { return x * y; });
  if (track(tape, a, b)) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc]() mutable {
      const T* og = oc.grad();
      const int64_t n = oc.numel();
      if (ac.requires_grad()) {
        T* ag = ac.grad();
        const T* bv = bc.data();
        for (int64_t i = 0; i < n; ++i) ag[i] += og[i] * bv[i];
      }
      if (bc.requires_grad()) {
        T* bg = bc.grad();
        const T* av = ac.data();
        for (int64_t i = 0; i < n; ++i) bg[i] += og[i] * av[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& a, T s) {
  auto out = Tensor<T>::zeros(a.shape());
  kernels::map(a.data(), out.data(), a.numel(), [s](T x) { return x * s; });
  if (track(tape, a)) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    tape->record([ac, oc, s]() mutable {
      kernels::axpy(ac.numel(), s, oc.grad(), ac.grad());
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> silu(Tape<T>* tape, const Tensor<T>& a) {
  auto out = Tensor<T>::zeros(a.shape());
  kernels::map(a.data(), out.data(), a.numel(), [](T x) {
    const double xd = static_cast<double>(x);
    return static_cast<T>(xd / (1.0 + std::exp(-xd)));
  });
  if (track(tape, a)) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    tape->record([ac, oc]() mutable {
      const T* og = oc.grad();
      const T* av = ac.data();
      T* ag = ac.grad();
      const int64_t n = ac.numel();
      for (int64_t i = 0; i < n; ++i) {
        const double x = static_cast<double>(av[i]);
        const double s = 1.0 / (1.0 + std::exp(-x));
        ag[i] += og[i] * static_cast<T>(s * (1.0 + x * (1.0 - s)));
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& a) {
  auto out = Tensor<T>::zeros(a.shape());
  kernels::map(a.data(), out.data(), a.numel(), [](T x) {
    return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x))));
  });
  if (track(tape, a)) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    tape->record([ac, oc]() mutable {
      const T* og = oc.grad();
      const T* ov = oc.data();
      T* ag = ac.grad();
      const int64_t n = ac.numel();
      for (int64_t i = 0; i < n; ++i) ag[i] += og[i] * ov[i] * (T(1) - ov[i]);
    });
  }
  return out;
}

template <class T>
Tensor<T> tanh_op(Tape<T>* tape, const Tensor<T>& a) {
  auto out = Tensor<T>::zeros(a.shape());
  kernels::map(a.data(), out.data(), a.numel(), [](T x) {
    return static_cast<T>(std::tanh(static_cast<double>(x)));
  });
  if (track(tape, a)) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    tape->record([ac, oc]() mutable {
      const T* og = oc.grad();
      const T* ov = oc.data();
      T* ag = ac.grad();
      const int64_t n = ac.numel();
      for (int64_t i = 0; i < n; ++i) ag[i] += og[i] * (T(1) - ov[i] * ov[i]);
    });
  }
  return out;
}

// PReLU with one learnable slope per channel; x is [.., C] with C = slope
// size when channel_last, otherwise x is [C, rest] plane-major.
template <class T>
Tensor<T> prelu_planes(Tape<T>* tape, const Tensor<T>& x,
                       const Tensor<T>& slope, int64_t channels,
                       int64_t plane) {
  check_config(slope.numel() == channels && x.numel() % (channels * plane) == 0,
               "prelu: bad shapes");
  const int64_t groups = x.numel() / (channels * plane);
  auto out = Tensor<T>::zeros(x.shape());
  const T* xv = x.data();
  const T* sv = slope.data();
  T* ov = out.data();
  for (int64_t gidx = 0; gidx < groups; ++gidx) {
    for (int64_t c = 0; c < channels; ++c) {
      const T s = sv[c];
      const T* xp = xv + (gidx * channels + c) * plane;
      T* op = ov + (gidx * channels + c) * plane;
      for (int64_t i = 0; i < plane; ++i)
        op[i] = xp[i] >= T(0) ? xp[i] : s * xp[i];
    }
  }
  if (track(tape, x, slope)) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, sc = slope, oc = out;
    tape->record([xc, sc, oc, channels, plane, groups]() mutable {
      const T* og = oc.grad();
      const T* xv2 = xc.data();
      const T* sv2 = sc.data();
      T* xg = xc.requires_grad() ? xc.grad() : nullptr;
      T* sg = sc.requires_grad() ? sc.grad() : nullptr;
      for (int64_t gidx = 0; gidx < groups; ++gidx) {
        for (int64_t c = 0; c < channels; ++c) {
          const int64_t base = (gidx * channels + c) * plane;
          double sacc = 0.0;
          for (int64_t i = 0; i < plane; ++i) {
            const T x2 = xv2[base + i];
            const T go = og[base + i];
            if (xg) xg[base + i] += x2 >= T(0) ? go : sv2[c] * go;
            if (x2 < T(0)) sacc += static_cast<double>(go) * x2;
          }
          if (sg) sg[c] += static_cast<T>(sacc);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products.
// ---------------------------------------------------------------------------

// out = a @ b for 2-D a [M,K], b [K,N].
template <class T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  check_config(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
               "matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                   shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = Tensor<T>::zeros({m, n});
  kernels::gemm(false, false, m, n, k, T(1), a.data(), k, b.data(), n, T(0),
                out.data(), n);
  if (track(tape, a, b)) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc, m, k, n]() mutable {
      const T* og = oc.grad();
      if (ac.requires_grad())  // dA = dC @ B^T
        kernels::gemm(false, true, m, k, n, T(1), og, n, bc.data(), n, T(1),
                      ac.grad(), k);
      if (bc.requires_grad())  // dB = A^T @ dC
        kernels::gemm(true, false, k, n, m, T(1), ac.data(), k, og, n, T(1),
                      bc.grad(), n);
    });
  }
  return out;
}

// out = x @ w^T + bias ; x [R, in], w [out, in], bias [out] (optional).
template <class T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>* bias) {
  check_config(x.ndim() == 2 && w.ndim() == 2 && x.dim(1) == w.dim(1),
               "linear: shape mismatch " + shape_str(x.shape()) + " x " +
                   shape_str(w.shape()));
  const int64_t r = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  auto out = Tensor<T>::zeros({r, out_dim});
  kernels::gemm(false, true, r, out_dim, in, T(1), x.data(), in, w.data(), in,
                T(0), out.data(), out_dim);
  if (bias) {
    check_config(bias->numel() == out_dim, "linear: bias size");
    const T* bv = bias->data();
    T* ov = out.data();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < out_dim; ++j) ov[i * out_dim + j] += bv[j];
  }
  const bool rg = tape && (x.requires_grad() || w.requires_grad() ||
                           (bias && bias->requires_grad()));
  if (rg) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, wc = w, oc = out;
    Tensor<T> bcopy = bias ? *bias : Tensor<T>();
    tape->record([xc, wc, oc, bcopy, r, in, out_dim]() mutable {
      const T* og = oc.grad();
      if (xc.requires_grad())  // dX = dY @ W
        kernels::gemm(false, false, r, in, out_dim, T(1), og, out_dim,
                      wc.data(), in, T(1), xc.grad(), in);
      if (wc.requires_grad())  // dW = dY^T @ X
        kernels::gemm(true, false, out_dim, in, r, T(1), og, out_dim,
                      xc.data(), in, T(1), wc.grad(), in);
      if (bcopy.defined() && bcopy.requires_grad()) {
        T* bg = bcopy.grad();
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < out_dim; ++j) bg[j] += og[i * out_dim + j];
      }
    });
  }
  return out;
}

// Batched matmul over the leading dim: a [B,M,K] @ b [B,K,N] -> [B,M,N].
// trans_b multiplies by b[B,N,K] transposed instead.
template <class T>
Tensor<T> bmm(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b,
              bool trans_b = false) {
  check_config(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0),
               "bmm: bad batch");
  const int64_t bs = a.dim(0), m = a.dim(1), k = a.dim(2);
  const int64_t n = trans_b ? b.dim(1) : b.dim(2);
  check_config(trans_b ? b.dim(2) == k : b.dim(1) == k, "bmm: inner dim");
  auto out = Tensor<T>::zeros({bs, m, n});
  for (int64_t i = 0; i < bs; ++i) {
    kernels::gemm(false, trans_b, m, n, k, T(1), a.data() + i * m * k, k,
                  b.data() + i * (trans_b ? n * k : k * n), trans_b ? k : n,
                  T(0), out.data() + i * m * n, n);
  }
  if (track(tape, a, b)) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc, bs, m, k, n, trans_b]() mutable {
      for (int64_t i = 0; i < bs; ++i) {
        const T* og = oc.grad() + i * m * n;
        if (ac.requires_grad()) {
          // dA = dC @ op(B)^T
          if (!trans_b)
            kernels::gemm(false, true, m, k, n, T(1), og, n,
                          bc.data() + i * k * n, n, T(1), ac.grad() + i * m * k,
                          k);
          else
            kernels::gemm(false, false, m, k, n, T(1), og, n,
                          bc.data() + i * n * k, k, T(1), ac.grad() + i * m * k,
                          k);
        }
        if (bc.requires_grad()) {
          if (!trans_b)  // dB = A^T @ dC
            kernels::gemm(true, false, k, n, m, T(1), ac.data() + i * m * k, k,
                          og, n, T(1), bc.grad() + i * k * n, n);
          else  // dB = dC^T @ A  (b is [N,K])
            kernels::gemm(true, false, n, k, m, T(1), og, n,
                          ac.data() + i * m * k, k, T(1), bc.grad() + i * n * k,
                          k);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> permute(Tape<T>* tape, const Tensor<T>& a,
                  const std::vector<int>& perm) {
  check_config(static_cast<int64_t>(perm.size()) == a.ndim(), "permute: rank");
  const auto& s = a.shape();
  Shape os(perm.size());
  for (size_t i = 0; i < perm.size(); ++i)
    os[i] = s[static_cast<size_t>(perm[i])];
  auto out = Tensor<T>::zeros(os);
  const int nd = static_cast<int>(perm.size());
  std::vector<int64_t> in_stride(perm.size()), out_stride(perm.size());
  int64_t acc = 1;
  for (int i = nd - 1; i >= 0; --i) {
    in_stride[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  acc = 1;
  for (int i = nd - 1; i >= 0; --i) {
    out_stride[static_cast<size_t>(i)] = acc;
    acc *= os[static_cast<size_t>(i)];
  }
  const int64_t n = a.numel();
  const T* av = a.data();
  T* ov = out.data();
  std::vector<int64_t> mapped(perm.size());
  for (size_t i = 0; i < perm.size(); ++i)
    mapped[static_cast<size_t>(perm[i])] = out_stride[i];
  for (int64_t idx = 0; idx < n; ++idx) {
    int64_t rem = idx, oidx = 0;
    for (int i = 0; i < nd; ++i) {
      const int64_t coord = rem / in_stride[static_cast<size_t>(i)];
      rem %= in_stride[static_cast<size_t>(i)];
      oidx += coord * mapped[static_cast<size_t>(i)];
    }
    ov[oidx] = av[idx];
  }
  if (track(tape, a)) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    tape->record([ac, oc, in_stride, mapped, nd]() mutable {
      const T* og = oc.grad();
      T* ag = ac.grad();
      const int64_t n2 = ac.numel();
      for (int64_t idx = 0; idx < n2; ++idx) {
        int64_t rem = idx, oidx = 0;
        for (int i = 0; i < nd; ++i) {
          const int64_t coord = rem / in_stride[static_cast<size_t>(i)];
          rem %= in_stride[static_cast<size_t>(i)];
          oidx += coord * mapped[static_cast<size_t>(i)];
        }
        ag[idx] += og[oidx];
      }
    });
  }
  return out;
}

// Concatenate along the last axis.
template <class T>
Tensor<T> concat_last(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  check_config(a.ndim() == b.ndim(), "concat: rank");
  for (int i = 0; i + 1 < a.ndim(); ++i)
    check_config(a.dim(i) == b.dim(i), "concat: leading dims");
  Shape os = a.shape();
  const int64_t ca = a.dim(static_cast<int>(a.ndim()) - 1);
  const int64_t cb = b.dim(static_cast<int>(b.ndim()) - 1);
  os.back() = ca + cb;
  auto out = Tensor<T>::zeros(os);
  const int64_t rows = a.numel() / ca;
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(av + r * ca, av + (r + 1) * ca, ov + r * (ca + cb));
    std::copy(bv + r * cb, bv + (r + 1) * cb, ov + r * (ca + cb) + ca);
  }
  if (track(tape, a, b)) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc, rows, ca, cb]() mutable {
      const T* og = oc.grad();
      if (ac.requires_grad()) {
        T* ag = ac.grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < ca; ++j)
            ag[r * ca + j] += og[r * (ca + cb) + j];
      }
      if (bc.requires_grad()) {
        T* bg = bc.grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < cb; ++j)
            bg[r * cb + j] += og[r * (ca + cb) + ca + j];
      }
    });
  }
  return out;
}

// Slice [begin, begin+len) along the last axis.
template <class T>
Tensor<T> slice_last(Tape<T>* tape, const Tensor<T>& a, int64_t begin,
                     int64_t len) {
  const int64_t c = a.dim(static_cast<int>(a.ndim()) - 1);
  check_config(begin >= 0 && begin + len <= c, "slice: out of range");
  Shape os = a.shape();
  os.back() = len;
  auto out = Tensor<T>::zeros(os);
  const int64_t rows = a.numel() / c;
  const T* av = a.data();
  T* ov = out.data();
  for (int64_t r = 0; r < rows; ++r)
    std::copy(av + r * c + begin, av + r * c + begin + len, ov + r * len);
  if (track(tape, a)) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    tape->record([ac, oc, rows, c, begin, len]() mutable {
      const T* og = oc.grad();
      T* ag = ac.grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < len; ++j)
          ag[r * c + begin + j] += og[r * len + j];
    });
  }
  return out;
}

// Zero-pad the last axis: [.., C] -> [.., left + C + right].
template <class T>
Tensor<T> pad_last(Tape<T>* tape, const Tensor<T>& a, int64_t left,
                   int64_t right) {
  const int64_t c = a.dim(static_cast<int>(a.ndim()) - 1);
  Shape os = a.shape();
  os.back() = left + c + right;
  auto out = Tensor<T>::zeros(os);
  const int64_t rows = a.numel() / c;
  const T* av = a.data();
  T* ov = out.data();
  for (int64_t r = 0; r < rows; ++r)
    std::copy(av + r * c, av + (r + 1) * c, ov + r * os.back() + left);
  if (track(tape, a)) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, oc = out;
    const int64_t oc_cols = os.back();
    tape->record([ac, oc, rows, c, left, oc_cols]() mutable {
      const T* og = oc.grad();
      T* ag = ac.grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < c; ++j)
          ag[r * c + j] += og[r * oc_cols + left + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Broadcast helpers.
// ---------------------------------------------------------------------------

// y[r, c] = x[r, c] * s[c] + t[c] over the last axis (s, t row vectors).
template <class T>
Tensor<T> affine_last(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& s,
                      const Tensor<T>& t) {
  const int64_t c = x.dim(static_cast<int>(x.ndim()) - 1);
  check_config(s.numel() == c && t.numel() == c, "affine_last: sizes");
  auto out = Tensor<T>::zeros(x.shape());
  const int64_t rows = x.numel() / c;
  const T* xv = x.data();
  const T* sv = s.data();
  const T* tv = t.data();
  T* ov = out.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < c; ++j)
      ov[r * c + j] = xv[r * c + j] * sv[j] + tv[j];
  const bool rg = tape && (x.requires_grad() || s.requires_grad() ||
                           t.requires_grad());
  if (rg) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, sc = s, tc = t, oc = out;
    tape->record([xc, sc, tc, oc, rows, c]() mutable {
      const T* og = oc.grad();
      const T* xv2 = xc.data();
      const T* sv2 = sc.data();
      if (xc.requires_grad()) {
        T* xg = xc.grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < c; ++j) xg[r * c + j] += og[r * c + j] * sv2[j];
      }
      if (sc.requires_grad()) {
        T* sg = sc.grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < c; ++j)
            sg[j] += og[r * c + j] * xv2[r * c + j];
      }
      if (tc.requires_grad()) {
        T* tg = tc.grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < c; ++j) tg[j] += og[r * c + j];
      }
    });
  }
  return out;
}

// Per-group affine: x is [B, L, C], s and t are [B, C]; row block b uses
// s[b, :], t[b, :]. Used by AdaLN conditioning.
template <class T>
Tensor<T> affine_per_batch(Tape<T>* tape, const Tensor<T>& x,
                           const Tensor<T>& s, const Tensor<T>& t) {
  check_config(x.ndim() == 3 && s.ndim() == 2 && t.ndim() == 2,
               "affine_per_batch: ranks");
  const int64_t b = x.dim(0), l = x.dim(1), c = x.dim(2);
  check_config(s.dim(0) == b && s.dim(1) == c && t.dim(0) == b && t.dim(1) == c,
               "affine_per_batch: sizes");
  auto out = Tensor<T>::zeros(x.shape());
  const T* xv = x.data();
  const T* sv = s.data();
  const T* tv = t.data();
  T* ov = out.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t r = 0; r < l; ++r)
      for (int64_t j = 0; j < c; ++j) {
        const int64_t idx = (bi * l + r) * c + j;
        ov[idx] = xv[idx] * sv[bi * c + j] + tv[bi * c + j];
      }
  const bool rg = tape && (x.requires_grad() || s.requires_grad() ||
                           t.requires_grad());
  if (rg) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, sc = s, tc = t, oc = out;
    tape->record([xc, sc, tc, oc, b, l, c]() mutable {
      const T* og = oc.grad();
      const T* xv2 = xc.data();
      const T* sv2 = sc.data();
      T* xg = xc.requires_grad() ? xc.grad() : nullptr;
      T* sg = sc.requires_grad() ? sc.grad() : nullptr;
      T* tg = tc.requires_grad() ? tc.grad() : nullptr;
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t r = 0; r < l; ++r)
          for (int64_t j = 0; j < c; ++j) {
            const int64_t idx = (bi * l + r) * c + j;
            if (xg) xg[idx] += og[idx] * sv2[bi * c + j];
            if (sg) sg[bi * c + j] += og[idx] * xv2[idx];
            if (tg) tg[bi * c + j] += og[idx];
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization.
// ---------------------------------------------------------------------------

// LayerNorm over the last axis with affine parameters.
template <class T>
Tensor<T> layer_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  const int64_t c = x.dim(static_cast<int>(x.ndim()) - 1);
  check_config(gamma.numel() == c && beta.numel() == c, "layer_norm: sizes");
  const int64_t rows = x.numel() / c;
  auto out = Tensor<T>::zeros(x.shape());
  auto xhat = Tensor<T>::zeros(x.shape());
  std::vector<T> inv_std(static_cast<size_t>(rows));
  const T* xv = x.data();
  const T* gv = gamma.data();
  const T* bv = beta.data();
  T* ov = out.data();
  T* hv = xhat.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * c;
    double mean = 0.0;
    for (int64_t j = 0; j < c; ++j) mean += static_cast<double>(xr[j]);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const double d = static_cast<double>(xr[j]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double istd = 1.0 / std::sqrt(var + static_cast<double>(eps));
    inv_std[static_cast<size_t>(r)] = static_cast<T>(istd);
    for (int64_t j = 0; j < c; ++j) {
      const T h = static_cast<T>((static_cast<double>(xr[j]) - mean) * istd);
      hv[r * c + j] = h;
      ov[r * c + j] = h * gv[j] + bv[j];
    }
  }
  const bool rg = tape && (x.requires_grad() || gamma.requires_grad() ||
                           beta.requires_grad());
  if (rg) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, gc = gamma, bc = beta, oc = out, hc = xhat;
    tape->record([xc, gc, bc, oc, hc, inv_std, rows, c]() mutable {
      const T* og = oc.grad();
      const T* hv2 = hc.data();
      const T* gv2 = gc.data();
      T* xg = xc.requires_grad() ? xc.grad() : nullptr;
      T* gg = gc.requires_grad() ? gc.grad() : nullptr;
      T* bg = bc.requires_grad() ? bc.grad() : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        const T* ogr = og + r * c;
        const T* hr = hv2 + r * c;
        if (gg || bg) {
          for (int64_t j = 0; j < c; ++j) {
            if (gg) gg[j] += ogr[j] * hr[j];
            if (bg) bg[j] += ogr[j];
          }
        }
        if (xg) {
          double sum_d = 0.0, sum_dh = 0.0;
          for (int64_t j = 0; j < c; ++j) {
            const double d = static_cast<double>(ogr[j]) * gv2[j];
            sum_d += d;
            sum_dh += d * static_cast<double>(hr[j]);
          }
          const double invc = 1.0 / static_cast<double>(c);
          const double istd = static_cast<double>(inv_std[static_cast<size_t>(r)]);
          for (int64_t j = 0; j < c; ++j) {
            const double d = static_cast<double>(ogr[j]) * gv2[j];
            xg[r * c + j] += static_cast<T>(
                istd * (d - sum_d * invc -
                        static_cast<double>(hr[j]) * sum_dh * invc));
          }
        }
      }
    });
  }
  return out;
}

// GroupNorm over [B, C, plane] with per-channel affine.
template <class T>
Tensor<T> group_norm(Tape<T>* tape, const Tensor<T>& x, int64_t batch,
                     int64_t channels, int64_t plane, int64_t groups,
                     const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  check_config(channels % groups == 0, "group_norm: channels % groups");
  check_config(x.numel() == batch * channels * plane, "group_norm: numel");
  const int64_t cg = channels / groups;
  const int64_t gsz = cg * plane;
  auto out = Tensor<T>::zeros(x.shape());
  auto xhat = Tensor<T>::zeros(x.shape());
  std::vector<T> inv_std(static_cast<size_t>(batch * groups));
  const T* xv = x.data();
  const T* gv = gamma.data();
  const T* bv = beta.data();
  T* ov = out.data();
  T* hv = xhat.data();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t g = 0; g < groups; ++g) {
      const int64_t base = (b * channels + g * cg) * plane;
      double mean = 0.0;
      for (int64_t i = 0; i < gsz; ++i) mean += static_cast<double>(xv[base + i]);
      mean /= static_cast<double>(gsz);
      double var = 0.0;
      for (int64_t i = 0; i < gsz; ++i) {
        const double d = static_cast<double>(xv[base + i]) - mean;
        var += d * d;
      }
      var /= static_cast<double>(gsz);
      const double istd = 1.0 / std::sqrt(var + static_cast<double>(eps));
      inv_std[static_cast<size_t>(b * groups + g)] = static_cast<T>(istd);
      for (int64_t i = 0; i < gsz; ++i) {
        const int64_t c = g * cg + i / plane;
        const T h =
            static_cast<T>((static_cast<double>(xv[base + i]) - mean) * istd);
        hv[base + i] = h;
        ov[base + i] = h * gv[c] + bv[c];
      }
    }
  }
  const bool rg = tape && (x.requires_grad() || gamma.requires_grad() ||
                           beta.requires_grad());
  if (rg) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, gc = gamma, bc = beta, oc = out, hc = xhat;
    tape->record([xc, gc, bc, oc, hc, inv_std, batch, channels, plane, groups,
                  cg, gsz]() mutable {
      const T* og = oc.grad();
      const T* hv2 = hc.data();
      const T* gv2 = gc.data();
      T* xg = xc.requires_grad() ? xc.grad() : nullptr;
      T* gg = gc.requires_grad() ? gc.grad() : nullptr;
      T* bg = bc.requires_grad() ? bc.grad() : nullptr;
      for (int64_t b = 0; b < batch; ++b) {
        for (int64_t g = 0; g < groups; ++g) {
          const int64_t base = (b * channels + g * cg) * plane;
          if (gg || bg) {
            for (int64_t i = 0; i < gsz; ++i) {
              const int64_t c = g * cg + i / plane;
              if (gg) gg[c] += og[base + i] * hv2[base + i];
              if (bg) bg[c] += og[base + i];
            }
          }
          if (xg) {
            double sum_d = 0.0, sum_dh = 0.0;
            for (int64_t i = 0; i < gsz; ++i) {
              const int64_t c = g * cg + i / plane;
              const double d = static_cast<double>(og[base + i]) * gv2[c];
              sum_d += d;
              sum_dh += d * static_cast<double>(hv2[base + i]);
            }
            const double invn = 1.0 / static_cast<double>(gsz);
            const double istd =
                static_cast<double>(inv_std[static_cast<size_t>(b * groups + g)]);
            for (int64_t i = 0; i < gsz; ++i) {
              const int64_t c = g * cg + i / plane;
              const double d = static_cast<double>(og[base + i]) * gv2[c];
              xg[base + i] += static_cast<T>(
                  istd * (d - sum_d * invn -
                          static_cast<double>(hv2[base + i]) * sum_dh * invn));
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax over the last axis.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax_last(Tape<T>* tape, const Tensor<T>& x) {
  const int64_t c = x.dim(static_cast<int>(x.ndim()) - 1);
  const int64_t rows = x.numel() / c;
  auto out = Tensor<T>::zeros(x.shape());
  kernels::softmax_rows(x.data(), out.data(), rows, c);
  if (track(tape, x)) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    tape->record([xc, oc, rows, c]() mutable {
      const T* og = oc.grad();
      const T* ov = oc.data();
      T* xg = xc.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const T* o = ov + r * c;
        const T* d = og + r * c;
        double dot = 0.0;
        for (int64_t j = 0; j < c; ++j)
          dot += static_cast<double>(d[j]) * static_cast<double>(o[j]);
        for (int64_t j = 0; j < c; ++j)
          xg[r * c + j] += static_cast<T>(
              (static_cast<double>(d[j]) - dot) * static_cast<double>(o[j]));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> mean_all(Tape<T>* tape, const Tensor<T>& x) {
  auto out = Tensor<T>::zeros({1});
  const int64_t n = x.numel();
  out.data()[0] = static_cast<T>(kernels::block_sum(x.data(), n) /
                                 static_cast<double>(n));
  if (track(tape, x)) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    tape->record([xc, oc, n]() mutable {
      const T g = oc.grad()[0] / static_cast<T>(n);
      T* xg = xc.grad();
      for (int64_t i = 0; i < n; ++i) xg[i] += g;
    });
  }
  return out;
}

// Mean squared error between two same-shape tensors.
template <class T>
Tensor<T> mse(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  check_config(a.shape() == b.shape(), "mse: shape mismatch");
  const int64_t n = a.numel();
  auto out = Tensor<T>::zeros({1});
  double acc = 0.0;
  const T* av = a.data();
  const T* bv = b.data();
  for (int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
    acc += d * d;
  }
  out.data()[0] = static_cast<T>(acc / static_cast<double>(n));
  if (track(tape, a, b)) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc, n]() mutable {
      const T g = oc.grad()[0] * T(2) / static_cast<T>(n);
      const T* av2 = ac.data();
      const T* bv2 = bc.data();
      if (ac.requires_grad()) {
        T* ag = ac.grad();
        for (int64_t i = 0; i < n; ++i) ag[i] += g * (av2[i] - bv2[i]);
      }
      if (bc.requires_grad()) {
        T* bg = bc.grad();
        for (int64_t i = 0; i < n; ++i) bg[i] -= g * (av2[i] - bv2[i]);
      }
    });
  }
  return out;
}

// Injects an externally computed gradient at node x: the caller provides
// loss value and dloss/dx (e.g. from a closed-form loss evaluated in double).
template <class T>
Tensor<T> external_loss(Tape<T>* tape, const Tensor<T>& x, double value,
                        std::vector<T> grad_x) {
  check_config(static_cast<int64_t>(grad_x.size()) == x.numel(),
               "external_loss: gradient size");
  auto out = Tensor<T>::zeros({1});
  out.data()[0] = static_cast<T>(value);
  if (track(tape, x)) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    auto gshared = std::make_shared<std::vector<T>>(std::move(grad_x));
    tape->record([xc, oc, gshared]() mutable {
      const T g = oc.grad()[0];
      T* xg = xc.grad();
      const int64_t n = xc.numel();
      const T* gv = gshared->data();
      for (int64_t i = 0; i < n; ++i) xg[i] += g * gv[i];
    });
  }
  return out;
}

}  // namespace nn
}  // namespace tse

#endif  // TSE_TENSOR_HPP_
