#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "sfda/errors.hpp"
#include "sfda/tape.hpp"
#include "sfda/tensor.hpp"

namespace sfda {
namespace detail {

// c (MxN) += a (MxK) * b (KxN). k ascends in the accumulation, so results
// are bit-identical to a scalar triple loop over (i, j, k).
template <class S>
void gemm_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S aik = arow[p];
      const S* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

// c (MxN) += a (MxK) * b^T, b stored (NxK).
template <class S>
void gemm_nt_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const S* brow = b + j * k;
      S acc(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// c (KxN) += a^T * y, a stored (MxK), y stored (MxN).
template <class S>
void gemm_tn_acc(const S* a, const S* y, S* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    const S* yrow = y + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S aik = arow[p];
      S* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * yrow[j];
    }
  }
}

template <class S>
bool track(std::initializer_list<const Tensor<S>*> inputs) {
  if (!GradMode::enabled()) return false;
  for (const Tensor<S>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline void split_at_axis(const Shape& shape, std::size_t axis,
                          std::size_t* outer, std::size_t* n,
                          std::size_t* inner) {
  *outer = 1;
  for (std::size_t i = 0; i < axis; ++i) *outer *= shape[i];
  *n = shape[axis];
  *inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) *inner *= shape[i];
}

inline void require_axis(const char* op, const Shape& shape,
                         std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for " + shape_str(shape));
  }
}

// Generic permutation copy used by transpose forward and backward.
template <class S>
void permute_copy(const S* src, const Shape& src_shape,
                  const std::vector<std::size_t>& perm, S* dst,
                  bool accumulate) {
  const std::size_t rank = src_shape.size();
  Shape dst_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) dst_shape[i] = src_shape[perm[i]];

  std::vector<std::size_t> src_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) {
    src_strides[i - 1] = src_strides[i] * src_shape[i];
  }
  // stride of dst axis i in the source layout
  std::vector<std::size_t> walk(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) walk[i] = src_strides[perm[i]];

  const std::size_t total = shape_numel(src_shape);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src_off = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    if (accumulate) {
      dst[flat] += src[src_off];
    } else {
      dst[flat] = src[src_off];
    }
    for (std::size_t d = rank; d-- > 0;) {
      idx[d]++;
      src_off += walk[d];
      if (idx[d] < dst_shape[d]) break;
      src_off -= walk[d] * dst_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (detail::track<S>({&a, &b})) {
    out.set_requires_grad(true);
    Tensor<S> av = a, bv = b, ov = out;
    Tape<S>::active().record(OpKind::kAdd, [av, bv, ov]() mutable {
      const S* gy = ov.grad_if_allocated();
      if (!gy) return;
      if (av.requires_grad()) av.accumulate_grad(gy, av.numel());
      if (bv.requires_grad()) bv.accumulate_grad(gy, bv.numel());
    });
  }
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (detail::track<S>({&a, &b})) {
    out.set_requires_grad(true);
    Tensor<S> av = a, bv = b, ov = out;
    Tape<S>::active().record(OpKind::kSub, [av, bv, ov]() mutable {
      const S* gy = ov.grad_if_allocated();
      if (!gy) return;
      if (av.requires_grad()) av.accumulate_grad(gy, av.numel());
      if (bv.requires_grad()) {
        auto& g = bv.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= gy[i];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (detail::track<S>({&a, &b})) {
    out.set_requires_grad(true);
    Tensor<S> av = a, bv = b, ov = out;
    Tape<S>::active().record(OpKind::kMul, [av, bv, ov]() mutable {
      const S* gy = ov.grad_if_allocated();
      if (!gy) return;
      const std::size_t n = ov.numel();
      if (av.requires_grad()) {
        auto& g = av.grad();
        for (std::size_t i = 0; i < n; ++i) g[i] += gy[i] * bv.data()[i];
      }
      if (bv.requires_grad()) {
        auto& g = bv.grad();
        for (std::size_t i = 0; i < n; ++i) g[i] += gy[i] * av.data()[i];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, double c) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S cs = static_cast<S>(c);
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = cs * x.data()[i];
  if (detail::track<S>({&x})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, ov = out;
    Tape<S>::active().record(OpKind::kScale, [xv, ov, cs]() mutable {
      const S* gy = ov.grad_if_allocated();
      if (!gy) return;
      auto& g = xv.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs * gy[i];
    });
  }
  return out;
}

/// x[..., D] + b[D], broadcast over leading axes.
template <class S>
Tensor<S> bias_add(const Tensor<S>& x, const Tensor<S>& b) {
  if (x.rank() < 1 || b.rank() != 1 || x.shape().back() != b.dim(0)) {
    throw ShapeError("bias_add: shape mismatch " + shape_str(x.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  const std::size_t d = b.dim(0);
  const std::size_t rows = x.numel() / d;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xr = x.data() + r * d;
    S* yr = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) yr[j] = xr[j] + b.data()[j];
  }
  if (detail::track<S>({&x, &b})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, bv = b, ov = out;
    Tape<S>::active().record(OpKind::kBiasAdd, [xv, bv, ov, rows, d]() mutable {
      const S* gy = ov.grad_if_allocated();
      if (!gy) return;
      if (xv.requires_grad()) xv.accumulate_grad(gy, xv.numel());
      if (bv.requires_grad()) {
        auto& g = bv.grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const S* gr = gy + r * d;
          for (std::size_t j = 0; j < d; ++j) g[j] += gr[j];
        }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    out.data()[i] = x.data()[i] > S(0) ? x.data()[i] : S(0);
  }
  if (detail::track<S>({&x})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, ov = out;
    Tape<S>::active().record(OpKind::kRelu, [xv, ov]() mutable {
      const S* gy = ov.grad_if_allocated();
      if (!gy) return;
      auto& g = xv.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv.data()[i] > S(0)) g[i] += gy[i];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(x.data()[i]);
    out.data()[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
  }
  if (detail::track<S>({&x})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, ov = out;
    Tape<S>::active().record(OpKind::kGelu, [xv, ov]() mutable {
      const S* gy = ov.grad_if_allocated();
      if (!gy) return;
      auto& g = xv.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = static_cast<double>(xv.data()[i]);
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        g[i] += gy[i] * static_cast<S>(cdf + v * pdf);
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> log_(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    if (!(x.data()[i] > S(0))) {
      throw MathDomainError("log: nonpositive input " +
                            std::to_string(static_cast<double>(x.data()[i])));
    }
    out.data()[i] = std::log(x.data()[i]);
  }
  if (detail::track<S>({&x})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, ov = out;
    Tape<S>::active().record(OpKind::kLog, [xv, ov]() mutable {
      const S* gy = ov.grad_if_allocated();
      if (!gy) return;
      auto& g = xv.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] / xv.data()[i];
    });
  }
  return out;
}

template <class S>
Tensor<S> exp_(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::exp(x.data()[i]);
  if (detail::track<S>({&x})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, ov = out;
    Tape<S>::active().record(OpKind::kExp, [xv, ov]() mutable {
      const S* gy = ov.grad_if_allocated();
      if (!gy) return;
      auto& g = xv.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * ov.data()[i];
    });
  }
  return out;
}

/// x * log(x) with the entropy convention 0*log(0) = 0. Negative input is a
/// domain error; the gradient at exactly 0 is defined as 0.
template <class S>
Tensor<S> xlogx(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const S v = x.data()[i];
    if (v < S(0)) {
      throw MathDomainError("xlogx: negative input " +
                            std::to_string(static_cast<double>(v)));
    }
    out.data()[i] = v > S(0) ? v * std::log(v) : S(0);
  }
  if (detail::track<S>({&x})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, ov = out;
    Tape<S>::active().record(OpKind::kXLogX, [xv, ov]() mutable {
      const S* gy = ov.grad_if_allocated();
      if (!gy) return;
      auto& g = xv.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const S v = xv.data()[i];
        if (v > S(0)) g[i] += gy[i] * (std::log(v) + S(1));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> out = Tensor<S>::zeros({m, n});
  detail::gemm_acc(a.data(), b.data(), out.data(), m, k, n);
  if (detail::track<S>({&a, &b})) {
    out.set_requires_grad(true);
    Tensor<S> av = a, bv = b, ov = out;
    Tape<S>::active().record(OpKind::kMatmul, [av, bv, ov, m, k, n]() mutable {
      const S* gy = ov.grad_if_allocated();
      if (!gy) return;
      if (av.requires_grad()) {
        detail::gemm_nt_acc(gy, bv.data(), av.grad().data(), m, n, k);
      }
      if (bv.requires_grad()) {
        detail::gemm_tn_acc(av.data(), gy, bv.grad().data(), m, k, n);
      }
    });
  }
  return out;
}

/// [N,p,q] x [N,q,r] -> [N,p,r]
template <class S>
Tensor<S> batched_matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1)) {
    throw ShapeError("batched_matmul: incompatible shapes " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<S> out = Tensor<S>::zeros({nb, m, n});
  for (std::size_t i = 0; i < nb; ++i) {
    detail::gemm_acc(a.data() + i * m * k, b.data() + i * k * n,
                     out.data() + i * m * n, m, k, n);
  }
  if (detail::track<S>({&a, &b})) {
    out.set_requires_grad(true);
    Tensor<S> av = a, bv = b, ov = out;
    Tape<S>::active().record(
        OpKind::kBatchedMatmul, [av, bv, ov, nb, m, k, n]() mutable {
          const S* gy = ov.grad_if_allocated();
          if (!gy) return;
          for (std::size_t i = 0; i < nb; ++i) {
            const S* gi = gy + i * m * n;
            if (av.requires_grad()) {
              detail::gemm_nt_acc(gi, bv.data() + i * k * n,
                                  av.grad().data() + i * m * k, m, n, k);
            }
            if (bv.requires_grad()) {
              detail::gemm_tn_acc(av.data() + i * m * k, gi,
                                  bv.grad().data() + i * k * n, m, k, n);
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution and pooling
// ---------------------------------------------------------------------------

namespace detail {

// col is (Cin*kh*kw) x (oh*ow), rows ordered (ic, ky, kx). Together with the
// ascending-k gemm this makes the conv accumulation order (ic, ky, kx), the
// same as a naive nested loop.
template <class S>
void im2col(const S* x, std::size_t cin, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, std::size_t stride,
            std::size_t pad, std::size_t oh, std::size_t ow, S* col) {
  std::size_t row = 0;
  for (std::size_t ic = 0; ic < cin; ++ic) {
    const S* xc = x + ic * h * w;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx, ++row) {
        S* crow = col + row * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) -
              static_cast<std::ptrdiff_t>(pad);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) -
                static_cast<std::ptrdiff_t>(pad);
            S v(0);
            if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix >= 0 &&
                ix < static_cast<std::ptrdiff_t>(w)) {
              v = xc[static_cast<std::size_t>(iy) * w +
                     static_cast<std::size_t>(ix)];
            }
            crow[oy * ow + ox] = v;
          }
        }
      }
    }
  }
}

template <class S>
void col2im_acc(const S* col, std::size_t cin, std::size_t h, std::size_t w,
                std::size_t kh, std::size_t kw, std::size_t stride,
                std::size_t pad, std::size_t oh, std::size_t ow, S* dx) {
  std::size_t row = 0;
  for (std::size_t ic = 0; ic < cin; ++ic) {
    S* xc = dx + ic * h * w;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx, ++row) {
        const S* crow = col + row * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) -
              static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) -
                static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            xc[static_cast<std::size_t>(iy) * w +
               static_cast<std::size_t>(ix)] += crow[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// x [B,Cin,H,W] * w [Cout,Cin,kh,kw] + b [Cout]. Products accumulate in
/// (ic, ky, kx) order; the bias is added after the sum.
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                 std::size_t stride = 1, std::size_t pad = 0) {
  if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1 ||
      x.dim(1) != w.dim(1) || b.dim(0) != w.dim(0)) {
    throw ShapeError("conv2d: incompatible shapes " + shape_str(x.shape()) +
                     ", " + shape_str(w.shape()) + ", " +
                     shape_str(b.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t nb = x.dim(0), cin = x.dim(1), h = x.dim(2), wdt = x.dim(3);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (h + 2 * pad < kh || wdt + 2 * pad < kw) {
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) +
                     " larger than padded input " + shape_str(x.shape()));
  }
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (wdt + 2 * pad - kw) / stride + 1;
  const std::size_t kdim = cin * kh * kw;
  const std::size_t odim = oh * ow;

  Tensor<S> out = Tensor<S>::zeros({nb, cout, oh, ow});
  auto cols = std::make_shared<std::vector<std::vector<S>>>();
  cols->reserve(nb);
  for (std::size_t i = 0; i < nb; ++i) {
    cols->emplace_back(kdim * odim);
    detail::im2col(x.data() + i * cin * h * wdt, cin, h, wdt, kh, kw, stride,
                   pad, oh, ow, cols->back().data());
    S* ymat = out.data() + i * cout * odim;
    detail::gemm_acc(w.data(), cols->back().data(), ymat, cout, kdim, odim);
    for (std::size_t oc = 0; oc < cout; ++oc) {
      const S bias = b.data()[oc];
      S* yrow = ymat + oc * odim;
      for (std::size_t o = 0; o < odim; ++o) yrow[o] += bias;
    }
  }

  if (detail::track<S>({&x, &w, &b})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, wv = w, bv = b, ov = out;
    Tape<S>::active().record(
        OpKind::kConv2d,
        [xv, wv, bv, ov, cols, nb, cin, h, wdt, cout, kh, kw, stride, pad, oh,
         ow, kdim, odim]() mutable {
          const S* gy = ov.grad_if_allocated();
          if (!gy) return;
          std::vector<S> dcol(kdim * odim);
          for (std::size_t i = 0; i < nb; ++i) {
            const S* gmat = gy + i * cout * odim;
            if (wv.requires_grad()) {
              detail::gemm_nt_acc(gmat, (*cols)[i].data(),
                                  wv.grad().data(), cout, odim, kdim);
            }
            if (bv.requires_grad()) {
              auto& gb = bv.grad();
              for (std::size_t oc = 0; oc < cout; ++oc) {
                const S* grow = gmat + oc * odim;
                S acc(0);
                for (std::size_t o = 0; o < odim; ++o) acc += grow[o];
                gb[oc] += acc;
              }
            }
            if (xv.requires_grad()) {
              std::fill(dcol.begin(), dcol.end(), S(0));
              detail::gemm_tn_acc(wv.data(), gmat, dcol.data(), cout, kdim,
                                  odim);
              detail::col2im_acc(dcol.data(), cin, h, wdt, kh, kw, stride, pad,
                                 oh, ow, xv.grad().data() + i * cin * h * wdt);
            }
          }
        });
  }
  return out;
}

template <class S>
Tensor<S> avg_pool2d(const Tensor<S>& x, std::size_t k, std::size_t stride) {
  if (x.rank() != 4) {
    throw ShapeError("avg_pool2d: expected 4-D input, got " +
                     shape_str(x.shape()));
  }
  if (k == 0 || stride == 0 || x.dim(2) < k || x.dim(3) < k) {
    throw ShapeError("avg_pool2d: window " + std::to_string(k) +
                     " invalid for " + shape_str(x.shape()));
  }
  const std::size_t nb = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  const S inv = S(1) / static_cast<S>(k * k);
  Tensor<S> out = Tensor<S>::zeros({nb, c, oh, ow});
  for (std::size_t bc = 0; bc < nb * c; ++bc) {
    const S* xp = x.data() + bc * h * w;
    S* yp = out.data() + bc * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        S acc(0);
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dx = 0; dx < k; ++dx) {
            acc += xp[(oy * stride + dy) * w + ox * stride + dx];
          }
        }
        yp[oy * ow + ox] = acc * inv;
      }
    }
  }
  if (detail::track<S>({&x})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, ov = out;
    Tape<S>::active().record(
        OpKind::kAvgPool2d, [xv, ov, nb, c, h, w, oh, ow, k, stride, inv]() mutable {
          const S* gy = ov.grad_if_allocated();
          if (!gy) return;
          auto& g = xv.grad();
          for (std::size_t bc = 0; bc < nb * c; ++bc) {
            const S* gp = gy + bc * oh * ow;
            S* gxp = g.data() + bc * h * w;
            for (std::size_t oy = 0; oy < oh; ++oy) {
              for (std::size_t ox = 0; ox < ow; ++ox) {
                const S gv = gp[oy * ow + ox] * inv;
                for (std::size_t dy = 0; dy < k; ++dy) {
                  for (std::size_t dx = 0; dx < k; ++dx) {
                    gxp[(oy * stride + dy) * w + ox * stride + dx] += gv;
                  }
                }
              }
            }
          }
        });
  }
  return out;
}

/// [B,C,H,W] -> [B,C], mean over the spatial grid.
template <class S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  if (x.rank() != 4) {
    throw ShapeError("global_avg_pool: expected 4-D input, got " +
                     shape_str(x.shape()));
  }
  const std::size_t nb = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const S inv = S(1) / static_cast<S>(hw);
  Tensor<S> out = Tensor<S>::zeros({nb, c});
  for (std::size_t bc = 0; bc < nb * c; ++bc) {
    const S* xp = x.data() + bc * hw;
    S acc(0);
    for (std::size_t i = 0; i < hw; ++i) acc += xp[i];
    out.data()[bc] = acc * inv;
  }
  if (detail::track<S>({&x})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, ov = out;
    Tape<S>::active().record(OpKind::kGlobalAvgPool,
                             [xv, ov, nb, c, hw, inv]() mutable {
                               const S* gy = ov.grad_if_allocated();
                               if (!gy) return;
                               auto& g = xv.grad();
                               for (std::size_t bc = 0; bc < nb * c; ++bc) {
                                 const S gv = gy[bc] * inv;
                                 S* gp = g.data() + bc * hw;
                                 for (std::size_t i = 0; i < hw; ++i) {
                                   gp[i] += gv;
                                 }
                               }
                             });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> softmax(const Tensor<S>& x, std::size_t axis) {
  detail::require_axis("softmax", x.shape(), axis);
  std::size_t outer, n, inner;
  detail::split_at_axis(x.shape(), axis, &outer, &n, &inner);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const S* xs = x.data() + o * n * inner + in;
      S* ys = out.data() + o * n * inner + in;
      S mx = xs[0];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xs[i * inner]);
      S z(0);
      for (std::size_t i = 0; i < n; ++i) {
        const S e = std::exp(xs[i * inner] - mx);
        ys[i * inner] = e;
        z += e;
      }
      const S invz = S(1) / z;
      for (std::size_t i = 0; i < n; ++i) ys[i * inner] *= invz;
    }
  }
  if (detail::track<S>({&x})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, ov = out;
    Tape<S>::active().record(
        OpKind::kSoftmax, [xv, ov, outer, n, inner]() mutable {
          const S* gy = ov.grad_if_allocated();
          if (!gy) return;
          auto& g = xv.grad();
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
              const std::size_t base = o * n * inner + in;
              S dot(0);
              for (std::size_t i = 0; i < n; ++i) {
                dot += gy[base + i * inner] * ov.data()[base + i * inner];
              }
              for (std::size_t i = 0; i < n; ++i) {
                const std::size_t idx = base + i * inner;
                g[idx] += ov.data()[idx] * (gy[idx] - dot);
              }
            }
          }
        });
  }
  return out;
}

template <class S>
Tensor<S> log_softmax(const Tensor<S>& x, std::size_t axis) {
  detail::require_axis("log_softmax", x.shape(), axis);
  std::size_t outer, n, inner;
  detail::split_at_axis(x.shape(), axis, &outer, &n, &inner);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const S* xs = x.data() + o * n * inner + in;
      S* ys = out.data() + o * n * inner + in;
      S mx = xs[0];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xs[i * inner]);
      S z(0);
      for (std::size_t i = 0; i < n; ++i) z += std::exp(xs[i * inner] - mx);
      const S lse = mx + std::log(z);
      for (std::size_t i = 0; i < n; ++i) ys[i * inner] = xs[i * inner] - lse;
    }
  }
  if (detail::track<S>({&x})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, ov = out;
    Tape<S>::active().record(
        OpKind::kLogSoftmax, [xv, ov, outer, n, inner]() mutable {
          const S* gy = ov.grad_if_allocated();
          if (!gy) return;
          auto& g = xv.grad();
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
              const std::size_t base = o * n * inner + in;
              S gsum(0);
              for (std::size_t i = 0; i < n; ++i) gsum += gy[base + i * inner];
              for (std::size_t i = 0; i < n; ++i) {
                const std::size_t idx = base + i * inner;
                g[idx] += gy[idx] - std::exp(ov.data()[idx]) * gsum;
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
  S acc(0);
  for (S v : x.values()) acc += v;
  Tensor<S> out = Tensor<S>::scalar(acc);
  if (detail::track<S>({&x})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, ov = out;
    Tape<S>::active().record(OpKind::kSum, [xv, ov]() mutable {
      const S* gy = ov.grad_if_allocated();
      if (!gy) return;
      auto& g = xv.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[0];
    });
  }
  return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  S acc(0);
  for (S v : x.values()) acc += v;
  const S inv = S(1) / static_cast<S>(x.numel());
  Tensor<S> out = Tensor<S>::scalar(acc * inv);
  if (detail::track<S>({&x})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, ov = out;
    Tape<S>::active().record(OpKind::kMean, [xv, ov, inv]() mutable {
      const S* gy = ov.grad_if_allocated();
      if (!gy) return;
      auto& g = xv.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[0] * inv;
    });
  }
  return out;
}

/// Mean over one axis; the axis is removed from the shape.
template <class S>
Tensor<S> mean_axis(const Tensor<S>& x, std::size_t axis) {
  detail::require_axis("mean", x.shape(), axis);
  std::size_t outer, n, inner;
  detail::split_at_axis(x.shape(), axis, &outer, &n, &inner);
  Shape oshape;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i != axis) oshape.push_back(x.dim(i));
  }
  const S inv = S(1) / static_cast<S>(n);
  Tensor<S> out = Tensor<S>::zeros(oshape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      S acc(0);
      for (std::size_t i = 0; i < n; ++i) {
        acc += x.data()[(o * n + i) * inner + in];
      }
      out.data()[o * inner + in] = acc * inv;
    }
  }
  if (detail::track<S>({&x})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, ov = out;
    Tape<S>::active().record(
        OpKind::kMean, [xv, ov, outer, n, inner, inv]() mutable {
          const S* gy = ov.grad_if_allocated();
          if (!gy) return;
          auto& g = xv.grad();
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
              const S gv = gy[o * inner + in] * inv;
              for (std::size_t i = 0; i < n; ++i) {
                g[(o * n + i) * inner + in] += gv;
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

/// Normalizes the last axis to zero mean / unit variance, then applies the
/// affine map gain * xhat + bias. Pass gain = ones, bias = zeros for the
/// plain normalization.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain,
                     const Tensor<S>& bias, double eps = 1e-5) {
  if (x.rank() < 1 || gain.rank() != 1 || bias.rank() != 1 ||
      gain.dim(0) != x.shape().back() || bias.dim(0) != x.shape().back()) {
    throw ShapeError("layer_norm: shape mismatch " + shape_str(x.shape()) +
                     ", " + shape_str(gain.shape()) + ", " +
                     shape_str(bias.shape()));
  }
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  const S epss = static_cast<S>(eps);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<S>>(x.numel());
  auto rstd = std::make_shared<std::vector<S>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xr = x.data() + r * d;
    S mean(0);
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<S>(d);
    S var(0);
    for (std::size_t j = 0; j < d; ++j) {
      const S c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<S>(d);
    const S rs = S(1) / std::sqrt(var + epss);
    (*rstd)[r] = rs;
    S* yr = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      const S h = (xr[j] - mean) * rs;
      (*xhat)[r * d + j] = h;
      yr[j] = h * gain.data()[j] + bias.data()[j];
    }
  }
  if (detail::track<S>({&x, &gain, &bias})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, gv = gain, bv = bias, ov = out;
    Tape<S>::active().record(
        OpKind::kLayerNorm, [xv, gv, bv, ov, xhat, rstd, rows, d]() mutable {
          const S* gy = ov.grad_if_allocated();
          if (!gy) return;
          if (gv.requires_grad()) {
            auto& gg = gv.grad();
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t j = 0; j < d; ++j) {
                gg[j] += gy[r * d + j] * (*xhat)[r * d + j];
              }
            }
          }
          if (bv.requires_grad()) {
            auto& gb = bv.grad();
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t j = 0; j < d; ++j) gb[j] += gy[r * d + j];
            }
          }
          if (xv.requires_grad()) {
            auto& gx = xv.grad();
            const S invd = S(1) / static_cast<S>(d);
            for (std::size_t r = 0; r < rows; ++r) {
              S m1(0), m2(0);
              for (std::size_t j = 0; j < d; ++j) {
                const S dh = gy[r * d + j] * gv.data()[j];
                m1 += dh;
                m2 += dh * (*xhat)[r * d + j];
              }
              m1 *= invd;
              m2 *= invd;
              for (std::size_t j = 0; j < d; ++j) {
                const S dh = gy[r * d + j] * gv.data()[j];
                gx[r * d + j] +=
                    (*rstd)[r] * (dh - m1 - (*xhat)[r * d + j] * m2);
              }
            }
          }
        });
  }
  return out;
}

/// Batch normalization over [N,D] (per feature) or [N,C,H,W] (per channel).
/// In training mode batch statistics normalize the input and the running
/// buffers are updated in place with momentum 0.1 (unbiased variance); in
/// eval mode the frozen running buffers normalize.
template <class S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta, Tensor<S>& running_mean,
                     Tensor<S>& running_var, bool training,
                     double momentum = 0.1, double eps = 1e-5) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw ShapeError("batch_norm: expected 2-D or 4-D input, got " +
                     shape_str(x.shape()));
  }
  const std::size_t c = x.dim(1);
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
      running_var.numel() != c) {
    throw ShapeError("batch_norm: parameter size mismatch for " +
                     shape_str(x.shape()));
  }
  const std::size_t nb = x.dim(0);
  const std::size_t inner = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  const std::size_t m = nb * inner;
  if (training && m < 2) {
    throw ContractError("batch_norm: training mode needs at least 2 samples");
  }
  const S epss = static_cast<S>(eps);

  auto mean = std::make_shared<std::vector<S>>(c, S(0));
  auto rstd = std::make_shared<std::vector<S>>(c, S(0));
  if (training) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      S acc(0);
      for (std::size_t b = 0; b < nb; ++b) {
        const S* xp = x.data() + (b * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) acc += xp[i];
      }
      const S mu = acc / static_cast<S>(m);
      S var(0);
      for (std::size_t b = 0; b < nb; ++b) {
        const S* xp = x.data() + (b * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) {
          const S d = xp[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<S>(m);
      (*mean)[ch] = mu;
      (*rstd)[ch] = S(1) / std::sqrt(var + epss);
      const S mom = static_cast<S>(momentum);
      const S unbiased = var * static_cast<S>(m) / static_cast<S>(m - 1);
      running_mean.data()[ch] = (S(1) - mom) * running_mean.data()[ch] + mom * mu;
      running_var.data()[ch] =
          (S(1) - mom) * running_var.data()[ch] + mom * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      (*mean)[ch] = running_mean.data()[ch];
      (*rstd)[ch] = S(1) / std::sqrt(running_var.data()[ch] + epss);
    }
  }

  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<S>>(x.numel());
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const S mu = (*mean)[ch], rs = (*rstd)[ch];
      const S g = gamma.data()[ch], be = beta.data()[ch];
      const S* xp = x.data() + (b * c + ch) * inner;
      S* yp = out.data() + (b * c + ch) * inner;
      S* hp = xhat->data() + (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const S h = (xp[i] - mu) * rs;
        hp[i] = h;
        yp[i] = h * g + be;
      }
    }
  }

  if (detail::track<S>({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, gv = gamma, bv = beta, ov = out;
    Tape<S>::active().record(
        OpKind::kBatchNorm,
        [xv, gv, bv, ov, xhat, rstd, nb, c, inner, m, training]() mutable {
          const S* gy = ov.grad_if_allocated();
          if (!gy) return;
          for (std::size_t ch = 0; ch < c; ++ch) {
            S sum_gy(0), sum_gyh(0);
            for (std::size_t b = 0; b < nb; ++b) {
              const std::size_t off = (b * c + ch) * inner;
              for (std::size_t i = 0; i < inner; ++i) {
                sum_gy += gy[off + i];
                sum_gyh += gy[off + i] * (*xhat)[off + i];
              }
            }
            if (gv.requires_grad()) gv.grad()[ch] += sum_gyh;
            if (bv.requires_grad()) bv.grad()[ch] += sum_gy;
            if (xv.requires_grad()) {
              auto& gx = xv.grad();
              const S g = gv.data()[ch], rs = (*rstd)[ch];
              if (training) {
                const S invm = S(1) / static_cast<S>(m);
                for (std::size_t b = 0; b < nb; ++b) {
                  const std::size_t off = (b * c + ch) * inner;
                  for (std::size_t i = 0; i < inner; ++i) {
                    gx[off + i] +=
                        g * rs *
                        (gy[off + i] - sum_gy * invm -
                         (*xhat)[off + i] * sum_gyh * invm);
                  }
                }
              } else {
                for (std::size_t b = 0; b < nb; ++b) {
                  const std::size_t off = (b * c + ch) * inner;
                  for (std::size_t i = 0; i < inner; ++i) {
                    gx[off + i] += g * rs * gy[off + i];
                  }
                }
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layout
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  Tensor<S> out = Tensor<S>::from(std::move(shape), x.values());
  if (detail::track<S>({&x})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, ov = out;
    Tape<S>::active().record(OpKind::kReshape, [xv, ov]() mutable {
      const S* gy = ov.grad_if_allocated();
      if (!gy) return;
      xv.accumulate_grad(gy, xv.numel());
    });
  }
  return out;
}

template <class S>
Tensor<S> transpose(const Tensor<S>& x, std::vector<std::size_t> perm) {
  const std::size_t rank = x.rank();
  std::vector<bool> seen(rank, false);
  if (perm.size() != rank) {
    throw ShapeError("transpose: permutation size " +
                     std::to_string(perm.size()) + " vs rank " +
                     std::to_string(rank));
  }
  for (std::size_t p : perm) {
    if (p >= rank || seen[p]) {
      throw ShapeError("transpose: invalid permutation for " +
                       shape_str(x.shape()));
    }
    seen[p] = true;
  }
  Shape oshape(rank);
  for (std::size_t i = 0; i < rank; ++i) oshape[i] = x.dim(perm[i]);
  Tensor<S> out = Tensor<S>::zeros(oshape);
  detail::permute_copy(x.data(), x.shape(), perm, out.data(), false);
  if (detail::track<S>({&x})) {
    out.set_requires_grad(true);
    std::vector<std::size_t> inv(rank);
    for (std::size_t i = 0; i < rank; ++i) inv[perm[i]] = i;
    Tensor<S> xv = x, ov = out;
    Tape<S>::active().record(OpKind::kTranspose, [xv, ov, inv]() mutable {
      const S* gy = ov.grad_if_allocated();
      if (!gy) return;
      xv.grad();  // ensure allocated
      detail::permute_copy(gy, ov.shape(), inv, xv.grad().data(), true);
    });
  }
  return out;
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  detail::require_axis("concat", parts[0].shape(), axis);
  Shape oshape = parts[0].shape();
  std::size_t total = parts[0].dim(axis);
  for (std::size_t p = 1; p < parts.size(); ++p) {
    Shape s = parts[p].shape();
    if (s.size() != oshape.size()) {
      throw ShapeError("concat: rank mismatch");
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != oshape[i]) {
        throw ShapeError("concat: shape mismatch " + shape_str(oshape) +
                         " vs " + shape_str(s) + " on axis " +
                         std::to_string(i));
      }
    }
    total += s[axis];
  }
  oshape[axis] = total;
  std::size_t outer, n, inner;
  detail::split_at_axis(oshape, axis, &outer, &n, &inner);
  Tensor<S> out = Tensor<S>::zeros(oshape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t pn = p.dim(axis);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(p.data() + o * pn * inner, p.data() + (o + 1) * pn * inner,
                out.data() + (o * n + off) * inner);
    }
    off += pn;
  }
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  if (GradMode::enabled() && needs) {
    out.set_requires_grad(true);
    std::vector<Tensor<S>> pv = parts;
    Tensor<S> ov = out;
    Tape<S>::active().record(
        OpKind::kConcat, [pv, ov, offsets, outer, n, inner, axis]() mutable {
          const S* gy = ov.grad_if_allocated();
          if (!gy) return;
          for (std::size_t pi = 0; pi < pv.size(); ++pi) {
            if (!pv[pi].requires_grad()) continue;
            auto& g = pv[pi].grad();
            const std::size_t pn = pv[pi].dim(axis);
            for (std::size_t o = 0; o < outer; ++o) {
              const S* src = gy + (o * n + offsets[pi]) * inner;
              S* dst = g.data() + o * pn * inner;
              for (std::size_t i = 0; i < pn * inner; ++i) dst[i] += src[i];
            }
          }
        });
  }
  return out;
}

/// out[i] = x[indices[i]] over the first axis.
template <class S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<std::size_t>& indices) {
  if (x.rank() < 1) throw ShapeError("gather_rows: scalar input");
  const std::size_t rows = x.dim(0);
  const std::size_t stride = x.numel() / std::max<std::size_t>(rows, 1);
  for (std::size_t i : indices) {
    if (i >= rows) {
      throw ContractError("gather_rows: index " + std::to_string(i) +
                          " out of range [0, " + std::to_string(rows) + ")");
    }
  }
  Shape oshape = x.shape();
  oshape[0] = indices.size();
  Tensor<S> out = Tensor<S>::zeros(oshape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy(x.data() + indices[i] * stride, x.data() + (indices[i] + 1) * stride,
              out.data() + i * stride);
  }
  if (detail::track<S>({&x})) {
    out.set_requires_grad(true);
    Tensor<S> xv = x, ov = out;
    Tape<S>::active().record(
        OpKind::kGatherRows, [xv, ov, indices, stride]() mutable {
          const S* gy = ov.grad_if_allocated();
          if (!gy) return;
          auto& g = xv.grad();
          for (std::size_t i = 0; i < indices.size(); ++i) {
            S* dst = g.data() + indices[i] * stride;
            const S* src = gy + i * stride;
            for (std::size_t j = 0; j < stride; ++j) dst[j] += src[j];
          }
        });
  }
  return out;
}

}  // namespace sfda
