// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "gcv/tensor.hpp"

namespace gcv {

namespace detail {

inline std::string shapes_msg(const char* prim, const Shape& a, const Shape& b) {
  return std::string(prim) + ": incompatible shapes " + to_string(a) + " and " + to_string(b);
}

inline TensorImpl& input(TensorImpl& out, std::size_t i) { return *out.producer->inputs[i]; }

// Trailing-dimension aligned broadcasting between two shapes.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  std::size_t na = 0, nb = 0, n = 0;
  enum class Kind { Same, SuffixB, SuffixA, ScalarB, ScalarA, General } kind = Kind::General;

  Broadcast(const char* prim, const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    out.assign(r, 1);
    Shape pa(r, 1), pb(r, 1);
    std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
    for (std::size_t i = 0; i < r; ++i) {
      if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) throw ShapeError(shapes_msg(prim, a, b));
      out[i] = std::max(pa[i], pb[i]);
    }
    na = numel(a);
    nb = numel(b);
    n = numel(out);
    stride_a = strides(pa, out);
    stride_b = strides(pb, out);
    const bool a_full = (na == n), b_full = (nb == n);
    if (a_full && b_full) {
      kind = Kind::Same;
    } else if (nb == 1) {
      kind = Kind::ScalarB;
    } else if (na == 1) {
      kind = Kind::ScalarA;
    } else if (a_full && is_suffix(pb, out)) {
      kind = Kind::SuffixB;
    } else if (b_full && is_suffix(pa, out)) {
      kind = Kind::SuffixA;
    }
  }

  static std::vector<std::size_t> strides(const Shape& padded, const Shape& out) {
    std::vector<std::size_t> s(out.size(), 0);
    std::size_t acc = 1;
    for (std::size_t i = out.size(); i-- > 0;) {
      s[i] = (padded[i] == 1 && out[i] != 1) ? 0 : acc;
      acc *= padded[i];
    }
    return s;
  }

  // True when `p` is 1...1 followed by exactly the trailing dims of `out`.
  static bool is_suffix(const Shape& p, const Shape& out) {
    std::size_t i = 0;
    while (i < p.size() && p[i] == 1 && out[i] != 1) ++i;
    for (std::size_t j = i; j < p.size(); ++j)
      if (p[j] != out[j]) return false;
    return true;
  }

  template <typename F>
  void for_each(F&& f) const {
    switch (kind) {
      case Kind::Same:
        for (std::size_t i = 0; i < n; ++i) f(i, i, i);
        return;
      case Kind::ScalarB:
        for (std::size_t i = 0; i < n; ++i) f(i, i, std::size_t{0});
        return;
      case Kind::ScalarA:
        for (std::size_t i = 0; i < n; ++i) f(i, std::size_t{0}, i);
        return;
      case Kind::SuffixB:
        for (std::size_t i = 0; i < n;)
          for (std::size_t j = 0; j < nb; ++j, ++i) f(i, i, j);
        return;
      case Kind::SuffixA:
        for (std::size_t i = 0; i < n;)
          for (std::size_t j = 0; j < na; ++j, ++i) f(i, j, i);
        return;
      case Kind::General:
        break;
    }
    const std::size_t r = out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < n; ++i) {
      f(i, ia, ib);
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        ia += stride_a[d];
        ib += stride_b[d];
        if (idx[d] < out[d]) break;
        ia -= stride_a[d] * out[d];
        ib -= stride_b[d] * out[d];
        idx[d] = 0;
      }
    }
  }
};

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const char* prim, const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw ShapeError(std::string(prim) + ": axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Row-major GEMM kernels, C += op(A) op(B).
// nn: A m×k, B k×n.
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* __restrict a,
                    const double* __restrict b, double* __restrict c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// nt: A m×k, B stored n×k.
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* __restrict a,
                    const double* __restrict b, double* __restrict c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// tn: A stored k×m, B k×n.
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* __restrict a,
                    const double* __restrict b, double* __restrict c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* prim, const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
  return make_result(prim, x.shape(), std::move(out), {x}, [deriv](TensorImpl& o) {
    auto& in = input(o, 0);
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * deriv(in.data[i], o.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary primitives (broadcasting)

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::Broadcast bc("add", a.shape(), b.shape());
  std::vector<double> out(bc.n);
  const auto ad = a.data();
  const auto bd = b.data();
  bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = ad[ia] + bd[ib]; });
  return detail::make_result("add", bc.out, std::move(out), {a, b}, [bc](TensorImpl& o) {
    auto& x = detail::input(o, 0);
    auto& y = detail::input(o, 1);
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      bc.for_each([&](std::size_t i, std::size_t ia, std::size_t) { g[ia] += o.grad[i]; });
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      bc.for_each([&](std::size_t i, std::size_t, std::size_t ib) { g[ib] += o.grad[i]; });
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::Broadcast bc("subtract", a.shape(), b.shape());
  std::vector<double> out(bc.n);
  const auto ad = a.data();
  const auto bd = b.data();
  bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = ad[ia] - bd[ib]; });
  return detail::make_result("subtract", bc.out, std::move(out), {a, b}, [bc](TensorImpl& o) {
    auto& x = detail::input(o, 0);
    auto& y = detail::input(o, 1);
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      bc.for_each([&](std::size_t i, std::size_t ia, std::size_t) { g[ia] += o.grad[i]; });
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      bc.for_each([&](std::size_t i, std::size_t, std::size_t ib) { g[ib] -= o.grad[i]; });
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::Broadcast bc("multiply", a.shape(), b.shape());
  std::vector<double> out(bc.n);
  const auto ad = a.data();
  const auto bd = b.data();
  bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = ad[ia] * bd[ib]; });
  return detail::make_result("multiply", bc.out, std::move(out), {a, b}, [bc](TensorImpl& o) {
    auto& x = detail::input(o, 0);
    auto& y = detail::input(o, 1);
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { g[ia] += o.grad[i] * y.data[ib]; });
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { g[ib] += o.grad[i] * x.data[ia]; });
    }
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::Broadcast bc("divide", a.shape(), b.shape());
  std::vector<double> out(bc.n);
  const auto ad = a.data();
  const auto bd = b.data();
  bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = ad[ia] / bd[ib]; });
  return detail::make_result("divide", bc.out, std::move(out), {a, b}, [bc](TensorImpl& o) {
    auto& x = detail::input(o, 0);
    auto& y = detail::input(o, 1);
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { g[ia] += o.grad[i] / y.data[ib]; });
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      bc.for_each([&](std::size_t i, std::size_t, std::size_t ib) {
        g[ib] -= o.grad[i] * o.data[i] / y.data[ib];
      });
    }
  });
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary(
      "scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary(
      "add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }
inline Tensor operator*(const Tensor& x, double s) { return scale(x, s); }
inline Tensor operator+(const Tensor& x, double s) { return add_scalar(x, s); }
inline Tensor operator-(const Tensor& x) { return scale(x, -1.0); }

// ---------------------------------------------------------------------------
// Elementwise unary primitives

/// Subgradient at 0 is 0.
inline Tensor relu(const Tensor& x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor sqrt(const Tensor& x) {
  return detail::unary(
      "sqrt", x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

inline Tensor pow(const Tensor& x, double p) {
  return detail::unary(
      "power", x, [p](double v) { return std::pow(v, p); },
      [p](double v, double) { return p * std::pow(v, p - 1.0); });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

/// Gradient flows only where x > lo.
inline Tensor clamp_min(const Tensor& x, double lo) {
  return detail::unary(
      "clamp_min", x, [lo](double v) { return v > lo ? v : lo; },
      [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return detail::unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

// ---------------------------------------------------------------------------
// Matrix products and layout

/// Matrix product over the last two axes. Supported forms:
///   [..., m, k] x [k, n]          (rhs shared across the batch)
///   [m, k]      x [..., k, n]     (lhs shared across the batch)
///   [..., m, k] x [..., k, n]     (equal leading dims)
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError(detail::shapes_msg("matmul", a.shape(), b.shape()));
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t kb = bs[bs.size() - 2], n = bs.back();
  if (k != kb) throw ShapeError(detail::shapes_msg("matmul", as, bs));

  enum class Mode { SharedRhs, SharedLhs, Batched } mode;
  Shape out_shape;
  std::size_t batch = 1;
  if (b.rank() == 2) {
    mode = Mode::SharedRhs;
    out_shape = as;
    out_shape.back() = n;
  } else if (a.rank() == 2) {
    mode = Mode::SharedLhs;
    out_shape = bs;
    out_shape[out_shape.size() - 2] = m;
    batch = numel(bs) / (k * n);
  } else {
    if (!std::equal(as.begin(), as.end() - 2, bs.begin(), bs.end() - 2))
      throw ShapeError(detail::shapes_msg("matmul", as, bs));
    mode = Mode::Batched;
    out_shape = as;
    out_shape.back() = n;
    batch = numel(as) / (m * k);
  }

  std::vector<double> out(numel(out_shape), 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  switch (mode) {
    case Mode::SharedRhs:
      detail::gemm_nn(numel(as) / k, n, k, ad, bd, out.data());
      break;
    case Mode::SharedLhs:
      for (std::size_t t = 0; t < batch; ++t) detail::gemm_nn(m, n, k, ad, bd + t * k * n, out.data() + t * m * n);
      break;
    case Mode::Batched:
      for (std::size_t t = 0; t < batch; ++t)
        detail::gemm_nn(m, n, k, ad + t * m * k, bd + t * k * n, out.data() + t * m * n);
      break;
  }

  return detail::make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                             [mode, batch, m, n, k](TensorImpl& o) {
                               auto& x = detail::input(o, 0);
                               auto& y = detail::input(o, 1);
                               const double* g = o.grad.data();
                               if (mode == Mode::SharedRhs) {
                                 const std::size_t rows = x.data.size() / k;
                                 if (x.requires_grad) detail::gemm_nt(rows, k, n, g, y.data.data(), x.grad_buffer().data());
                                 if (y.requires_grad) detail::gemm_tn(k, n, rows, x.data.data(), g, y.grad_buffer().data());
                                 return;
                               }
                               for (std::size_t t = 0; t < batch; ++t) {
                                 const std::size_t xo = (mode == Mode::SharedLhs) ? 0 : t * m * k;
                                 const std::size_t yo = t * k * n;
                                 const double* gt = g + t * m * n;
                                 if (x.requires_grad)
                                   detail::gemm_nt(m, k, n, gt, y.data.data() + yo, x.grad_buffer().data() + xo);
                                 if (y.requires_grad)
                                   detail::gemm_tn(k, n, m, x.data.data() + xo, gt, y.grad_buffer().data() + yo);
                               }
                             });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {x}, [](TensorImpl& o) {
    auto& in = detail::input(o, 0);
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

/// General axis permutation: out.shape[i] = x.shape[axes[i]].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const auto& s = x.shape();
  const std::size_t r = s.size();
  if (axes.size() != r) throw ShapeError("permute: " + std::to_string(axes.size()) + " axes for shape " + to_string(s));
  std::vector<bool> seen(r, false);
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) throw ShapeError("permute: invalid axis list for shape " + to_string(s));
    seen[ax] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * s[i + 1];
  Shape os(r);
  std::vector<std::size_t> st(r);
  for (std::size_t i = 0; i < r; ++i) {
    os[i] = s[axes[i]];
    st[i] = in_strides[axes[i]];
  }
  // src[i] = flat input index of output element i.
  const std::size_t n = x.size();
  std::vector<std::size_t> src(n);
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
      src[i] = off;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        off += st[d];
        if (idx[d] < os[d]) break;
        off -= st[d] * os[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<double> out(n);
  const auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = xd[src[i]];
  return detail::make_result("permute", std::move(os), std::move(out), {x}, [src = std::move(src)](TensorImpl& o) {
    auto& in = detail::input(o, 0);
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += o.grad[i];
  });
}

/// Swaps the last two axes.
inline Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose: needs rank >= 2, got " + to_string(x.shape()));
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + to_string(s0));
  Shape os = s0;
  os[axis] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok) throw ShapeError(detail::shapes_msg("concat", s0, s));
    os[axis] += s[axis];
  }
  const auto sp = detail::split_axis("concat", os, axis);
  std::vector<double> out(numel(os));
  std::vector<std::size_t> widths;
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * sp.inner;
    const auto pd = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(o * sp.len * sp.inner + col));
    widths.push_back(w);
    col += w;
  }
  const std::size_t row = sp.len * sp.inner, outer = sp.outer;
  return detail::make_result("concat", std::move(os), std::move(out), parts,
                             [widths = std::move(widths), row, outer](TensorImpl& o) {
                               std::size_t c = 0;
                               for (std::size_t p = 0; p < widths.size(); ++p) {
                                 auto& in = detail::input(o, p);
                                 const std::size_t w = widths[p];
                                 if (in.requires_grad) {
                                   auto& g = in.grad_buffer();
                                   for (std::size_t r = 0; r < outer; ++r)
                                     for (std::size_t j = 0; j < w; ++j) g[r * w + j] += o.grad[r * row + c + j];
                                 }
                                 c += w;
                               }
                             });
}

/// Contiguous range [start, start+len) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  const auto sp = detail::split_axis("split", x.shape(), axis);
  if (len == 0 || start + len > sp.len)
    throw ShapeError("split: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") outside axis of extent " + std::to_string(sp.len));
  Shape os = x.shape();
  os[axis] = len;
  const std::size_t w = len * sp.inner, row = sp.len * sp.inner, off = start * sp.inner;
  std::vector<double> out(sp.outer * w);
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(o * row + off), w,
                out.begin() + static_cast<std::ptrdiff_t>(o * w));
  return detail::make_result("split", std::move(os), std::move(out), {x}, [w, row, off, outer = sp.outer](TensorImpl& o) {
    auto& in = detail::input(o, 0);
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t r = 0; r < outer; ++r)
      for (std::size_t j = 0; j < w; ++j) g[r * row + off + j] += o.grad[r * w + j];
  });
}

inline std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& sizes) {
  std::vector<Tensor> parts;
  std::size_t start = 0;
  for (auto s : sizes) {
    parts.push_back(slice(x, axis, start, s));
    start += s;
  }
  if (start != x.shape().at(axis))
    throw ShapeError("split: sizes sum to " + std::to_string(start) + " but axis has extent " +
                     std::to_string(x.shape().at(axis)));
  return parts;
}

/// Selects rows (entries along axis 0) by index; repeated indices accumulate
/// gradient.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  if (rows.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t w = x.size() / x.dim(0);
  for (auto r : rows)
    if (r >= x.dim(0))
      throw ShapeError("gather_rows: index " + std::to_string(r) + " out of range for shape " + to_string(x.shape()));
  Shape os = x.shape();
  os[0] = rows.size();
  std::vector<double> out(rows.size() * w);
  const auto xd = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(rows[i] * w), w, out.begin() + static_cast<std::ptrdiff_t>(i * w));
  return detail::make_result("gather_rows", std::move(os), std::move(out), {x}, [rows, w](TensorImpl& o) {
    auto& in = detail::input(o, 0);
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < w; ++j) g[rows[i] * w + j] += o.grad[i * w + j];
  });
}

inline Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  detail::Broadcast bc("broadcast", x.shape(), shape);
  if (bc.out != shape) throw ShapeError(detail::shapes_msg("broadcast", x.shape(), shape));
  std::vector<double> out(bc.n);
  const auto xd = x.data();
  bc.for_each([&](std::size_t i, std::size_t ia, std::size_t) { out[i] = xd[ia]; });
  return detail::make_result("broadcast", shape, std::move(out), {x}, [bc](TensorImpl& o) {
    auto& in = detail::input(o, 0);
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    bc.for_each([&](std::size_t i, std::size_t ia, std::size_t) { g[ia] += o.grad[i]; });
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false) {
  const auto sp = detail::split_axis("sum", x.shape(), axis);
  Shape os = x.shape();
  if (keepdim)
    os[axis] = 1;
  else
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  if (os.empty()) os = {1};
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l) {
      const double* src = xd.data() + (o * sp.len + l) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  return detail::make_result("sum", std::move(os), std::move(out), {x}, [sp](TensorImpl& o) {
    auto& in = detail::input(o, 0);
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t a = 0; a < sp.outer; ++a)
      for (std::size_t l = 0; l < sp.len; ++l) {
        double* dst = g.data() + (a * sp.len + l) * sp.inner;
        const double* src = o.grad.data() + a * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
  });
}

inline Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false) {
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(x.shape().at(axis)));
}

inline Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result("sum", {1}, {s}, {x}, [](TensorImpl& o) {
    auto& in = detail::input(o, 0);
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

inline Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.size())); }

// ---------------------------------------------------------------------------
// Normalizing primitives

/// Max-subtracted softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto sp = detail::split_axis("softmax", x.shape(), axis);
  std::vector<double> out(x.size());
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, xd[base + l * sp.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) z += (out[base + l * sp.inner] = std::exp(xd[base + l * sp.inner] - mx));
      for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] /= z;
    }
  return detail::make_result("softmax", x.shape(), std::move(out), {x}, [sp](TensorImpl& o) {
    auto& in = detail::input(o, 0);
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t a = 0; a < sp.outer; ++a)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = a * sp.len * sp.inner + i;
        double dot = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) dot += o.grad[base + l * sp.inner] * o.data[base + l * sp.inner];
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t j = base + l * sp.inner;
          g[j] += o.data[j] * (o.grad[j] - dot);
        }
      }
  });
}

/// Stable log-sum-exp along `axis`.
inline Tensor logsumexp(const Tensor& x, std::size_t axis, bool keepdim = false) {
  const auto sp = detail::split_axis("logsumexp", x.shape(), axis);
  Shape os = x.shape();
  if (keepdim)
    os[axis] = 1;
  else
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  if (os.empty()) os = {1};
  std::vector<double> out(sp.outer * sp.inner);
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, xd[base + l * sp.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) z += std::exp(xd[base + l * sp.inner] - mx);
      out[o * sp.inner + i] = mx + std::log(z);
    }
  return detail::make_result("logsumexp", std::move(os), std::move(out), {x}, [sp](TensorImpl& o) {
    auto& in = detail::input(o, 0);
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t a = 0; a < sp.outer; ++a)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = a * sp.len * sp.inner + i;
        const double lse = o.data[a * sp.inner + i];
        const double go = o.grad[a * sp.inner + i];
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t j = base + l * sp.inner;
          g[j] += go * std::exp(in.data[j] - lse);
        }
      }
  });
}

inline Tensor log_softmax(const Tensor& x, std::size_t axis) { return sub(x, logsumexp(x, axis, true)); }

/// Layer normalization over the last axis with affine `gamma`, `beta` (both
/// shaped [d]).
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d)
    throw ShapeError(detail::shapes_msg("layer_norm", x.shape(), gamma.shape()));
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size()), xhat(x.size()), rstd(rows);
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gd[j] + bd[j];
    }
  }
  return detail::make_result(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](TensorImpl& o) {
        auto& in = detail::input(o, 0);
        auto& ga = detail::input(o, 1);
        auto& be = detail::input(o, 2);
        if (ga.requires_grad) {
          auto& g = ga.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[r * d + j] * xhat[r * d + j];
        }
        if (be.requires_grad) {
          auto& g = be.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[r * d + j];
        }
        if (in.requires_grad) {
          auto& g = in.grad_buffer();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dy = o.grad[r * d + j] * ga.data[j];
              s1 += dy;
              s2 += dy * xhat[r * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double dy = o.grad[r * d + j] * ga.data[j];
              g[r * d + j] += rstd[r] * (dy - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
            }
          }
        }
      });
}

}  // namespace gcv
