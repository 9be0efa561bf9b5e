#pragma once

// Differentiable operations over Tensor<T>. Dense kernels (matmul, linear,
// convolution) are backed by Eigen GEMM; everything else is plain loops.
// Image tensors use NHWC layout.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string>
#include <type_traits>
#include <vector>

#include "patchgame/tensor.hpp"

namespace patchgame {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using CMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
CMatMap<T> cmat(const T* p, std::size_t r, std::size_t c) {
  return CMatMap<T>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <class T>
MatMap<T> mat(T* p, std::size_t r, std::size_t c) {
  return MatMap<T>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t da = i + a.size() < n ? 1 : a[i + a.size() - n];
    const std::size_t db = i + b.size() < n ? 1 : b[i + b.size() - n];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` aligned to `out`, zero along broadcast dimensions.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = out.size() - 1 - k;
    st[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return st;
}

// Calls f(out_index, a_index, b_index) for every element of `out`.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t total = shape_numel(out);
  if (out.empty()) {
    f(0, 0, 0);
    return;
  }
  const std::size_t nd = out.size();
  const std::size_t inner = out[nd - 1];
  const std::size_t sai = sa[nd - 1], sbi = sb[nd - 1];
  std::vector<std::size_t> idx(nd, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t base = 0; base < total; base += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(base + j, ia + j * sai, ib + j * sbi);
    for (std::size_t d = nd - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <class T, class F, class D>
Tensor<T> unary(const char* name, const Tensor<T>& x, F f, D dfdx) {
  Buffer<T> y(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return record<T>(name, x.shape(), std::move(y), {x}, [dfdx](Node<T>& self) {
    T* gx = grad_of(self, 0);
    const auto& xv = self.inputs[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * dfdx(xv[i], self.value[i]);
  });
}

// Splits a shape around `axis` into (outer, extent, inner).
inline std::array<std::size_t, 3> split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with numpy-style broadcasting.

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) {
    Buffer<T> y(a.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
    return detail::record<T>("add", a.shape(), std::move(y), {a, b}, [](Node<T>& self) {
      for (std::size_t k = 0; k < 2; ++k)
        if (T* g = detail::grad_of(self, k))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
  }
  Shape out = detail::broadcast_shapes(a.shape(), b.shape(), "add");
  auto sa = detail::broadcast_strides(a.shape(), out);
  auto sb = detail::broadcast_strides(b.shape(), out);
  Buffer<T> y(shape_numel(out));
  const T* av = a.data().data();
  const T* bv = b.data().data();
  detail::for_each_broadcast(out, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    y[i] = av[ia] + bv[ib];
  });
  return detail::record<T>("add", out, std::move(y), {a, b}, [sa, sb](Node<T>& self) {
    T* ga = detail::grad_of(self, 0);
    T* gb = detail::grad_of(self, 1);
    const T* go = self.grad.data();
    detail::for_each_broadcast(self.shape, sa, sb,
                               [&](std::size_t i, std::size_t ia, std::size_t ib) {
                                 if (ga) ga[ia] += go[i];
                                 if (gb) gb[ib] += go[i];
                               });
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  Shape out = detail::broadcast_shapes(a.shape(), b.shape(), "mul");
  auto sa = detail::broadcast_strides(a.shape(), out);
  auto sb = detail::broadcast_strides(b.shape(), out);
  Buffer<T> y(shape_numel(out));
  const T* av = a.data().data();
  const T* bv = b.data().data();
  detail::for_each_broadcast(out, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    y[i] = av[ia] * bv[ib];
  });
  return detail::record<T>("mul", out, std::move(y), {a, b}, [sa, sb](Node<T>& self) {
    T* ga = detail::grad_of(self, 0);
    T* gb = detail::grad_of(self, 1);
    const T* av = self.inputs[0]->value.data();
    const T* bv = self.inputs[1]->value.data();
    const T* go = self.grad.data();
    detail::for_each_broadcast(self.shape, sa, sb,
                               [&](std::size_t i, std::size_t ia, std::size_t ib) {
                                 if (ga) ga[ia] += go[i] * bv[ib];
                                 if (gb) gb[ib] += go[i] * av[ia];
                               });
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, std::type_identity_t<T> s) {
  return detail::unary<T>("scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, std::type_identity_t<T> s) {
  return detail::unary<T>("add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, scale(b, T(-1)));
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities.

// Subgradient at 0 is 0.
template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

// Exact (erf) form.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return detail::unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

// Gradient passes only strictly inside [lo, hi].
template <class T>
Tensor<T> clamp(const Tensor<T>& x, std::type_identity_t<T> lo, std::type_identity_t<T> hi) {
  return detail::unary<T>(
      "clamp", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

// Forward returns `hard`; backward routes the incoming gradient unchanged to
// `soft`. The hard values carry no gradient of their own.
template <class T>
Tensor<T> straight_through(const Tensor<T>& hard, const Tensor<T>& soft) {
  if (hard.shape() != soft.shape())
    throw ShapeError("straight_through: shape mismatch " + shape_str(hard.shape()) + " vs " +
                     shape_str(soft.shape()));
  return detail::record<T>("straight_through", soft.shape(), hard.buffer(), {soft},
                           [](Node<T>& self) {
                             T* g = detail::grad_of(self, 0);
                             for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                           });
}

// ---------------------------------------------------------------------------
// Shape manipulation.

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  return detail::record<T>("reshape", std::move(shape), x.buffer(), {x}, [](Node<T>& self) {
    T* g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  const std::size_t nd = in.size();
  if (perm.size() != nd)
    throw ShapeError("permute: permutation rank " + std::to_string(perm.size()) + " for shape " +
                     shape_str(in));
  std::vector<std::size_t> in_strides(nd, 1);
  for (std::size_t d = nd; d-- > 1;) in_strides[d - 1] = in_strides[d] * in[d];
  Shape out(nd);
  std::vector<std::size_t> src_strides(nd);
  std::vector<bool> used(nd, false);
  for (std::size_t d = 0; d < nd; ++d) {
    if (perm[d] >= nd || used[perm[d]]) throw ShapeError("permute: invalid permutation");
    used[perm[d]] = true;
    out[d] = in[perm[d]];
    src_strides[d] = in_strides[perm[d]];
  }
  // index[i] = source offset of output element i
  auto index = std::make_shared<std::vector<std::size_t>>(x.numel());
  {
    std::vector<std::size_t> zero(nd, 0);
    detail::for_each_broadcast(out, src_strides, zero,
                               [&](std::size_t i, std::size_t s, std::size_t) { (*index)[i] = s; });
  }
  Buffer<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.data()[(*index)[i]];
  return detail::record<T>("permute", out, std::move(y), {x}, [index](Node<T>& self) {
    T* g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*index)[i]] += self.grad[i];
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.ndim() != 2) throw ShapeError("transpose: expected 2-D, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  Shape out = xs[0].shape();
  if (axis >= out.size()) throw ShapeError("concat: axis out of range for " + shape_str(out));
  out[axis] = 0;
  for (const auto& x : xs) {
    Shape s = x.shape();
    if (s.size() != out.size()) throw ShapeError("concat: rank mismatch " + shape_str(s));
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != xs[0].shape()[d])
        throw ShapeError("concat: shape mismatch " + shape_str(xs[0].shape()) + " vs " + shape_str(s));
    out[axis] += s[axis];
  }
  const auto [outer, total, inner] = detail::split_axis(out, axis, "concat");
  std::vector<std::size_t> offsets;
  Buffer<T> y(shape_numel(out));
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const std::size_t ext = x.shape()[axis];
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(x.data().data() + o * ext * inner, ext * inner,
                  y.data() + (o * total + off) * inner);
    off += ext;
  }
  return detail::record<T>("concat", out, std::move(y), xs,
                           [offsets, outer = outer, total = total, inner = inner](Node<T>& self) {
                             for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                               T* g = detail::grad_of(self, k);
                               if (!g) continue;
                               const std::size_t ext = self.inputs[k]->value.size() / (outer * inner);
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t j = 0; j < ext * inner; ++j)
                                   g[o * ext * inner + j] +=
                                       self.grad[(o * total + offsets[k]) * inner + j];
                             }
                           });
}

// Elements [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto [outer, ext, inner] = detail::split_axis(x.shape(), axis, "slice");
  if (begin >= end || end > ext)
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_str(x.shape()));
  Shape out = x.shape();
  out[axis] = end - begin;
  const std::size_t len = end - begin;
  Buffer<T> y(shape_numel(out));
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data().data() + (o * ext + begin) * inner, len * inner, y.data() + o * len * inner);
  return detail::record<T>("slice", out, std::move(y), {x},
                           [outer = outer, ext = ext, inner = inner, begin, len](Node<T>& self) {
                             T* g = detail::grad_of(self, 0);
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t j = 0; j < len * inner; ++j)
                                 g[(o * ext + begin) * inner + j] += self.grad[o * len * inner + j];
                           });
}

// Row gather from a 2-D table. Index -1 yields a zero row.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::ptrdiff_t>& idx) {
  if (table.ndim() != 2) throw ShapeError("gather_rows: expected 2-D table, got " + shape_str(table.shape()));
  const std::size_t rows = table.dim(0), d = table.dim(1);
  Buffer<T> y(idx.size() * d, T(0));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0) continue;
    if (static_cast<std::size_t>(idx[r]) >= rows)
      throw ShapeError("gather_rows: index " + std::to_string(idx[r]) + " out of range for " +
                       shape_str(table.shape()));
    std::copy_n(table.data().data() + idx[r] * d, d, y.data() + r * d);
  }
  return detail::record<T>("gather_rows", {idx.size(), d}, std::move(y), {table}, [idx, d](Node<T>& self) {
    T* g = detail::grad_of(self, 0);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0) continue;
      for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += self.grad[r * d + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions.

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return detail::record<T>("sum_all", {1}, {s}, {x}, [](Node<T>& self) {
    T* g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) g[i] += self.grad[0];
  });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// Reduces `axis`; the axis is dropped from the output shape.
template <class T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis) {
  const auto [outer, ext, inner] = detail::split_axis(x.shape(), axis, "sum");
  Shape out = x.shape();
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out.empty()) out = {1};
  Buffer<T> y(outer * inner, T(0));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < ext; ++e)
      for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] += x.data()[(o * ext + e) * inner + i];
  return detail::record<T>("sum", out, std::move(y), {x},
                           [outer = outer, ext = ext, inner = inner](Node<T>& self) {
                             T* g = detail::grad_of(self, 0);
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t e = 0; e < ext; ++e)
                                 for (std::size_t i = 0; i < inner; ++i)
                                   g[(o * ext + e) * inner + i] += self.grad[o * inner + i];
                           });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis) {
  return scale(sum(x, axis), T(1) / static_cast<T>(x.shape().at(axis)));
}

// ---------------------------------------------------------------------------
// Last-axis normalizations.

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.ndim() == 0) throw ShapeError("softmax: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Buffer<T> y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * n;
    T* yr = y.data() + r * n;
    const T m = *std::max_element(xr, xr + n);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (yr[j] = std::exp(xr[j] - m));
    for (std::size_t j = 0; j < n; ++j) yr[j] /= z;
  }
  return detail::record<T>("softmax", x.shape(), std::move(y), {x}, [n, rows](Node<T>& self) {
    T* g = detail::grad_of(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = self.value.data() + r * n;
      const T* gr = self.grad.data() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += yr[j] * (gr[j] - dot);
    }
  });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  if (x.ndim() == 0) throw ShapeError("log_softmax: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Buffer<T> y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * n;
    const T m = *std::max_element(xr, xr + n);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xr[j] - m);
    const T lse = m + std::log(z);
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = xr[j] - lse;
  }
  return detail::record<T>("log_softmax", x.shape(), std::move(y), {x}, [n, rows](Node<T>& self) {
    T* g = detail::grad_of(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = self.value.data() + r * n;
      const T* gr = self.grad.data() + r * n;
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) total += gr[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += gr[j] - std::exp(yr[j]) * total;
    }
  });
}

// Layer normalization over the last axis followed by the affine map
// gamma * xhat + beta. gamma and beta have the last-axis extent.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::type_identity_t<T> eps = T(1e-5)) {
  const std::size_t n = x.shape().back();
  if (gamma.numel() != n || beta.numel() != n)
    throw ShapeError("layer_norm: affine shapes " + shape_str(gamma.shape()) + ", " +
                     shape_str(beta.shape()) + " do not match " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / n;
  auto xhat = std::make_shared<Buffer<T>>(x.numel());
  auto rstd = std::make_shared<Buffer<T>>(rows);
  Buffer<T> y(x.numel());
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(n);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (xr[j] - mu) * rs;
      (*xhat)[r * n + j] = h;
      y[r * n + j] = gv[j] * h + bv[j];
    }
  }
  return detail::record<T>("layer_norm", x.shape(), std::move(y), {x, gamma, beta},
                           [n, rows, xhat, rstd](Node<T>& self) {
                             T* gx = detail::grad_of(self, 0);
                             T* gg = detail::grad_of(self, 1);
                             T* gb = detail::grad_of(self, 2);
                             const T* gam = self.inputs[1]->value.data();
                             Buffer<T> gh(n);
                             for (std::size_t r = 0; r < rows; ++r) {
                               const T* go = self.grad.data() + r * n;
                               const T* h = xhat->data() + r * n;
                               T mean_g = 0, mean_gh = 0;
                               for (std::size_t j = 0; j < n; ++j) {
                                 gh[j] = go[j] * gam[j];
                                 mean_g += gh[j];
                                 mean_gh += gh[j] * h[j];
                                 if (gg) gg[j] += go[j] * h[j];
                                 if (gb) gb[j] += go[j];
                               }
                               if (!gx) continue;
                               mean_g /= static_cast<T>(n);
                               mean_gh /= static_cast<T>(n);
                               for (std::size_t j = 0; j < n; ++j)
                                 gx[r * n + j] += (*rstd)[r] * (gh[j] - mean_g - h[j] * mean_gh);
                             }
                           });
}

// x / max(||x||, eps) along the last axis.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, std::type_identity_t<T> eps = T(1e-12)) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  auto norms = std::make_shared<Buffer<T>>(rows);
  Buffer<T> y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * n;
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += xr[j] * xr[j];
    const T nr = std::max(std::sqrt(s), eps);
    (*norms)[r] = nr;
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = xr[j] / nr;
  }
  return detail::record<T>("l2_normalize", x.shape(), std::move(y), {x},
                           [n, rows, norms, eps](Node<T>& self) {
                             T* g = detail::grad_of(self, 0);
                             for (std::size_t r = 0; r < rows; ++r) {
                               const T* yr = self.value.data() + r * n;
                               const T* gr = self.grad.data() + r * n;
                               const T nr = (*norms)[r];
                               if (nr <= eps) {
                                 for (std::size_t j = 0; j < n; ++j) g[r * n + j] += gr[j] / nr;
                                 continue;
                               }
                               T dot = 0;
                               for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
                               for (std::size_t j = 0; j < n; ++j) g[r * n + j] += (gr[j] - yr[j] * dot) / nr;
                             }
                           });
}

// ---------------------------------------------------------------------------
// Dense products.

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer<T> y(m * n);
  detail::mat(y.data(), m, n).noalias() =
      detail::cmat(a.data().data(), m, k) * detail::cmat(b.data().data(), k, n);
  return detail::record<T>("matmul", {m, n}, std::move(y), {a, b}, [m, k, n](Node<T>& self) {
    auto go = detail::cmat(self.grad.data(), m, n);
    if (T* ga = detail::grad_of(self, 0))
      detail::mat(ga, m, k).noalias() += go * detail::cmat(self.inputs[1]->value.data(), k, n).transpose();
    if (T* gb = detail::grad_of(self, 1))
      detail::mat(gb, k, n).noalias() += detail::cmat(self.inputs[0]->value.data(), m, k).transpose() * go;
  });
}

// Batched product [b,m,k] x [b,k,n] -> [b,m,n].
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw ShapeError("bmm: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Buffer<T> y(bs * m * n);
  for (std::size_t i = 0; i < bs; ++i)
    detail::mat(y.data() + i * m * n, m, n).noalias() =
        detail::cmat(a.data().data() + i * m * k, m, k) * detail::cmat(b.data().data() + i * k * n, k, n);
  return detail::record<T>("bmm", {bs, m, n}, std::move(y), {a, b}, [bs, m, k, n](Node<T>& self) {
    T* ga = detail::grad_of(self, 0);
    T* gb = detail::grad_of(self, 1);
    const T* av = self.inputs[0]->value.data();
    const T* bv = self.inputs[1]->value.data();
    for (std::size_t i = 0; i < bs; ++i) {
      auto go = detail::cmat(self.grad.data() + i * m * n, m, n);
      if (ga) detail::mat(ga + i * m * k, m, k).noalias() += go * detail::cmat(bv + i * k * n, k, n).transpose();
      if (gb) detail::mat(gb + i * k * n, k, n).noalias() += detail::cmat(av + i * m * k, m, k).transpose() * go;
    }
  });
}

// x[..., in] * W[in, out] + bias[out]. `bias` may be undefined.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (w.ndim() != 2 || x.shape().back() != w.dim(0) || (bias.defined() && bias.numel() != w.dim(1)))
    throw ShapeError("linear: shape mismatch " + shape_str(x.shape()) + " x " + shape_str(w.shape()) +
                     (bias.defined() ? " + " + shape_str(bias.shape()) : std::string()));
  const std::size_t in = w.dim(0), out = w.dim(1), rows = x.numel() / in;
  Shape oshape = x.shape();
  oshape.back() = out;
  Buffer<T> y(rows * out);
  auto ym = detail::mat(y.data(), rows, out);
  ym.noalias() = detail::cmat(x.data().data(), rows, in) * detail::cmat(w.data().data(), in, out);
  if (bias.defined())
    ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(),
                                                                          static_cast<Eigen::Index>(out));
  std::vector<Tensor<T>> inputs{x, w};
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return detail::record<T>("linear", oshape, std::move(y), inputs, [rows, in, out, has_bias](Node<T>& self) {
    auto go = detail::cmat(self.grad.data(), rows, out);
    if (T* gx = detail::grad_of(self, 0))
      detail::mat(gx, rows, in).noalias() += go * detail::cmat(self.inputs[1]->value.data(), in, out).transpose();
    if (T* gw = detail::grad_of(self, 1))
      detail::mat(gw, in, out).noalias() += detail::cmat(self.inputs[0]->value.data(), rows, in).transpose() * go;
    if (has_bias)
      if (T* gb = detail::grad_of(self, 2))
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb, static_cast<Eigen::Index>(out)) += go.colwise().sum();
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling, NHWC.

struct Conv2dGeometry {
  std::size_t batch, height, width, in_ch, kernel, stride, pad, out_h, out_w, out_ch;
};

// x[B,H,W,C] * w[k,k,C,O] + bias[O] -> [B,Ho,Wo,O], zero padding.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
  if (x.ndim() != 4 || w.ndim() != 4 || w.dim(0) != w.dim(1) || w.dim(2) != x.dim(3) ||
      (bias.defined() && bias.numel() != w.dim(3)) || stride == 0)
    throw ShapeError("conv2d: shape mismatch input " + shape_str(x.shape()) + " kernel " +
                     shape_str(w.shape()) + (bias.defined() ? " bias " + shape_str(bias.shape()) : std::string()));
  Conv2dGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), stride, pad, 0, 0, w.dim(3)};
  if (g.height + 2 * pad < g.kernel || g.width + 2 * pad < g.kernel)
    throw ShapeError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  g.out_h = (g.height + 2 * pad - g.kernel) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kernel) / stride + 1;
  const std::size_t rows = g.batch * g.out_h * g.out_w;
  const std::size_t cols = g.kernel * g.kernel * g.in_ch;

  auto patches = std::make_shared<Buffer<T>>(rows * cols, T(0));
  const T* xv = x.data().data();
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t oy = 0; oy < g.out_h; ++oy)
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        T* row = patches->data() + ((b * g.out_h + oy) * g.out_w + ox) * cols;
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t kx = 0; kx < g.kernel; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            std::copy_n(xv + ((b * g.height + iy) * g.width + ix) * g.in_ch, g.in_ch,
                        row + (ky * g.kernel + kx) * g.in_ch);
          }
        }
      }

  Buffer<T> y(rows * g.out_ch);
  auto ym = detail::mat(y.data(), rows, g.out_ch);
  ym.noalias() = detail::cmat(patches->data(), rows, cols) * detail::cmat(w.data().data(), cols, g.out_ch);
  if (bias.defined())
    ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(
        bias.data().data(), static_cast<Eigen::Index>(g.out_ch));

  std::vector<Tensor<T>> inputs{x, w};
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return detail::record<T>(
      "conv2d", {g.batch, g.out_h, g.out_w, g.out_ch}, std::move(y), inputs,
      [g, rows, cols, patches, has_bias](Node<T>& self) {
        auto go = detail::cmat(self.grad.data(), rows, g.out_ch);
        if (T* gw = detail::grad_of(self, 1))
          detail::mat(gw, cols, g.out_ch).noalias() += detail::cmat(patches->data(), rows, cols).transpose() * go;
        if (has_bias)
          if (T* gb = detail::grad_of(self, 2))
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb, static_cast<Eigen::Index>(g.out_ch)) +=
                go.colwise().sum();
        T* gx = detail::grad_of(self, 0);
        if (!gx) return;
        Buffer<T> dcols(rows * cols);
        detail::mat(dcols.data(), rows, cols).noalias() =
            go * detail::cmat(self.inputs[1]->value.data(), cols, g.out_ch).transpose();
        for (std::size_t b = 0; b < g.batch; ++b)
          for (std::size_t oy = 0; oy < g.out_h; ++oy)
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const T* row = dcols.data() + ((b * g.out_h + oy) * g.out_w + ox) * cols;
              for (std::size_t ky = 0; ky < g.kernel; ++ky) {
                const std::ptrdiff_t iy =
                    static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                  const std::ptrdiff_t ix =
                      static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
                  T* dst = gx + ((b * g.height + iy) * g.width + ix) * g.in_ch;
                  const T* src = row + (ky * g.kernel + kx) * g.in_ch;
                  for (std::size_t c = 0; c < g.in_ch; ++c) dst[c] += src[c];
                }
              }
            }
      });
}

// Non-overlapping average pooling with window = stride = factor.
template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t factor) {
  if (x.ndim() != 4 || factor == 0 || x.dim(1) % factor || x.dim(2) % factor)
    throw ShapeError("avg_pool2d: factor " + std::to_string(factor) + " does not tile " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const std::size_t Ho = H / factor, Wo = W / factor;
  const T inv = T(1) / static_cast<T>(factor * factor);
  Buffer<T> y(B * Ho * Wo * C, T(0));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t yy = 0; yy < H; ++yy)
      for (std::size_t xx = 0; xx < W; ++xx)
        for (std::size_t c = 0; c < C; ++c)
          y[((b * Ho + yy / factor) * Wo + xx / factor) * C + c] += inv * x.data()[((b * H + yy) * W + xx) * C + c];
  return detail::record<T>("avg_pool2d", {B, Ho, Wo, C}, std::move(y), {x},
                           [B, H, W, C, Ho, Wo, factor, inv](Node<T>& self) {
                             T* g = detail::grad_of(self, 0);
                             for (std::size_t b = 0; b < B; ++b)
                               for (std::size_t yy = 0; yy < H; ++yy)
                                 for (std::size_t xx = 0; xx < W; ++xx)
                                   for (std::size_t c = 0; c < C; ++c)
                                     g[((b * H + yy) * W + xx) * C + c] +=
                                         inv * self.grad[((b * Ho + yy / factor) * Wo + xx / factor) * C + c];
                           });
}

}  // namespace patchgame
