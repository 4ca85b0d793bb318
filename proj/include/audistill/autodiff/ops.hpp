#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <cblas.h>

#include "audistill/autodiff/tensor.hpp"
#include "audistill/error.hpp"

// Differentiable primitives. Every backward rule is expressed through other
// primitives in this file, so gradients computed with graph recording on are
// differentiable again (needed to unroll SGD steps inside an outer loss).
// Linear operators come in adjoint pairs (conv2d / its two gradients,
// avg_pool2d / avg_unpool2d, slice / embed, ...).

namespace audistill::ad {

enum class Padding { same, valid };

template <class T> using TensorList = std::vector<BasicTensor<T>>;

// Declarations so that backward rules can reference each other.
template <class T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> neg(const BasicTensor<T>& a);
template <class T> BasicTensor<T> scale(const BasicTensor<T>& a, double c);
template <class T> BasicTensor<T> mul_scalar(const BasicTensor<T>& a, const BasicTensor<T>& s);
template <class T> BasicTensor<T> sum(const BasicTensor<T>& a);
template <class T> BasicTensor<T> expand_scalar(const BasicTensor<T>& s, const Shape& shape);
template <class T> BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);
template <class T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> transpose(const BasicTensor<T>& a);
template <class T> BasicTensor<T> exp(const BasicTensor<T>& a);
template <class T> BasicTensor<T> row_sum(const BasicTensor<T>& x);
template <class T> BasicTensor<T> expand_cols(const BasicTensor<T>& v, std::size_t cols);
template <class T> BasicTensor<T> broadcast_leading(const BasicTensor<T>& v, std::size_t n);
template <class T> BasicTensor<T> sum_leading(const BasicTensor<T>& x);
template <class T> BasicTensor<T> expand_channels(const BasicTensor<T>& b, const Shape& shape);
template <class T> BasicTensor<T> channel_sum(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> conv2d_raw(const BasicTensor<T>& x, const BasicTensor<T>& w, std::size_t stride,
                          std::size_t pad);
template <class T>
BasicTensor<T> conv2d_input_grad(const BasicTensor<T>& g, const BasicTensor<T>& w,
                                 const Shape& in_shape, std::size_t stride, std::size_t pad);
template <class T>
BasicTensor<T> conv2d_weight_grad(const BasicTensor<T>& x, const BasicTensor<T>& g,
                                  const Shape& w_shape, std::size_t stride, std::size_t pad);
template <class T> BasicTensor<T> avg_pool2d(const BasicTensor<T>& x, std::size_t k);
template <class T>
BasicTensor<T> avg_unpool2d(const BasicTensor<T>& g, std::size_t k, const Shape& in_shape);
template <class T> BasicTensor<T> spatial_mean(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> spatial_spread(const BasicTensor<T>& g, std::size_t h, std::size_t w);
template <class T> BasicTensor<T> slice(const BasicTensor<T>& v, std::size_t off, std::size_t len);
template <class T>
BasicTensor<T> embed(const BasicTensor<T>& v, std::size_t off, std::size_t total);
template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, const std::vector<std::size_t>& idx);
template <class T>
BasicTensor<T> scatter_rows(const BasicTensor<T>& g, const std::vector<std::size_t>& idx,
                            std::size_t n);

namespace detail {

template <class T>
void require_same_shape(const char* op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <class T>
void require_rank(const char* op, const BasicTensor<T>& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

template <class T, class F>
std::vector<T> map_unary(std::span<const T> a, F f) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class T, class F>
std::vector<T> map_binary(std::span<const T> a, std::span<const T> b, F f) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

/// Output positions o in [lo, hi) for which o*stride + k - pad lies in [0, n).
inline std::pair<std::size_t, std::size_t> conv_range(std::size_t out_n, std::size_t n,
                                                      std::size_t k, std::size_t stride,
                                                      std::size_t pad) {
  const long s = static_cast<long>(stride);
  const long off = static_cast<long>(k) - static_cast<long>(pad);
  long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long hi = (static_cast<long>(n) - 1 - off);
  hi = hi < 0 ? 0 : hi / s + 1;
  hi = std::min(hi, static_cast<long>(out_n));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, kh, kw, ho, wo, stride, pad;
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride,
                                  std::size_t pad) {
  if (x.size() != 4 || w.size() != 4) {
    throw ShapeError("conv2d expects rank-4 input and weight, got " + shape_str(x) + " and " +
                     shape_str(w));
  }
  if (x[1] != w[1]) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x) + ", weight " +
                     shape_str(w));
  }
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  if (x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3]) {
    throw ShapeError("conv2d kernel " + shape_str(w) + " larger than padded input " +
                     shape_str(x));
  }
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], 0, 0, stride, pad};
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

/// Row-major C = alpha * op(A) * op(B) + beta * C.
inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
                 const float* b, float beta, float* c) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, int(m), int(n),
              int(k), alpha, a, ta ? int(m) : int(k), b, tb ? int(k) : int(n), beta, c, int(n));
}
inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
                 const double* b, double beta, double* c) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, int(m), int(n),
              int(k), alpha, a, ta ? int(m) : int(k), b, tb ? int(k) : int(n), beta, c, int(n));
}

// cols[(ci*kh + ky)*kw + kx][oy*wo + ox] = x[ci][oy*s + ky - pad][ox*s + kx - pad], 0 outside
template <class T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const std::size_t plane = g.ho * g.wo;
  std::fill(cols, cols + g.cin * g.kh * g.kw * plane, T(0));
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const T* xin = x + ci * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      const auto [oy_lo, oy_hi] = conv_range(g.ho, g.h, ky, g.stride, g.pad);
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const auto [ox_lo, ox_hi] = conv_range(g.wo, g.w, kx, g.stride, g.pad);
        T* crow = cols + ((ci * g.kh + ky) * g.kw + kx) * plane;
        for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
          const T* xrow = xin + (oy * g.stride + ky - g.pad) * g.w + kx - g.pad;
          T* c = crow + oy * g.wo;
          for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) c[ox] = xrow[ox * g.stride];
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back onto the image.
template <class T>
void col2im(const ConvGeometry& g, const T* cols, T* x) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    T* xin = x + ci * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      const auto [oy_lo, oy_hi] = conv_range(g.ho, g.h, ky, g.stride, g.pad);
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const auto [ox_lo, ox_hi] = conv_range(g.wo, g.w, kx, g.stride, g.pad);
        const T* crow = cols + ((ci * g.kh + ky) * g.kw + kx) * plane;
        for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
          T* xrow = xin + (oy * g.stride + ky - g.pad) * g.w + kx - g.pad;
          const T* c = crow + oy * g.wo;
          for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) xrow[ox * g.stride] += c[ox];
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape("add", a, b);
  return record<T>(a.shape(), detail::map_binary<T>(a.data(), b.data(), std::plus<T>()), {a, b},
                   [](const BasicTensor<T>&, const BasicTensor<T>& g, const NeedMask&) {
                     return TensorList<T>{g, g};
                   },
                   "add");
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  return record<T>(a.shape(), detail::map_binary<T>(a.data(), b.data(), std::minus<T>()), {a, b},
                   [](const BasicTensor<T>&, const BasicTensor<T>& g, const NeedMask& needs) {
                     return TensorList<T>{g, needs[1] ? neg(g) : BasicTensor<T>{}};
                   },
                   "sub");
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  return record<T>(a.shape(), detail::map_binary<T>(a.data(), b.data(), std::multiplies<T>()),
                   {a, b},
                   [a, b](const BasicTensor<T>&, const BasicTensor<T>& g, const NeedMask& needs) {
                     return TensorList<T>{needs[0] ? mul(g, b) : BasicTensor<T>{},
                                          needs[1] ? mul(g, a) : BasicTensor<T>{}};
                   },
                   "mul");
}

template <class T>
BasicTensor<T> neg(const BasicTensor<T>& a) {
  return record<T>(a.shape(), detail::map_unary<T>(a.data(), [](T v) { return -v; }), {a},
                   [](const BasicTensor<T>&, const BasicTensor<T>& g, const NeedMask&) {
                     return TensorList<T>{neg(g)};
                   },
                   "neg");
}

/// Multiplication by a constant.
template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, double c) {
  return record<T>(a.shape(),
                   detail::map_unary<T>(a.data(), [c](T v) { return static_cast<T>(v * c); }),
                   {a},
                   [c](const BasicTensor<T>&, const BasicTensor<T>& g, const NeedMask&) {
                     return TensorList<T>{scale(g, c)};
                   },
                   "scale");
}

/// a * s where s holds a single value (a graph node, e.g. a learning rate).
template <class T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& a, const BasicTensor<T>& s) {
  if (s.numel() != 1) throw ShapeError("mul_scalar: scalar operand has shape " + shape_str(s.shape()));
  const T sv = s[0];
  return record<T>(
      a.shape(), detail::map_unary<T>(a.data(), [sv](T v) { return v * sv; }), {a, s},
      [a, s](const BasicTensor<T>&, const BasicTensor<T>& g, const NeedMask& needs) {
        return TensorList<T>{needs[0] ? mul_scalar(g, s) : BasicTensor<T>{},
                             needs[1] ? reshape(sum(mul(g, a)), s.shape()) : BasicTensor<T>{}};
      },
      "mul_scalar");
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  return record<T>(
      a.shape(), detail::map_unary<T>(a.data(), [](T v) { return v > T(0) ? v : T(0); }), {a},
      [a](const BasicTensor<T>&, const BasicTensor<T>& g, const NeedMask&) {
        // The mask is piecewise constant, so it enters as a constant.
        BasicTensor<T> mask(a.shape(),
                            detail::map_unary<T>(a.data(), [](T v) { return v > T(0) ? T(1) : T(0); }));
        return TensorList<T>{mul(g, mask)};
      },
      "relu");
}

template <class T>
BasicTensor<T> exp(const BasicTensor<T>& a) {
  return record<T>(a.shape(),
                   detail::map_unary<T>(a.data(), [](T v) { return static_cast<T>(std::exp(v)); }),
                   {a},
                   [](const BasicTensor<T>& out, const BasicTensor<T>& g, const NeedMask&) {
                     return TensorList<T>{mul(g, out)};
                   },
                   "exp");
}

/// Elementwise x^(-1/2).
template <class T>
BasicTensor<T> rsqrt(const BasicTensor<T>& a) {
  return record<T>(
      a.shape(),
      detail::map_unary<T>(a.data(), [](T v) { return static_cast<T>(1.0 / std::sqrt(v)); }),
      {a},
      [](const BasicTensor<T>& out, const BasicTensor<T>& g, const NeedMask&) {
        return TensorList<T>{scale(mul(g, mul(out, mul(out, out))), -0.5)};
      },
      "rsqrt");
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += v;
  return record<T>(Shape{}, {static_cast<T>(acc)}, {a},
                   [shape = a.shape()](const BasicTensor<T>&, const BasicTensor<T>& g,
                                       const NeedMask&) {
                     return TensorList<T>{expand_scalar(g, shape)};
                   },
                   "sum");
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

/// Fills `shape` with the single value of `s`.
template <class T>
BasicTensor<T> expand_scalar(const BasicTensor<T>& s, const Shape& shape) {
  if (s.numel() != 1) throw ShapeError("expand_scalar: operand has shape " + shape_str(s.shape()));
  return record<T>(shape, std::vector<T>(numel(shape), s[0]), {s},
                   [sshape = s.shape()](const BasicTensor<T>&, const BasicTensor<T>& g,
                                        const NeedMask&) {
                     return TensorList<T>{reshape(sum(g), sshape)};
                   },
                   "expand_scalar");
}

/// Sum of squares.
template <class T>
BasicTensor<T> sq_norm(const BasicTensor<T>& v) {
  double acc = 0.0;
  for (T x : v.data()) acc += static_cast<double>(x) * x;
  return record<T>(Shape{}, {static_cast<T>(acc)}, {v},
                   [v](const BasicTensor<T>&, const BasicTensor<T>& g, const NeedMask&) {
                     return TensorList<T>{mul_scalar(scale(v, 2.0), g)};
                   },
                   "sq_norm");
}

/// [B, K] -> [B]
template <class T>
BasicTensor<T> row_sum(const BasicTensor<T>& x) {
  detail::require_rank("row_sum", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += x[r * cols + c];
    out[r] = static_cast<T>(acc);
  }
  return record<T>(Shape{rows}, std::move(out), {x},
                   [cols](const BasicTensor<T>&, const BasicTensor<T>& g, const NeedMask&) {
                     return TensorList<T>{expand_cols(g, cols)};
                   },
                   "row_sum");
}

/// [B] -> [B, cols], repeating each value along the row.
template <class T>
BasicTensor<T> expand_cols(const BasicTensor<T>& v, std::size_t cols) {
  detail::require_rank("expand_cols", v, 1);
  const std::size_t rows = v.dim(0);
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) std::fill_n(out.begin() + r * cols, cols, v[r]);
  return record<T>(Shape{rows, cols}, std::move(out), {v},
                   [](const BasicTensor<T>&, const BasicTensor<T>& g, const NeedMask&) {
                     return TensorList<T>{row_sum(g)};
                   },
                   "expand_cols");
}

/// v (shape S) -> [n, S...], n copies along a new leading dimension.
template <class T>
BasicTensor<T> broadcast_leading(const BasicTensor<T>& v, std::size_t n) {
  Shape shape{n};
  shape.insert(shape.end(), v.shape().begin(), v.shape().end());
  std::vector<T> out;
  out.reserve(n * v.numel());
  for (std::size_t i = 0; i < n; ++i) out.insert(out.end(), v.data().begin(), v.data().end());
  return record<T>(std::move(shape), std::move(out), {v},
                   [](const BasicTensor<T>&, const BasicTensor<T>& g, const NeedMask&) {
                     return TensorList<T>{sum_leading(g)};
                   },
                   "broadcast_leading");
}

/// [n, S...] -> S, summing over the leading dimension.
template <class T>
BasicTensor<T> sum_leading(const BasicTensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("sum_leading on a scalar");
  const std::size_t n = x.dim(0);
  Shape rest(x.shape().begin() + 1, x.shape().end());
  const std::size_t inner = numel(rest);
  std::vector<T> out(inner, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < inner; ++j) out[j] += x[i * inner + j];
  }
  return record<T>(std::move(rest), std::move(out), {x},
                   [n](const BasicTensor<T>&, const BasicTensor<T>& g, const NeedMask&) {
                     return TensorList<T>{broadcast_leading(g, n)};
                   },
                   "sum_leading");
}

/// b [C] -> shape [B, C, H, W] with b[c] on every position of channel c.
template <class T>
BasicTensor<T> expand_channels(const BasicTensor<T>& b, const Shape& shape) {
  detail::require_rank("expand_channels", b, 1);
  if (shape.size() != 4 || shape[1] != b.dim(0)) {
    throw ShapeError("expand_channels: bias " + shape_str(b.shape()) + " vs target " +
                     shape_str(shape));
  }
  const std::size_t plane = shape[2] * shape[3];
  std::vector<T> out(numel(shape));
  for (std::size_t n = 0; n < shape[0]; ++n) {
    for (std::size_t c = 0; c < shape[1]; ++c) {
      std::fill_n(out.begin() + (n * shape[1] + c) * plane, plane, b[c]);
    }
  }
  return record<T>(shape, std::move(out), {b},
                   [](const BasicTensor<T>&, const BasicTensor<T>& g, const NeedMask&) {
                     return TensorList<T>{channel_sum(g)};
                   },
                   "expand_channels");
}

/// [B, C, H, W] -> [C]
template <class T>
BasicTensor<T> channel_sum(const BasicTensor<T>& x) {
  detail::require_rank("channel_sum", x, 4);
  const std::size_t plane = x.dim(2) * x.dim(3);
  std::vector<T> out(x.dim(1), T(0));
  for (std::size_t n = 0; n < x.dim(0); ++n) {
    for (std::size_t c = 0; c < x.dim(1); ++c) {
      double acc = 0.0;
      const T* p = x.data().data() + (n * x.dim(1) + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      out[c] += static_cast<T>(acc);
    }
  }
  return record<T>(Shape{x.dim(1)}, std::move(out), {x},
                   [shape = x.shape()](const BasicTensor<T>&, const BasicTensor<T>& g,
                                       const NeedMask&) {
                     return TensorList<T>{expand_channels(g, shape)};
                   },
                   "channel_sum");
}

// ---------------------------------------------------------------------------
// Shape manipulation and indexing

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return record<T>(std::move(shape), a.vec(), {a},
                   [old = a.shape()](const BasicTensor<T>&, const BasicTensor<T>& g,
                                     const NeedMask&) {
                     return TensorList<T>{reshape(g, old)};
                   },
                   "reshape");
}

/// [B, ...] -> [B, rest]
template <class T>
BasicTensor<T> flatten(const BasicTensor<T>& a) {
  if (a.rank() == 0) throw ShapeError("flatten on a scalar");
  return reshape(a, Shape{a.dim(0), a.numel() / std::max<std::size_t>(a.dim(0), 1)});
}

/// Contiguous range of a rank-1 tensor.
template <class T>
BasicTensor<T> slice(const BasicTensor<T>& v, std::size_t off, std::size_t len) {
  detail::require_rank("slice", v, 1);
  if (off + len > v.numel()) {
    throw ShapeError("slice [" + std::to_string(off) + ", " + std::to_string(off + len) +
                     ") out of range for " + shape_str(v.shape()));
  }
  std::vector<T> out(v.data().begin() + off, v.data().begin() + off + len);
  return record<T>(Shape{len}, std::move(out), {v},
                   [off, total = v.numel()](const BasicTensor<T>&, const BasicTensor<T>& g,
                                            const NeedMask&) {
                     return TensorList<T>{embed(g, off, total)};
                   },
                   "slice");
}

/// Zero vector of length `total` with `v` written at `off` (adjoint of slice).
template <class T>
BasicTensor<T> embed(const BasicTensor<T>& v, std::size_t off, std::size_t total) {
  detail::require_rank("embed", v, 1);
  if (off + v.numel() > total) throw ShapeError("embed: range exceeds target length");
  std::vector<T> out(total, T(0));
  std::copy(v.data().begin(), v.data().end(), out.begin() + off);
  return record<T>(Shape{total}, std::move(out), {v},
                   [off, len = v.numel()](const BasicTensor<T>&, const BasicTensor<T>& g,
                                          const NeedMask&) {
                     return TensorList<T>{slice(g, off, len)};
                   },
                   "embed");
}

/// Rows of the leading dimension, in `idx` order.
template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, const std::vector<std::size_t>& idx) {
  if (x.rank() == 0) throw ShapeError("gather_rows on a scalar");
  const std::size_t n = x.dim(0);
  const std::size_t inner = x.numel() / std::max<std::size_t>(n, 1);
  Shape shape = x.shape();
  shape[0] = idx.size();
  std::vector<T> out(idx.size() * inner);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) throw ShapeError("gather_rows index out of range");
    std::copy_n(x.data().begin() + idx[i] * inner, inner, out.begin() + i * inner);
  }
  return record<T>(std::move(shape), std::move(out), {x},
                   [idx, n](const BasicTensor<T>&, const BasicTensor<T>& g, const NeedMask&) {
                     return TensorList<T>{scatter_rows(g, idx, n)};
                   },
                   "gather_rows");
}

/// Adjoint of gather_rows: rows of g added into an n-row zero tensor.
template <class T>
BasicTensor<T> scatter_rows(const BasicTensor<T>& g, const std::vector<std::size_t>& idx,
                            std::size_t n) {
  if (g.rank() == 0 || g.dim(0) != idx.size()) throw ShapeError("scatter_rows: row count mismatch");
  const std::size_t inner = g.numel() / std::max<std::size_t>(idx.size(), 1);
  Shape shape = g.shape();
  shape[0] = n;
  std::vector<T> out(n * inner, T(0));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t j = 0; j < inner; ++j) out[idx[i] * inner + j] += g[i * inner + j];
  }
  return record<T>(std::move(shape), std::move(out), {g},
                   [idx](const BasicTensor<T>&, const BasicTensor<T>& gg, const NeedMask&) {
                     return TensorList<T>{gather_rows(gg, idx)};
                   },
                   "scatter_rows");
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return record<T>(Shape{m, n}, std::move(out), {a, b},
                   [a, b](const BasicTensor<T>&, const BasicTensor<T>& g, const NeedMask& needs) {
                     return TensorList<T>{
                         needs[0] ? matmul(g, transpose(b)) : BasicTensor<T>{},
                         needs[1] ? matmul(transpose(a), g) : BasicTensor<T>{}};
                   },
                   "matmul");
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  detail::require_rank("transpose", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  }
  return record<T>(Shape{c, r}, std::move(out), {a},
                   [](const BasicTensor<T>&, const BasicTensor<T>& g, const NeedMask&) {
                     return TensorList<T>{transpose(g)};
                   },
                   "transpose");
}

// ---------------------------------------------------------------------------
// Convolution family. conv2d_raw is cross-correlation with zero padding;
// its input and weight gradients are primitives too, and the three operators
// are bilinear adjoints of one another.

template <class T>
BasicTensor<T> conv2d_raw(const BasicTensor<T>& x, const BasicTensor<T>& w, std::size_t stride,
                          std::size_t pad) {
  const auto g = detail::conv_geometry(x.shape(), w.shape(), stride, pad);
  std::vector<T> out(g.batch * g.cout * g.ho * g.wo, T(0));
  const std::size_t plane = g.ho * g.wo, kdim = g.cin * g.kh * g.kw;
  std::vector<T> cols(kdim * plane);
  for (std::size_t b = 0; b < g.batch; ++b) {
    detail::im2col(g, x.data().data() + b * g.cin * g.h * g.w, cols.data());
    detail::gemm(false, false, g.cout, plane, kdim, T(1), w.data().data(), cols.data(), T(0),
                 out.data() + b * g.cout * plane);
  }
  return record<T>(Shape{g.batch, g.cout, g.ho, g.wo}, std::move(out), {x, w},
                   [x, w, stride, pad](const BasicTensor<T>&, const BasicTensor<T>& gout,
                                       const NeedMask& needs) {
                     return TensorList<T>{
                         needs[0] ? conv2d_input_grad(gout, w, x.shape(), stride, pad)
                                  : BasicTensor<T>{},
                         needs[1] ? conv2d_weight_grad(x, gout, w.shape(), stride, pad)
                                  : BasicTensor<T>{}};
                   },
                   "conv2d");
}

/// Gradient of conv2d with respect to its input (transposed convolution).
template <class T>
BasicTensor<T> conv2d_input_grad(const BasicTensor<T>& gout, const BasicTensor<T>& w,
                                 const Shape& in_shape, std::size_t stride, std::size_t pad) {
  const auto g = detail::conv_geometry(in_shape, w.shape(), stride, pad);
  if (gout.shape() != Shape{g.batch, g.cout, g.ho, g.wo}) {
    throw ShapeError("conv2d_input_grad: gradient shape " + shape_str(gout.shape()) +
                     " does not match output of " + shape_str(in_shape));
  }
  std::vector<T> out(numel(in_shape), T(0));
  const std::size_t plane = g.ho * g.wo, kdim = g.cin * g.kh * g.kw;
  std::vector<T> cols(kdim * plane);
  for (std::size_t b = 0; b < g.batch; ++b) {
    detail::gemm(true, false, kdim, plane, g.cout, T(1), w.data().data(),
                 gout.data().data() + b * g.cout * plane, T(0), cols.data());
    detail::col2im(g, cols.data(), out.data() + b * g.cin * g.h * g.w);
  }
  return record<T>(in_shape, std::move(out), {gout, w},
                   [gout, w, stride, pad, in_shape](const BasicTensor<T>&,
                                                    const BasicTensor<T>& gbar,
                                                    const NeedMask& needs) {
                     return TensorList<T>{
                         needs[0] ? conv2d_raw(gbar, w, stride, pad) : BasicTensor<T>{},
                         needs[1] ? conv2d_weight_grad(gbar, gout, w.shape(), stride, pad)
                                  : BasicTensor<T>{}};
                   },
                   "conv2d_input_grad");
}

/// Gradient of conv2d with respect to its weight.
template <class T>
BasicTensor<T> conv2d_weight_grad(const BasicTensor<T>& x, const BasicTensor<T>& gout,
                                  const Shape& w_shape, std::size_t stride, std::size_t pad) {
  const auto g = detail::conv_geometry(x.shape(), w_shape, stride, pad);
  if (gout.shape() != Shape{g.batch, g.cout, g.ho, g.wo}) {
    throw ShapeError("conv2d_weight_grad: gradient shape " + shape_str(gout.shape()) +
                     " does not match output of " + shape_str(x.shape()));
  }
  std::vector<T> out(numel(w_shape), T(0));
  const std::size_t plane = g.ho * g.wo, kdim = g.cin * g.kh * g.kw;
  std::vector<T> cols(kdim * plane);
  for (std::size_t b = 0; b < g.batch; ++b) {
    detail::im2col(g, x.data().data() + b * g.cin * g.h * g.w, cols.data());
    detail::gemm(false, true, g.cout, kdim, plane, T(1), gout.data().data() + b * g.cout * plane,
                 cols.data(), T(1), out.data());
  }
  return record<T>(w_shape, std::move(out), {x, gout},
                   [x, gout, stride, pad](const BasicTensor<T>&, const BasicTensor<T>& gbar,
                                          const NeedMask& needs) {
                     return TensorList<T>{
                         needs[0] ? conv2d_input_grad(gout, gbar, x.shape(), stride, pad)
                                  : BasicTensor<T>{},
                         needs[1] ? conv2d_raw(x, gbar, stride, pad) : BasicTensor<T>{}};
                   },
                   "conv2d_weight_grad");
}

/// Cross-correlation. `same` pads by (k-1)/2 on each side.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, std::size_t stride = 1,
                      Padding padding = Padding::same) {
  if (w.rank() != 4) throw ShapeError("conv2d weight must be rank 4, got " + shape_str(w.shape()));
  const std::size_t pad = padding == Padding::same ? (w.dim(2) - 1) / 2 : 0;
  if (padding == Padding::same && w.dim(2) != w.dim(3)) {
    throw ShapeError("same padding needs a square kernel, got " + shape_str(w.shape()));
  }
  return conv2d_raw(x, w, stride, pad);
}

// ---------------------------------------------------------------------------
// Pooling

/// Non-overlapping k x k average; trailing rows/cols that do not fill a
/// window are dropped.
template <class T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& x, std::size_t k) {
  detail::require_rank("avg_pool2d", x, 4);
  if (k == 0 || x.dim(2) < k || x.dim(3) < k) {
    throw ShapeError("avg_pool2d: window " + std::to_string(k) + " too large for " +
                     shape_str(x.shape()));
  }
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h / k, wo = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  std::vector<T> out(planes * ho * wo);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data().data() + p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dx = 0; dx < k; ++dx) acc += src[(oy * k + dy) * w + ox * k + dx];
        }
        out[(p * ho + oy) * wo + ox] = static_cast<T>(acc * inv);
      }
    }
  }
  return record<T>(Shape{x.dim(0), x.dim(1), ho, wo}, std::move(out), {x},
                   [k, shape = x.shape()](const BasicTensor<T>&, const BasicTensor<T>& g,
                                          const NeedMask&) {
                     return TensorList<T>{avg_unpool2d(g, k, shape)};
                   },
                   "avg_pool2d");
}

/// Adjoint of avg_pool2d: spreads each value over its window divided by k^2.
template <class T>
BasicTensor<T> avg_unpool2d(const BasicTensor<T>& g, std::size_t k, const Shape& in_shape) {
  detail::require_rank("avg_unpool2d", g, 4);
  const std::size_t h = in_shape.at(2), w = in_shape.at(3);
  const std::size_t ho = h / k, wo = w / k;
  if (g.shape() != Shape{in_shape[0], in_shape[1], ho, wo}) {
    throw ShapeError("avg_unpool2d: " + shape_str(g.shape()) + " is not the pooled shape of " +
                     shape_str(in_shape));
  }
  const std::size_t planes = in_shape[0] * in_shape[1];
  const T inv = static_cast<T>(1.0 / static_cast<double>(k * k));
  std::vector<T> out(numel(in_shape), T(0));
  for (std::size_t p = 0; p < planes; ++p) {
    T* dst = out.data() + p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const T v = g[(p * ho + oy) * wo + ox] * inv;
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dx = 0; dx < k; ++dx) dst[(oy * k + dy) * w + ox * k + dx] = v;
        }
      }
    }
  }
  return record<T>(in_shape, std::move(out), {g},
                   [k](const BasicTensor<T>&, const BasicTensor<T>& gbar, const NeedMask&) {
                     return TensorList<T>{avg_pool2d(gbar, k)};
                   },
                   "avg_unpool2d");
}

/// [B, C, H, W] -> [B, C] global average.
template <class T>
BasicTensor<T> spatial_mean(const BasicTensor<T>& x) {
  detail::require_rank("spatial_mean", x, 4);
  const std::size_t planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += x[p * hw + i];
    out[p] = static_cast<T>(acc / static_cast<double>(hw));
  }
  return record<T>(Shape{x.dim(0), x.dim(1)}, std::move(out), {x},
                   [h = x.dim(2), w = x.dim(3)](const BasicTensor<T>&, const BasicTensor<T>& g,
                                                const NeedMask&) {
                     return TensorList<T>{spatial_spread(g, h, w)};
                   },
                   "spatial_mean");
}

/// Adjoint of spatial_mean: [B, C] -> [B, C, h, w] filled with g / (h w).
template <class T>
BasicTensor<T> spatial_spread(const BasicTensor<T>& g, std::size_t h, std::size_t w) {
  detail::require_rank("spatial_spread", g, 2);
  const std::size_t planes = g.numel(), hw = h * w;
  const double inv = 1.0 / static_cast<double>(hw);
  std::vector<T> out(planes * hw);
  for (std::size_t p = 0; p < planes; ++p) {
    std::fill_n(out.begin() + p * hw, hw, static_cast<T>(g[p] * inv));
  }
  return record<T>(Shape{g.dim(0), g.dim(1), h, w}, std::move(out), {g},
                   [](const BasicTensor<T>&, const BasicTensor<T>& gbar, const NeedMask&) {
                     return TensorList<T>{spatial_mean(gbar)};
                   },
                   "spatial_spread");
}

// ---------------------------------------------------------------------------
// Classification losses

/// Row-wise log-softmax of [B, K] logits.
template <class T>
BasicTensor<T> log_softmax(const BasicTensor<T>& x) {
  detail::require_rank("log_softmax", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data().data() + r * cols;
    const T mx = *std::max_element(row, row + cols);
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += std::exp(static_cast<double>(row[c] - mx));
    const double lse = static_cast<double>(mx) + std::log(acc);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = static_cast<T>(row[c] - lse);
  }
  return record<T>(x.shape(), std::move(out), {x},
                   [cols](const BasicTensor<T>& out, const BasicTensor<T>& g, const NeedMask&) {
                     return TensorList<T>{sub(g, mul(exp(out), expand_cols(row_sum(g), cols)))};
                   },
                   "log_softmax");
}

/// Mean negative log-likelihood of integer labels under [B, K] log-probabilities.
template <class T>
BasicTensor<T> nll_loss(const BasicTensor<T>& logp, const std::vector<int>& labels) {
  detail::require_rank("nll_loss", logp, 2);
  const std::size_t rows = logp.dim(0), cols = logp.dim(1);
  if (labels.size() != rows) {
    throw ShapeError("nll_loss: " + std::to_string(labels.size()) + " labels for " +
                     shape_str(logp.shape()));
  }
  double acc = 0.0;
  std::vector<T> onehot(logp.numel(), T(0));
  const double inv = 1.0 / static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= cols) {
      throw ShapeError("nll_loss: label " + std::to_string(labels[r]) + " outside [0, " +
                       std::to_string(cols) + ")");
    }
    acc -= logp[r * cols + labels[r]];
    onehot[r * cols + labels[r]] = static_cast<T>(-inv);
  }
  BasicTensor<T> weights(logp.shape(), std::move(onehot));
  return record<T>(Shape{}, {static_cast<T>(acc * inv)}, {logp},
                   [weights](const BasicTensor<T>&, const BasicTensor<T>& g, const NeedMask&) {
                     return TensorList<T>{mul_scalar(weights, g)};
                   },
                   "nll_loss");
}

template <class T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const std::vector<int>& labels) {
  return nll_loss(log_softmax(logits), labels);
}

}  // namespace audistill::ad
