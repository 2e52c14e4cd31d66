#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "transgop/dual.hpp"
#include "transgop/kernels.hpp"
#include "transgop/tensor.hpp"

// Differentiable operations. Each op computes its result eagerly and, when any
// input requires a gradient, records a closure on the tape that accumulates
// input gradients from the output gradient.

namespace transgop {

namespace detail {

template <class T>
bool any_grad(std::initializer_list<const Tensor<T>*> ts) {
  for (auto* t : ts)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <class T>
void require_rank(const Tensor<T>& a, std::size_t r, const char* op) {
  if (a.rank() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(Tape<T>& tape, Tensor<T> a, Tensor<T> b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  Tensor<T> r(a.shape(), std::move(out), detail::any_grad<T>({&a, &b}));
  if (r.requires_grad())
    tape.record([a, b, r]() mutable {
      auto g = r.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  return r;
}

template <class T>
Tensor<T> sub(Tape<T>& tape, Tensor<T> a, Tensor<T> b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  Tensor<T> r(a.shape(), std::move(out), detail::any_grad<T>({&a, &b}));
  if (r.requires_grad())
    tape.record([a, b, r]() mutable {
      auto g = r.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  return r;
}

template <class T>
Tensor<T> mul(Tape<T>& tape, Tensor<T> a, Tensor<T> b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  Tensor<T> r(a.shape(), std::move(out), detail::any_grad<T>({&a, &b}));
  if (r.requires_grad())
    tape.record([a, b, r]() mutable {
      auto g = r.grad();
      auto ad = a.data(), bd = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
      }
    });
  return r;
}

/// Elementwise a / b.
template <class T>
Tensor<T> div(Tape<T>& tape, Tensor<T> a, Tensor<T> b) {
  detail::require_same_shape(a, b, "div");
  std::vector<T> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] / bd[i];
  Tensor<T> r(a.shape(), std::move(out), detail::any_grad<T>({&a, &b}));
  if (r.requires_grad())
    tape.record([a, b, r]() mutable {
      auto g = r.grad();
      auto ad = a.data(), bd = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bd[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
      }
    });
  return r;
}

/// a * s + offset
template <class T>
Tensor<T> affine_scalar(Tape<T>& tape, Tensor<T> a, T s, T offset = T(0)) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * s + offset;
  Tensor<T> r(a.shape(), std::move(out), a.requires_grad());
  if (r.requires_grad())
    tape.record([a, r, s]() mutable {
      auto g = r.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  return r;
}

template <class T>
Tensor<T> scale(Tape<T>& tape, Tensor<T> a, T s) {
  return affine_scalar(tape, std::move(a), s, T(0));
}

template <class T>
Tensor<T> relu(Tape<T>& tape, Tensor<T> a) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] > T(0) ? ad[i] : T(0);
  Tensor<T> r(a.shape(), std::move(out), a.requires_grad());
  if (r.requires_grad())
    tape.record([a, r]() mutable {
      auto g = r.grad();
      auto ga = a.grad();
      auto ad = a.data();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (ad[i] > T(0)) ga[i] += g[i];
    });
  return r;
}

template <class T>
Tensor<T> sigmoid(Tape<T>& tape, Tensor<T> a) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-ad[i]));
  Tensor<T> r(a.shape(), std::move(out), a.requires_grad());
  if (r.requires_grad())
    tape.record([a, r]() mutable {
      auto g = r.grad();
      auto ga = a.grad();
      auto y = r.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  return r;
}

template <class T>
Tensor<T> abs(Tape<T>& tape, Tensor<T> a) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(ad[i]);
  Tensor<T> r(a.shape(), std::move(out), a.requires_grad());
  if (r.requires_grad())
    tape.record([a, r]() mutable {
      auto g = r.grad();
      auto ga = a.grad();
      auto ad = a.data();
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[i] += ad[i] > T(0) ? g[i] : (ad[i] < T(0) ? -g[i] : T(0));
    });
  return r;
}

// ---------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(Tape<T>& tape, Tensor<T> a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  Tensor<T> r = Tensor<T>::scalar(s, a.requires_grad());
  if (r.requires_grad())
    tape.record([a, r]() mutable {
      const T g = r.grad()[0];
      for (auto& v : a.grad()) v += g;
    });
  return r;
}

template <class T>
Tensor<T> mean(Tape<T>& tape, Tensor<T> a) {
  return scale(tape, sum(tape, a), T(1) / static_cast<T>(a.numel()));
}

/// Sum of weights[i] * a[i] for a constant weight vector; a scalar.
template <class T>
Tensor<T> weighted_sum(Tape<T>& tape, Tensor<T> a, std::vector<T> weights) {
  if (weights.size() != a.numel())
    throw ShapeError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                     shape_str(a.shape()));
  T s = T(0);
  auto ad = a.data();
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * ad[i];
  Tensor<T> r = Tensor<T>::scalar(s, a.requires_grad());
  if (r.requires_grad())
    tape.record([a, r, w = std::move(weights)]() mutable {
      const T g = r.grad()[0];
      auto ga = a.grad();
      for (std::size_t i = 0; i < w.size(); ++i) ga[i] += g * w[i];
    });
  return r;
}

// ------------------------------------------------------------------- shaping

/// Copying reshape; element order is unchanged.
template <class T>
Tensor<T> reshape(Tape<T>& tape, Tensor<T> a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor<T> r(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()),
              a.requires_grad());
  if (r.requires_grad())
    tape.record([a, r]() mutable {
      auto g = r.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  return r;
}

template <class T>
Tensor<T> transpose(Tape<T>& tape, Tensor<T> a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(a.numel());
  kernels::transpose(m, n, a.data().data(), out.data());
  Tensor<T> r({n, m}, std::move(out), a.requires_grad());
  if (r.requires_grad())
    tape.record([a, r, m, n]() mutable {
      auto g = r.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  return r;
}

/// Concatenation along the leading axis; trailing dims must agree.
template <class T>
Tensor<T> concat(Tape<T>& tape, std::vector<Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t lead = 0;
  bool rg = false;
  std::vector<T> out;
  for (auto& p : parts) {
    Shape pt(p.shape().begin() + 1, p.shape().end());
    if (pt != tail)
      throw ShapeError("concat: trailing shape " + shape_str(p.shape()) + " vs " +
                       shape_str(parts[0].shape()));
    lead += p.dim(0);
    rg = rg || p.requires_grad();
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  Tensor<T> r(std::move(shape), std::move(out), rg);
  if (r.requires_grad())
    tape.record([parts, r]() mutable {
      auto g = r.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
        }
        off += p.numel();
      }
    });
  return r;
}

/// Selects rows of a 2-D tensor.
template <class T>
Tensor<T> index_rows(Tape<T>& tape, Tensor<T> a, std::vector<std::size_t> rows) {
  detail::require_rank(a, 2, "index_rows");
  if (rows.empty()) throw ShapeError("index_rows: empty selection");
  const std::size_t n = a.dim(1);
  std::vector<T> out;
  out.reserve(rows.size() * n);
  for (auto i : rows) {
    if (i >= a.dim(0)) throw ShapeError("index_rows: row out of range");
    out.insert(out.end(), a.data().begin() + i * n, a.data().begin() + (i + 1) * n);
  }
  Tensor<T> r({rows.size(), n}, std::move(out), a.requires_grad());
  if (r.requires_grad())
    tape.record([a, r, rows = std::move(rows), n]() mutable {
      auto g = r.grad();
      auto ga = a.grad();
      for (std::size_t k = 0; k < rows.size(); ++k)
        for (std::size_t j = 0; j < n; ++j) ga[rows[k] * n + j] += g[k * n + j];
    });
  return r;
}

// ------------------------------------------------------------- linear algebra

template <class T>
Tensor<T> matmul(Tape<T>& tape, Tensor<T> a, Tensor<T> b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data(), false);
  Tensor<T> r({m, n}, std::move(out), detail::any_grad<T>({&a, &b}));
  if (r.requires_grad())
    tape.record([a, b, r, m, n, k]() mutable {
      auto g = r.grad();
      if (a.requires_grad())  // dA = dC * B^T
        kernels::gemm_nt(m, k, n, g.data(), b.data().data(), a.grad().data(), true);
      if (b.requires_grad())  // dB = A^T * dC
        kernels::gemm_tn(k, n, m, a.data().data(), g.data(), b.grad().data(), true);
    });
  return r;
}

/// x[N x Din] * W[Din x Dout] + bias[Dout]. bias may be undefined.
template <class T>
Tensor<T> linear(Tape<T>& tape, Tensor<T> x, Tensor<T> w, Tensor<T> bias = {}) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0))
    throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (bias.defined() && (bias.numel() != n))
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " for output width " +
                     std::to_string(n));
  std::vector<T> out(m * n);
  if (bias.defined())
    for (std::size_t i = 0; i < m; ++i)
      std::copy(bias.data().begin(), bias.data().end(), out.begin() + i * n);
  kernels::gemm_nn(m, n, k, x.data().data(), w.data().data(), out.data(), bias.defined());
  Tensor<T> r({m, n}, std::move(out), detail::any_grad<T>({&x, &w, &bias}));
  if (r.requires_grad())
    tape.record([x, w, bias, r, m, n, k]() mutable {
      auto g = r.grad();
      if (x.requires_grad())
        kernels::gemm_nt(m, k, n, g.data(), w.data().data(), x.grad().data(), true);
      if (w.requires_grad())
        kernels::gemm_tn(k, n, m, x.data().data(), g.data(), w.grad().data(), true);
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    });
  return r;
}

// ------------------------------------------------------------ normalization

/// Numerically stable softmax along `axis`.
template <class T>
Tensor<T> softmax(Tape<T>& tape, Tensor<T> x, std::size_t axis) {
  if (axis >= x.rank())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xd[base + j * inner]);
      T s = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        T e = std::exp(xd[base + j * inner] - mx);
        out[base + j * inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= s;
    }
  Tensor<T> r(x.shape(), std::move(out), x.requires_grad());
  if (r.requires_grad())
    tape.record([x, r, outer, inner, n]() mutable {
      auto g = r.grad();
      auto y = r.data();
      auto gx = x.grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          T dot = T(0);
          for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
    });
  return r;
}

/// Per-row normalization over the last dimension, then gain/bias.
template <class T>
Tensor<T> layer_norm(Tape<T>& tape, Tensor<T> x, Tensor<T> gain, Tensor<T> bias, T eps) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " for last dim " + std::to_string(d));
  if (eps < T(0)) throw ContractError("layer_norm: eps must be non-negative");
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel()), xhat(x.numel()), rstd(rows);
  auto xd = x.data();
  auto gd = gain.data(), bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * rs;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  Tensor<T> r(x.shape(), std::move(out), detail::any_grad<T>({&x, &gain, &bias}));
  if (r.requires_grad())
    tape.record([x, gain, bias, r, xhat = std::move(xhat), rstd = std::move(rstd), rows,
                 d]() mutable {
      auto g = r.grad();
      auto gd = gain.data();
      if (gain.requires_grad() || bias.requires_grad()) {
        auto gg = gain.requires_grad() ? gain.grad() : std::span<T>{};
        auto gb = bias.requires_grad() ? bias.grad() : std::span<T>{};
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < d; ++j) {
            if (!gg.empty()) gg[j] += g[i * d + j] * xhat[i * d + j];
            if (!gb.empty()) gb[j] += g[i * d + j];
          }
      }
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t i = 0; i < rows; ++i) {
          T m1 = T(0), m2 = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = g[i * d + j] * gd[j];
            m1 += dh;
            m2 += dh * xhat[i * d + j];
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = g[i * d + j] * gd[j];
            gx[i * d + j] += rstd[i] * (dh - m1 - xhat[i * d + j] * m2);
          }
        }
      }
    });
  return r;
}

// ------------------------------------------------------------------- spatial

/// Direct cross-correlation of x[C_in x H x W] with kernels[C_out x C_in x k x k].
template <class T>
Tensor<T> conv2d(Tape<T>& tape, Tensor<T> x, Tensor<T> kernels_, Tensor<T> bias,
                 std::size_t stride, std::size_t pad) {
  detail::require_rank(x, 3, "conv2d input");
  detail::require_rank(kernels_, 4, "conv2d kernels");
  const std::size_t c_out = kernels_.dim(0), k = kernels_.dim(2);
  if (kernels_.dim(1) != x.dim(0) || kernels_.dim(3) != k)
    throw ShapeError("conv2d: kernels " + shape_str(kernels_.shape()) + " vs input " +
                     shape_str(x.shape()));
  if (stride == 0) throw ContractError("conv2d: stride must be >= 1");
  const std::size_t hp = x.dim(1) + 2 * pad, wp = x.dim(2) + 2 * pad;
  if (k > hp || k > wp)
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                     shape_str(x.shape()));
  if (bias.defined() && bias.numel() != c_out)
    throw ShapeError("conv2d: bias size mismatch");
  kernels::ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), k, stride, pad,
                            (hp - k) / stride + 1, (wp - k) / stride + 1};
  const std::size_t patch = geo.patch(), npos = geo.positions();
  std::vector<T> cols(patch * npos);
  kernels::im2col(geo, x.data().data(), cols.data());
  std::vector<T> out(c_out * npos);
  if (bias.defined())
    for (std::size_t c = 0; c < c_out; ++c)
      std::fill(out.begin() + c * npos, out.begin() + (c + 1) * npos, bias.data()[c]);
  kernels::gemm_nn(c_out, npos, patch, kernels_.data().data(), cols.data(), out.data(),
                   bias.defined());
  Tensor<T> r({c_out, geo.h_out, geo.w_out}, std::move(out),
              detail::any_grad<T>({&x, &kernels_, &bias}));
  if (r.requires_grad())
    tape.record([x, kernels_, bias, r, geo, cols = std::move(cols), c_out]() mutable {
      auto g = r.grad();
      const std::size_t patch = geo.patch(), npos = geo.positions();
      if (kernels_.requires_grad())
        kernels::gemm_nt(c_out, patch, npos, g.data(), cols.data(), kernels_.grad().data(), true);
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t c = 0; c < c_out; ++c)
          for (std::size_t p = 0; p < npos; ++p) gb[c] += g[c * npos + p];
      }
      if (x.requires_grad()) {
        std::vector<T> dcols(patch * npos);
        kernels::gemm_tn(patch, npos, c_out, kernels_.data().data(), g.data(), dcols.data(),
                         false);
        kernels::col2im(geo, dcols.data(), x.grad().data());
      }
    });
  return r;
}

/// Bilinear resampling of x[C x H x W] to [C x out_h x out_w] using
/// half-pixel centers (align_corners = false).
template <class T>
Tensor<T> resize_bilinear(Tape<T>& tape, Tensor<T> x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(x, 3, "resize_bilinear");
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear: zero output size");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  struct Tap {
    std::size_t i0, i1;
    T w0, w1;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const T s = static_cast<T>(in) / static_cast<T>(out);
    for (std::size_t o = 0; o < out; ++o) {
      T src = (static_cast<T>(o) + T(0.5)) * s - T(0.5);
      if (src < T(0)) src = T(0);
      std::size_t i0 = static_cast<std::size_t>(src);
      if (i0 >= in - 1) {
        t[o] = {in - 1, in - 1, T(1), T(0)};
        continue;
      }
      const T f = src - static_cast<T>(i0);
      t[o] = {i0, i0 + 1, T(1) - f, f};
    }
    return t;
  };
  auto ty = taps(h, out_h), tx = taps(w, out_w);
  std::vector<T> out(c * out_h * out_w);
  auto xd = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* src = xd.data() + ch * h * w;
    T* dst = out.data() + ch * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[ox];
        dst[oy * out_w + ox] = a.w0 * (b.w0 * src[a.i0 * w + b.i0] + b.w1 * src[a.i0 * w + b.i1]) +
                               a.w1 * (b.w0 * src[a.i1 * w + b.i0] + b.w1 * src[a.i1 * w + b.i1]);
      }
    }
  }
  Tensor<T> r({c, out_h, out_w}, std::move(out), x.requires_grad());
  if (r.requires_grad())
    tape.record([x, r, ty = std::move(ty), tx = std::move(tx), c, h, w, out_h, out_w]() mutable {
      auto g = r.grad();
      auto gx = x.grad();
      for (std::size_t ch = 0; ch < c; ++ch) {
        T* dst = gx.data() + ch * h * w;
        const T* src = g.data() + ch * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto& a = ty[oy];
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto& b = tx[ox];
            const T v = src[oy * out_w + ox];
            dst[a.i0 * w + b.i0] += v * a.w0 * b.w0;
            dst[a.i0 * w + b.i1] += v * a.w0 * b.w1;
            dst[a.i1 * w + b.i0] += v * a.w1 * b.w0;
            dst[a.i1 * w + b.i1] += v * a.w1 * b.w1;
          }
        }
      }
    });
  return r;
}

/// x[C x H x W] -> [C], mean over spatial positions.
template <class T>
Tensor<T> global_avg_pool(Tape<T>& tape, Tensor<T> x) {
  detail::require_rank(x, 3, "global_avg_pool");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<T> out(c, T(0));
  auto xd = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    T s = T(0);
    for (std::size_t p = 0; p < hw; ++p) s += xd[ch * hw + p];
    out[ch] = s / static_cast<T>(hw);
  }
  Tensor<T> r({c}, std::move(out), x.requires_grad());
  if (r.requires_grad())
    tape.record([x, r, c, hw]() mutable {
      auto g = r.grad();
      auto gx = x.grad();
      const T inv = T(1) / static_cast<T>(hw);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) gx[ch * hw + p] += g[ch] * inv;
    });
  return r;
}

/// out[c, p] = x[c, p] * weights[p] for x[C x H x W] and weights of H*W elements.
template <class T>
Tensor<T> scale_spatial(Tape<T>& tape, Tensor<T> x, Tensor<T> weights) {
  detail::require_rank(x, 3, "scale_spatial");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (weights.numel() != hw)
    throw ShapeError("scale_spatial: weights " + shape_str(weights.shape()) + " for " +
                     shape_str(x.shape()));
  std::vector<T> out(x.numel());
  auto xd = x.data(), wd = weights.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) out[ch * hw + p] = xd[ch * hw + p] * wd[p];
  Tensor<T> r(x.shape(), std::move(out), detail::any_grad<T>({&x, &weights}));
  if (r.requires_grad())
    tape.record([x, weights, r, c, hw]() mutable {
      auto g = r.grad();
      auto xd = x.data(), wd = weights.data();
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < hw; ++p) gx[ch * hw + p] += g[ch * hw + p] * wd[p];
      }
      if (weights.requires_grad()) {
        auto gw = weights.grad();
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < hw; ++p) gw[p] += g[ch * hw + p] * xd[ch * hw + p];
      }
    });
  return r;
}

// --------------------------------------------------------------------- losses

/// Sigmoid focal loss summed over all elements of logits against constant
/// {0,1} targets: -alpha_t (1 - p_t)^gamma log(p_t).
template <class T>
Tensor<T> sigmoid_focal_loss(Tape<T>& tape, Tensor<T> logits, std::vector<T> targets, T alpha,
                             T gamma) {
  if (targets.size() != logits.numel())
    throw ShapeError("focal_loss: target count does not match " + shape_str(logits.shape()));
  if (!(alpha > T(0) && alpha < T(1))) throw ContractError("focal_loss: alpha must be in (0,1)");
  if (gamma < T(0)) throw ContractError("focal_loss: gamma must be >= 0");
  const std::size_t n = logits.numel();
  auto z = logits.data();
  T total = T(0);
  std::vector<T> dz(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = z[i], t = targets[i];
    const T p = T(1) / (T(1) + std::exp(-x));
    // log(sigmoid(x)) and log(1 - sigmoid(x)) without cancellation
    const T log_p = x >= T(0) ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
    const T log_1mp = log_p - x;
    const T pt = t * p + (T(1) - t) * (T(1) - p);
    const T log_pt = t * log_p + (T(1) - t) * log_1mp;
    const T at = t * alpha + (T(1) - t) * (T(1) - alpha);
    const T one_m = T(1) - pt;
    const T mod = gamma == T(0) ? T(1) : std::pow(one_m, gamma);
    total += -at * mod * log_pt;
    // d/dx: dpt/dx = (2t-1) p (1-p); dlog_pt/dx = (2t-1)(1-pt)
    const T sgn = T(2) * t - T(1);
    const T dlog_pt = sgn * one_m;
    T dmod = T(0);
    if (gamma != T(0) && one_m > T(0))
      dmod = -gamma * std::pow(one_m, gamma - T(1)) * sgn * p * (T(1) - p);
    dz[i] = -at * (dmod * log_pt + mod * dlog_pt);
  }
  Tensor<T> r = Tensor<T>::scalar(total, logits.requires_grad());
  if (r.requires_grad())
    tape.record([logits, r, dz = std::move(dz)]() mutable {
      const T g = r.grad()[0];
      auto gl = logits.grad();
      for (std::size_t i = 0; i < dz.size(); ++i) gl[i] += g * dz[i];
    });
  return r;
}

/// Applies a scalar function to each row of x[N x W] (W fixed at compile time)
/// using forward-mode duals for the row Jacobian. Returns [N].
template <std::size_t W, class T, class Fn>
Tensor<T> map_rows(Tape<T>& tape, Tensor<T> x, Fn fn) {
  if (x.rank() != 2 || x.dim(1) != W)
    throw ShapeError("map_rows: expected [N x " + std::to_string(W) + "], got " +
                     shape_str(x.shape()));
  using D = Dual<T, W>;
  const std::size_t n = x.dim(0);
  std::vector<T> out(n), jac(n * W);
  auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::array<D, W> row;
    for (std::size_t j = 0; j < W; ++j) row[j] = D::variable(xd[i * W + j], j);
    D v = fn(row, i);
    out[i] = v.v;
    for (std::size_t j = 0; j < W; ++j) jac[i * W + j] = v.d[j];
  }
  Tensor<T> r({n}, std::move(out), x.requires_grad());
  if (r.requires_grad())
    tape.record([x, r, jac = std::move(jac), n]() mutable {
      auto g = r.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < W; ++j) gx[i * W + j] += g[i] * jac[i * W + j];
    });
  return r;
}

}  // namespace transgop
