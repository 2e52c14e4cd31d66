#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "transgop/ops.hpp"

namespace transgop {

using Rng = std::mt19937_64;

/// Ordered registry of named trainable tensors. Registration order is the
/// checkpoint order.
template <class T>
class ParamSet {
 public:
  Tensor<T> add(const std::string& name, Shape shape, std::vector<T> values) {
    for (auto& [n, _] : items_)
      if (n == name) throw ConfigError("duplicate parameter name " + name);
    Tensor<T> t(std::move(shape), std::move(values), true);
    items_.emplace_back(name, t);
    return t;
  }
  Tensor<T> zeros(const std::string& name, Shape shape) {
    auto n = shape_numel(shape);
    return add(name, std::move(shape), std::vector<T>(n, T(0)));
  }
  Tensor<T> constant(const std::string& name, Shape shape, T v) {
    auto n = shape_numel(shape);
    return add(name, std::move(shape), std::vector<T>(n, v));
  }
  Tensor<T> uniform(const std::string& name, Shape shape, T bound, Rng& rng) {
    std::uniform_real_distribution<double> dist(-static_cast<double>(bound),
                                                static_cast<double>(bound));
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return add(name, std::move(shape), std::move(v));
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor<T>>>& items() { return items_; }
  Tensor<T> get(const std::string& name) const {
    for (auto& [n, t] : items_)
      if (n == name) return t;
    throw ConfigError("unknown parameter " + name);
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto& [_, t] : items_) n += t.numel();
    return n;
  }
  void zero_grad() {
    for (auto& [_, t] : items_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
};

template <class T>
struct Linear {
  Tensor<T> w;  // [in x out]
  Tensor<T> b;  // [out]

  static Linear make(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out,
                     Rng& rng) {
    const T bound = static_cast<T>(std::sqrt(6.0 / static_cast<double>(in + out)));
    return {ps.uniform(name + ".w", {in, out}, bound, rng), ps.zeros(name + ".b", {out})};
  }
  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const { return linear(tape, x, w, b); }
};

template <class T>
struct LayerNorm {
  Tensor<T> gain, bias;
  T eps = T(1e-5);

  static LayerNorm make(ParamSet<T>& ps, const std::string& name, std::size_t d) {
    return {ps.constant(name + ".g", {d}, T(1)), ps.zeros(name + ".b", {d})};
  }
  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
    return layer_norm(tape, x, gain, bias, eps);
  }
};

template <class T>
struct Conv2d {
  Tensor<T> kernels;  // [out x in x k x k]
  Tensor<T> bias;     // [out]
  std::size_t stride = 1, pad = 0;

  static Conv2d make(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out,
                     std::size_t k, std::size_t stride, std::size_t pad, Rng& rng) {
    const T bound = static_cast<T>(std::sqrt(6.0 / static_cast<double>(in * k * k)));
    return {ps.uniform(name + ".k", {out, in, k, k}, bound, rng), ps.zeros(name + ".b", {out}),
            stride, pad};
  }
  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
    return conv2d(tape, x, kernels, bias, stride, pad);
  }
};

/// Projections for multi-head attention over hidden size D = heads * head_dim.
template <class T>
struct AttentionParams {
  std::size_t num_heads = 1;
  std::size_t head_dim = 1;
  Linear<T> q, k, v, o;

  std::size_t dim() const { return num_heads * head_dim; }

  static AttentionParams make(ParamSet<T>& ps, const std::string& name, std::size_t d,
                              std::size_t heads, Rng& rng) {
    if (heads == 0 || d % heads != 0)
      throw ConfigError("attention: hidden size " + std::to_string(d) +
                        " not divisible by head count " + std::to_string(heads));
    AttentionParams p;
    p.num_heads = heads;
    p.head_dim = d / heads;
    p.q = Linear<T>::make(ps, name + ".q", d, d, rng);
    p.k = Linear<T>::make(ps, name + ".k", d, d, rng);
    p.v = Linear<T>::make(ps, name + ".v", d, d, rng);
    p.o = Linear<T>::make(ps, name + ".o", d, d, rng);
    return p;
  }
};

/// softmax(Q K^T / sqrt(head_dim)) V per head on already-projected tokens.
/// q: [Nq x D], k and v: [Nk x D]; heads occupy contiguous column blocks.
template <class T>
Tensor<T> scaled_dot_attention(Tape<T>& tape, Tensor<T> q, Tensor<T> k, Tensor<T> v,
                               std::size_t heads) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw ShapeError("attention: token sets must be rank 2");
  if (k.dim(0) != v.dim(0))
    throw ShapeError("attention: keys " + shape_str(k.shape()) + " and values " +
                     shape_str(v.shape()) + " differ in token count");
  const std::size_t nq = q.dim(0), nk = k.dim(0), d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || d % heads != 0)
    throw ShapeError("attention: hidden size mismatch " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  const std::size_t hd = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
  std::vector<T> probs(heads * nq * nk);
  std::vector<T> out(nq * d, T(0));
  auto qd = q.data(), kd = k.data(), vd = v.data();
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t i = 0; i < nq; ++i) {
      T* p = probs.data() + (h * nq + i) * nk;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < nk; ++j) {
        T s = T(0);
        for (std::size_t c = 0; c < hd; ++c) s += qd[i * d + off + c] * kd[j * d + off + c];
        p[j] = s * inv_sqrt;
        mx = std::max(mx, p[j]);
      }
      T z = T(0);
      for (std::size_t j = 0; j < nk; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j < nk; ++j) p[j] /= z;
      T* o = out.data() + i * d + off;
      for (std::size_t j = 0; j < nk; ++j) {
        const T pj = p[j];
        const T* vr = vd.data() + j * d + off;
        for (std::size_t c = 0; c < hd; ++c) o[c] += pj * vr[c];
      }
    }
  }
  Tensor<T> r({nq, d}, std::move(out), detail::any_grad<T>({&q, &k, &v}));
  if (r.requires_grad())
    tape.record([q, k, v, r, probs = std::move(probs), heads, nq, nk, d, hd, inv_sqrt]() mutable {
      auto g = r.grad();
      auto qd = q.data(), kd = k.data(), vd = v.data();
      std::span<T> gq = q.requires_grad() ? q.grad() : std::span<T>{};
      std::span<T> gk = k.requires_grad() ? k.grad() : std::span<T>{};
      std::span<T> gv = v.requires_grad() ? v.grad() : std::span<T>{};
      std::vector<T> ds(nk);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * hd;
        for (std::size_t i = 0; i < nq; ++i) {
          const T* p = probs.data() + (h * nq + i) * nk;
          const T* gi = g.data() + i * d + off;
          // dP_j = dO_i . V_j ; dS = P * (dP - sum(P dP))
          T dot = T(0);
          for (std::size_t j = 0; j < nk; ++j) {
            T dp = T(0);
            const T* vr = vd.data() + j * d + off;
            for (std::size_t c = 0; c < hd; ++c) dp += gi[c] * vr[c];
            ds[j] = dp;
            dot += dp * p[j];
          }
          for (std::size_t j = 0; j < nk; ++j) ds[j] = p[j] * (ds[j] - dot) * inv_sqrt;
          if (!gv.empty())
            for (std::size_t j = 0; j < nk; ++j) {
              T* gvr = gv.data() + j * d + off;
              for (std::size_t c = 0; c < hd; ++c) gvr[c] += p[j] * gi[c];
            }
          if (!gq.empty()) {
            T* gqr = gq.data() + i * d + off;
            for (std::size_t j = 0; j < nk; ++j) {
              const T* kr = kd.data() + j * d + off;
              for (std::size_t c = 0; c < hd; ++c) gqr[c] += ds[j] * kr[c];
            }
          }
          if (!gk.empty()) {
            const T* qr = qd.data() + i * d + off;
            for (std::size_t j = 0; j < nk; ++j) {
              T* gkr = gk.data() + j * d + off;
              for (std::size_t c = 0; c < hd; ++c) gkr[c] += ds[j] * qr[c];
            }
          }
        }
      }
    });
  return r;
}

/// Projects queries/keys/values, attends per head, concatenates heads and
/// applies the output projection.
template <class T>
Tensor<T> multi_head_attention(Tape<T>& tape, const Tensor<T>& queries, const Tensor<T>& keys,
                               const Tensor<T>& values, const AttentionParams<T>& p) {
  if (keys.rank() != 2 || values.rank() != 2 || keys.dim(0) != values.dim(0))
    throw ShapeError("multi_head_attention: keys " + shape_str(keys.shape()) + " vs values " +
                     shape_str(values.shape()));
  if (queries.rank() != 2 || queries.dim(1) != p.dim())
    throw ShapeError("multi_head_attention: queries " + shape_str(queries.shape()) +
                     " for hidden size " + std::to_string(p.dim()));
  auto q = p.q(tape, queries);
  auto k = p.k(tape, keys);
  auto v = p.v(tape, values);
  auto a = scaled_dot_attention(tape, q, k, v, p.num_heads);
  return p.o(tape, a);
}

template <class T>
struct FeedForward {
  Linear<T> in, out;

  static FeedForward make(ParamSet<T>& ps, const std::string& name, std::size_t d,
                          std::size_t hidden, Rng& rng) {
    if (hidden == 0) throw ConfigError("ffn: hidden width must be >= 1");
    return {Linear<T>::make(ps, name + ".in", d, hidden, rng),
            Linear<T>::make(ps, name + ".out", hidden, d, rng)};
  }
};

/// linear -> ReLU -> linear. The caller adds the residual.
template <class T>
Tensor<T> ffn(Tape<T>& tape, const Tensor<T>& x, const FeedForward<T>& f) {
  return f.out(tape, relu(tape, f.in(tape, x)));
}

/// Fixed 2-axis sinusoidal table, row p = y * W + x. The first D/2 columns
/// encode the row, the last D/2 the column, as interleaved (sin, cos) pairs.
template <class T>
struct PosEmbedding2D {
  std::size_t height = 0, width = 0, dim = 0;
  Tensor<T> table;  // [(H*W) x D], no gradient
};

template <class T>
PosEmbedding2D<T> pos_embed_2d(std::size_t h, std::size_t w, std::size_t d) {
  if (d == 0 || d % 4 != 0)
    throw ContractError("pos_embed_2d: D must be a positive multiple of 4, got " +
                        std::to_string(d));
  if (h == 0 || w == 0) throw ContractError("pos_embed_2d: empty grid");
  const std::size_t nf = d / 4;
  std::vector<T> v(h * w * d);
  auto encode = [&](T* dst, std::size_t idx, std::size_t extent) {
    const double t = (static_cast<double>(idx) + 0.5) / static_cast<double>(extent) * 2.0 *
                     std::numbers::pi;
    for (std::size_t k = 0; k < nf; ++k) {
      const double omega = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(nf));
      dst[2 * k] = static_cast<T>(std::sin(t * omega));
      dst[2 * k + 1] = static_cast<T>(std::cos(t * omega));
    }
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      T* row = v.data() + (y * w + x) * d;
      encode(row, y, h);
      encode(row + d / 2, x, w);
    }
  return {h, w, d, Tensor<T>({h * w, d}, std::move(v), false)};
}

/// Post-norm transformer encoder layer: self-attention (positions added to
/// queries and keys), add & norm, FFN, add & norm.
template <class T>
struct EncoderLayer {
  AttentionParams<T> attn;
  LayerNorm<T> norm1;
  FeedForward<T> ff;
  LayerNorm<T> norm2;

  static EncoderLayer make(ParamSet<T>& ps, const std::string& name, std::size_t d,
                           std::size_t heads, std::size_t hidden, Rng& rng) {
    EncoderLayer e;
    e.attn = AttentionParams<T>::make(ps, name + ".attn", d, heads, rng);
    e.norm1 = LayerNorm<T>::make(ps, name + ".norm1", d);
    e.ff = FeedForward<T>::make(ps, name + ".ffn", d, hidden, rng);
    e.norm2 = LayerNorm<T>::make(ps, name + ".norm2", d);
    return e;
  }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& pos) const {
    auto qk = pos.defined() ? add(tape, x, pos) : x;
    auto h = norm1(tape, add(tape, x, multi_head_attention(tape, qk, qk, x, attn)));
    return norm2(tape, add(tape, h, ffn(tape, h, ff)));
  }
};

/// Post-norm transformer decoder layer: self-attention over the target
/// tokens, cross-attention into a memory, FFN; add & norm after each.
template <class T>
struct DecoderLayer {
  AttentionParams<T> self_attn;
  LayerNorm<T> norm1;
  AttentionParams<T> cross_attn;
  LayerNorm<T> norm2;
  FeedForward<T> ff;
  LayerNorm<T> norm3;

  static DecoderLayer make(ParamSet<T>& ps, const std::string& name, std::size_t d,
                           std::size_t heads, std::size_t hidden, Rng& rng) {
    DecoderLayer l;
    l.self_attn = AttentionParams<T>::make(ps, name + ".self", d, heads, rng);
    l.norm1 = LayerNorm<T>::make(ps, name + ".norm1", d);
    l.cross_attn = AttentionParams<T>::make(ps, name + ".cross", d, heads, rng);
    l.norm2 = LayerNorm<T>::make(ps, name + ".norm2", d);
    l.ff = FeedForward<T>::make(ps, name + ".ffn", d, hidden, rng);
    l.norm3 = LayerNorm<T>::make(ps, name + ".norm3", d);
    return l;
  }

  /// Queries and keys both carry `pos`.
  Tensor<T> self_block(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& pos) const {
    auto qk = pos.defined() ? add(tape, x, pos) : x;
    return norm1(tape, add(tape, x, multi_head_attention(tape, qk, qk, x, self_attn)));
  }
  /// Queries carry `pos`; keys and values come from the memory as given.
  Tensor<T> cross_block(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& pos,
                        const Tensor<T>& mem_keys, const Tensor<T>& mem_values) const {
    auto q = pos.defined() ? add(tape, x, pos) : x;
    return norm2(tape,
                 add(tape, x, multi_head_attention(tape, q, mem_keys, mem_values, cross_attn)));
  }
  Tensor<T> ffn_block(Tape<T>& tape, const Tensor<T>& x) const {
    return norm3(tape, add(tape, x, ffn(tape, x, ff)));
  }

  /// Skips the cross block when the memory is undefined.
  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& pos,
                       const Tensor<T>& mem_keys, const Tensor<T>& mem_values) const {
    auto h = self_block(tape, x, pos);
    if (mem_keys.defined()) h = cross_block(tape, h, pos, mem_keys, mem_values);
    return ffn_block(tape, h);
  }
};

}  // namespace transgop
