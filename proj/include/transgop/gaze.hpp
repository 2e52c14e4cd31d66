#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "transgop/boxes.hpp"
#include "transgop/config.hpp"
#include "transgop/detector.hpp"
#include "transgop/nn.hpp"

// Gaze regressor: head/scene fusion, single-layer gaze autoencoder whose
// decoder cross-attends into (adapted) detector memory, and an upsampling
// heatmap head.

namespace transgop {

/// Binary [1 x S x S] map, 1 where the pixel center lies inside the head box.
template <class T>
Tensor<T> head_location_map(const Box& head, std::size_t size) {
  std::vector<T> v(size * size, T(0));
  std::size_t ones = 0;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(size);
      const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(size);
      if (px >= head.x1 && px < head.x2 && py >= head.y1 && py < head.y2) {
        v[y * size + x] = T(1);
        ++ones;
      }
    }
  if (ones == 0) throw ContractError("head location map: head box covers no pixel");
  return Tensor<T>({1, size, size}, std::move(v));
}

/// Bilinear crop of image[3 x S x S] to [3 x out x out] over the head box.
template <class T>
Tensor<T> crop_head(const Tensor<T>& image, const Box& head, std::size_t out) {
  require_box(head, "crop_head");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<T> v(c * out * out);
  auto src = image.data();
  auto sample = [&](std::size_t ch, double fy, double fx) {
    fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
    fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
    const auto y0 = static_cast<std::size_t>(fy), x0 = static_cast<std::size_t>(fx);
    const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double ay = fy - static_cast<double>(y0), ax = fx - static_cast<double>(x0);
    const T* p = src.data() + ch * h * w;
    return (1 - ay) * ((1 - ax) * p[y0 * w + x0] + ax * p[y0 * w + x1]) +
           ay * ((1 - ax) * p[y1 * w + x0] + ax * p[y1 * w + x1]);
  };
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < out; ++y)
      for (std::size_t x = 0; x < out; ++x) {
        const double ny = head.y1 + (static_cast<double>(y) + 0.5) / static_cast<double>(out) * head.height();
        const double nx = head.x1 + (static_cast<double>(x) + 0.5) / static_cast<double>(out) * head.width();
        v[(ch * out + y) * out + x] = static_cast<T>(
            sample(ch, ny * static_cast<double>(h) - 0.5, nx * static_cast<double>(w) - 0.5));
      }
  return Tensor<T>({c, out, out}, std::move(v));
}

template <class T>
struct FusedFeature {
  Tensor<T> attention;  // [1 x H*W], softmax over positions
  Tensor<T> fused;      // F_fuse [C x H x W]
};

template <class T>
struct AdaptedMemory {
  Tensor<T> keys, values;  // [M_len x D]
  std::size_t length() const { return keys.dim(0); }
};

/// Per-token affine map followed by layer norm, separately for keys and
/// values. Starts as the identity affine map.
template <class T>
struct CrossAdapter {
  Linear<T> key_map, value_map;
  LayerNorm<T> key_norm, value_norm;

  static CrossAdapter make(ParamSet<T>& ps, const std::string& name, std::size_t d) {
    std::vector<T> eye(d * d, T(0));
    for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = T(1);
    CrossAdapter a;
    a.key_map = {ps.add(name + ".key.w", {d, d}, eye), ps.zeros(name + ".key.b", {d})};
    a.value_map = {ps.add(name + ".value.w", {d, d}, eye), ps.zeros(name + ".value.b", {d})};
    a.key_norm = LayerNorm<T>::make(ps, name + ".key_norm", d);
    a.value_norm = LayerNorm<T>::make(ps, name + ".value_norm", d);
    return a;
  }

  AdaptedMemory<T> operator()(Tape<T>& tape, const Tensor<T>& keys, const Tensor<T>& values) const {
    const std::size_t d = key_map.w.dim(0);
    if (keys.rank() != 2 || keys.dim(1) != d || values.rank() != 2 || values.dim(1) != d)
      throw ConfigError("cross adapter: memory hidden size " + shape_str(keys.shape()) +
                        " does not match gaze hidden size " + std::to_string(d));
    return {key_norm(tape, key_map(tape, keys)), value_norm(tape, value_map(tape, values))};
  }
};

template <class T>
class GazeRegressor {
 public:
  GazeRegressor() = default;
  /// scene_channels: channel count C of the scene feature map.
  GazeRegressor(const ModelConfig& cfg, std::size_t scene_channels, ParamSet<T>& ps, Rng& rng)
      : cfg_(cfg), scene_channels_(scene_channels) {
    const std::size_t d = cfg.hidden, grid = cfg.grid(), hw = grid * grid;
    // Stride-2 stages down to a 1x1 map so pooling keeps where the pupil sits.
    std::size_t hin = 3;
    for (std::size_t side = cfg.head_crop, i = 0; side > 1; side = (side + 1) / 2, ++i) {
      const std::size_t out = side <= 2 ? cfg.head_channels : std::min<std::size_t>(8 << i, cfg.head_channels);
      head_.push_back(Conv2d<T>::make(ps, "gaze.head." + std::to_string(i), hin, out, 3, 2, 1, rng));
      hin = out;
    }
    const std::size_t lc = cfg.loc_channels, stages = cfg.backbone_stages();
    std::size_t in = 1;
    for (std::size_t i = 0; i < 5; ++i) {
      loc_.push_back(Conv2d<T>::make(ps, "gaze.loc." + std::to_string(i), in, lc, 3,
                                     i < stages ? 2 : 1, 1, rng));
      in = lc;
    }
    fuse_ = Linear<T>::make(ps, "gaze.fuse", cfg.head_channels + lc * hw, hw, rng);
    reduce_ = Conv2d<T>::make(ps, "gaze.reduce", scene_channels, d, 1, 1, 0, rng);
    for (auto& v : reduce_.kernels.mutable_data()) v *= static_cast<T>(hw);
    if (cfg.gaze_autoencoder) {
      encoder_ = EncoderLayer<T>::make(ps, "gaze.encoder", d, cfg.heads, cfg.ffn_hidden, rng);
      if (cfg.cross_adapter && cfg.cross_direction != CrossDirection::none)
        adapter_ = CrossAdapter<T>::make(ps, "gaze.adapter", d);
      decoder_ = DecoderLayer<T>::make(ps, "gaze.decoder", d, cfg.heads, cfg.ffn_hidden, rng);
      if (cfg.decoder_mode == DecoderMode::learned_queries) {
        query_pos_ = ps.uniform("gaze.query_pos", {cfg.gaze_queries, d}, T(1), rng);
        to_grid_ = ps.uniform("gaze.to_grid", {hw, cfg.gaze_queries},
                              static_cast<T>(std::sqrt(3.0 / double(cfg.gaze_queries))), rng);
      }
    }
    const std::size_t hc = cfg.heatmap_channels;
    head_a_ = Conv2d<T>::make(ps, "gaze.heatmap.0", d, hc, 3, 1, 1, rng);
    head_b_ = Conv2d<T>::make(ps, "gaze.heatmap.1", hc, hc, 3, 1, 1, rng);
    head_out_ = Conv2d<T>::make(ps, "gaze.heatmap.2", hc, 1, 3, 1, 1, rng);
    // Constant initial heatmap, so an untrained model has no spatial prior. At
    // bias -4 the background term outweighed the gaze peak in the first
    // updates and drove the sigmoid into saturation; -6 does not.
    std::fill(head_out_.kernels.mutable_data().begin(), head_out_.kernels.mutable_data().end(), T(0));
    head_out_.bias.mutable_data()[0] = T(-6);
    pos_ = pos_embed_2d<T>(grid, grid, d);
  }

  const PosEmbedding2D<T>& pos() const { return pos_; }
  bool has_adapter() const { return adapter_.key_map.w.defined(); }

  /// Head crop [3 x s x s] -> head feature [C_h].
  Tensor<T> head_feature(Tape<T>& tape, const Tensor<T>& head_crop) const {
    Tensor<T> x = head_crop;
    for (const auto& c : head_) x = relu(tape, c(tape, x));
    return global_avg_pool(tape, x);
  }

  /// Head location map [1 x S x S] -> [lc x H x W] through five conv layers.
  Tensor<T> location_feature(Tape<T>& tape, const Tensor<T>& head_loc) const {
    Tensor<T> x = head_loc;
    for (const auto& c : loc_) x = relu(tape, c(tape, x));
    return x;
  }

  /// Attention over positions from [head feature || location feature],
  /// softmax-normalized, then F_fuse[c, p] = A[p] * scene[c, p].
  FusedFeature<T> fuse_features(Tape<T>& tape, const Tensor<T>& scene_feat,
                                const Tensor<T>& head_feat, const Tensor<T>& head_loc) const {
    const std::size_t grid = cfg_.grid();
    if (scene_feat.rank() != 3 || scene_feat.dim(0) != scene_channels_ ||
        scene_feat.dim(1) != grid || scene_feat.dim(2) != grid)
      throw ShapeError("fuse_features: scene features " + shape_str(scene_feat.shape()));
    bool any = false;
    for (auto v : head_loc.data()) any = any || v != T(0);
    if (!any) throw ContractError("fuse_features: empty head location map");
    auto loc = location_feature(tape, head_loc);
    auto joint = concat(tape, {head_feat, reshape(tape, loc, {loc.numel()})});
    auto logits = fuse_(tape, reshape(tape, joint, {1, joint.numel()}));
    auto attn = softmax(tape, logits, 1);
    return {attn, scale_spatial(tape, scene_feat, attn)};
  }

  /// 1x1 reduction to D, flatten to H*W tokens, one encoder layer.
  /// Without the autoencoder this returns the reduced tokens G_0.
  Tensor<T> encode(Tape<T>& tape, const FusedFeature<T>& f) const {
    const std::size_t d = cfg_.hidden, hw = f.fused.dim(1) * f.fused.dim(2);
    auto g0 = transpose(tape, reshape(tape, reduce_(tape, f.fused), {d, hw}));
    if (!cfg_.gaze_autoencoder) return g0;
    return encoder_(tape, g0, pos_.table);
  }

  /// Memory passed through the cross-adapter (or unchanged without one).
  AdaptedMemory<T> adapt(Tape<T>& tape, const Tensor<T>& keys, const Tensor<T>& values) const {
    if (keys.dim(0) != values.dim(0))
      throw ShapeError("adapt: keys and values differ in token count");
    if (has_adapter()) return adapter_(tape, keys, values);
    if (keys.dim(1) != cfg_.hidden)
      throw ConfigError("adapt: memory hidden size does not match gaze hidden size");
    return {keys, values};
  }

  /// Decoder layer. Token mode: self-attention over the encoded tokens.
  /// Learned-query mode: queries attend to the encoded tokens first and are
  /// mapped back onto the H x W grid at the end. `memory` may be null.
  Tensor<T> decode(Tape<T>& tape, const Tensor<T>& encoded, const AdaptedMemory<T>* memory) const {
    if (!cfg_.gaze_autoencoder) return encoded;
    const auto& pos = pos_.table;
    if (cfg_.decoder_mode == DecoderMode::tokens) {
      auto h = decoder_.self_block(tape, encoded, pos);
      if (memory) h = decoder_.cross_block(tape, h, pos, memory->keys, memory->values);
      return decoder_.ffn_block(tape, h);
    }
    auto tgt = Tensor<T>::zeros({cfg_.gaze_queries, cfg_.hidden});
    auto q = add(tape, tgt, query_pos_);
    auto k = add(tape, encoded, pos);
    auto h = decoder_.norm1(
        tape, add(tape, tgt, multi_head_attention(tape, q, k, encoded, decoder_.self_attn)));
    if (memory) h = decoder_.cross_block(tape, h, query_pos_, memory->keys, memory->values);
    h = decoder_.ffn_block(tape, h);
    return matmul(tape, to_grid_, h);
  }

  /// Tokens [H*W x D] -> heatmap [S_T x S_T] in (0, 1).
  Tensor<T> predict_heatmap(Tape<T>& tape, const Tensor<T>& tokens) const {
    const std::size_t d = cfg_.hidden, grid = cfg_.grid(), s = cfg_.heatmap_size;
    if (tokens.rank() != 2 || tokens.dim(0) != grid * grid || tokens.dim(1) != d)
      throw ShapeError("predict_heatmap: tokens " + shape_str(tokens.shape()));
    auto x = reshape(tape, transpose(tape, tokens), {d, grid, grid});
    x = relu(tape, head_a_(tape, resize_bilinear(tape, x, s / 4, s / 4)));
    x = relu(tape, head_b_(tape, resize_bilinear(tape, x, s / 2, s / 2)));
    x = head_out_(tape, resize_bilinear(tape, x, s, s));
    return sigmoid(tape, reshape(tape, x, {s, s}));
  }

  /// Gaze tokens exported as keys/values for gaze-to-object wiring.
  std::pair<Tensor<T>, Tensor<T>> export_tokens(Tape<T>& tape, const Tensor<T>& encoded) const {
    return {add(tape, encoded, pos_.table), encoded};
  }

 private:
  ModelConfig cfg_;
  std::size_t scene_channels_ = 0;
  std::vector<Conv2d<T>> head_;
  std::vector<Conv2d<T>> loc_;
  Linear<T> fuse_;
  Conv2d<T> reduce_;
  EncoderLayer<T> encoder_;
  CrossAdapter<T> adapter_;
  DecoderLayer<T> decoder_;
  Tensor<T> query_pos_, to_grid_;
  Conv2d<T> head_a_, head_b_, head_out_;
  PosEmbedding2D<T> pos_;
};

}  // namespace transgop
