#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "transgop/boxes.hpp"
#include "transgop/config.hpp"
#include "transgop/hungarian.hpp"
#include "transgop/nn.hpp"

// Minimal single-scale DETR-style detector: strided conv backbone, one
// encoder layer whose output is exported as key/value memory, learned
// queries with learned anchor boxes, one decoder layer, class and box heads.

namespace transgop {

/// Encoder keys/values as token rows: keys = memory + pos, values = memory.
/// The detector's own decoder attends to exactly these tensors.
template <class T>
struct DetectorMemory {
  Tensor<T> keys;    // [M_len x D]
  Tensor<T> values;  // [M_len x D]
  std::size_t length() const { return keys.dim(0); }
};

template <class T>
struct DetectionOutput {
  Tensor<T> class_logits;  // [N_q x K]
  Tensor<T> boxes;         // [N_q x 4] (cx, cy, w, h) in [0, 1]

  std::size_t num_queries() const { return boxes.dim(0); }
  std::size_t num_classes() const { return class_logits.dim(1); }
  BoxCXCYWH<double> box(std::size_t q) const {
    auto b = boxes.data();
    return {b[q * 4], b[q * 4 + 1], b[q * 4 + 2], b[q * 4 + 3]};
  }
  /// (max class probability, argmax class) under per-class sigmoids.
  std::pair<double, int> confidence(std::size_t q) const {
    const std::size_t k = num_classes();
    auto l = class_logits.data();
    int best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (l[q * k + c] > l[q * k + static_cast<std::size_t>(best)]) best = static_cast<int>(c);
    const double z = static_cast<double>(l[q * k + static_cast<std::size_t>(best)]);
    return {1.0 / (1.0 + std::exp(-z)), best};
  }
};

/// Encoder-stage results kept for the gaze branch and the decoder.
template <class T>
struct DetectorEncoding {
  Tensor<T> scene_features;  // [D x H x W] backbone output
  DetectorMemory<T> memory;
};

struct GroundTruthObject {
  Box box;  // corners, normalized
  int class_id = 0;
};

struct DetLossWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

template <class T>
struct DetLossParts {
  Tensor<T> total, focal, l1, giou;
  MatchResult match;
};

template <class T>
class Detector {
 public:
  Detector() = default;
  Detector(const ModelConfig& cfg, ParamSet<T>& ps, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const std::size_t d = cfg.hidden;
    std::size_t in = 3;
    for (std::size_t i = 0; i < cfg.backbone_channels.size(); ++i) {
      backbone_.push_back(Conv2d<T>::make(ps, "det.backbone." + std::to_string(i), in,
                                          cfg.backbone_channels[i], 3, 2, 1, rng));
      in = cfg.backbone_channels[i];
    }
    backbone_.push_back(Conv2d<T>::make(ps, "det.backbone." + std::to_string(backbone_.size()),
                                        in, d, 3, 2, 1, rng));
    refine_ = Conv2d<T>::make(ps, "det.backbone.refine", d, d, 3, 1, 1, rng);
    input_proj_ = Conv2d<T>::make(ps, "det.input_proj", d, d, 1, 1, 0, rng);
    encoder_ = EncoderLayer<T>::make(ps, "det.encoder", d, cfg.heads, cfg.ffn_hidden, rng);
    query_pos_ = ps.uniform("det.query_pos", {cfg.num_queries, d}, T(1), rng);
    // Learned anchors start on a regular grid (logit space).
    const std::size_t g = static_cast<std::size_t>(std::ceil(std::sqrt(double(cfg.num_queries))));
    std::vector<T> anchors(cfg.num_queries * 4);
    auto logit = [](double p) { return static_cast<T>(std::log(p / (1 - p))); };
    for (std::size_t q = 0; q < cfg.num_queries; ++q) {
      anchors[q * 4 + 0] = logit((static_cast<double>(q % g) + 0.5) / static_cast<double>(g));
      anchors[q * 4 + 1] = logit((static_cast<double>(q / g) + 0.5) / static_cast<double>(g));
      anchors[q * 4 + 2] = logit(0.12);
      anchors[q * 4 + 3] = logit(0.12);
    }
    anchors_ = ps.add("det.anchors", {cfg.num_queries, 4}, std::move(anchors));
    decoder_ = DecoderLayer<T>::make(ps, "det.decoder", d, cfg.heads, cfg.ffn_hidden, rng);
    if (cfg.cross_direction == CrossDirection::gaze_to_object) {
      gaze_cross_ = AttentionParams<T>::make(ps, "det.gaze_cross", d, cfg.heads, rng);
      gaze_cross_norm_ = LayerNorm<T>::make(ps, "det.gaze_cross_norm", d);
    }
    class_head_ = Linear<T>::make(ps, "det.class_head", d, cfg.num_classes, rng);
    std::fill(class_head_.b.mutable_data().begin(), class_head_.b.mutable_data().end(),
              static_cast<T>(-std::log((1 - 0.01) / 0.01)));
    box_hidden_ = Linear<T>::make(ps, "det.box_head.0", d, d, rng);
    box_out_ = Linear<T>::make(ps, "det.box_head.1", d, 4, rng);
    for (auto& v : box_out_.w.mutable_data()) v *= T(0.1);
    pos_ = pos_embed_2d<T>(cfg.grid(), cfg.grid(), d);
  }

  const ModelConfig& config() const { return cfg_; }
  const PosEmbedding2D<T>& pos() const { return pos_; }

  /// Backbone + encoder. image: [3 x S x S].
  DetectorEncoding<T> encode(Tape<T>& tape, const Tensor<T>& image) const {
    if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.image_size ||
        image.dim(2) != cfg_.image_size)
      throw ShapeError("detector: expected image [3x" + std::to_string(cfg_.image_size) + "x" +
                       std::to_string(cfg_.image_size) + "], got " + shape_str(image.shape()));
    Tensor<T> x = image;
    for (const auto& conv : backbone_) x = relu(tape, conv(tape, x));
    x = relu(tape, refine_(tape, x));
    const std::size_t d = cfg_.hidden, hw = x.dim(1) * x.dim(2);
    auto tokens = transpose(tape, reshape(tape, input_proj_(tape, x), {d, hw}));
    auto memory = encoder_(tape, tokens, pos_.table);
    return {x, {add(tape, memory, pos_.table), memory}};
  }

  /// Decoder + heads. `gaze_keys/values` feed the extra cross block in
  /// gaze-to-object wiring and are ignored otherwise.
  DetectionOutput<T> decode(Tape<T>& tape, const DetectorMemory<T>& mem,
                            const Tensor<T>& gaze_keys = {}, const Tensor<T>& gaze_values = {}) const {
    const std::size_t d = cfg_.hidden;
    auto tgt = Tensor<T>::zeros({cfg_.num_queries, d});
    auto h = decoder_.self_block(tape, tgt, query_pos_);
    h = decoder_.cross_block(tape, h, query_pos_, mem.keys, mem.values);
    if (cfg_.cross_direction == CrossDirection::gaze_to_object && gaze_keys.defined()) {
      auto q = add(tape, h, query_pos_);
      h = gaze_cross_norm_(
          tape, add(tape, h, multi_head_attention(tape, q, gaze_keys, gaze_values, gaze_cross_)));
    }
    h = decoder_.ffn_block(tape, h);
    DetectionOutput<T> out;
    out.class_logits = class_head_(tape, h);
    auto delta = box_out_(tape, relu(tape, box_hidden_(tape, h)));
    out.boxes = sigmoid(tape, add(tape, delta, anchors_));
    return out;
  }

  std::pair<DetectionOutput<T>, DetectorMemory<T>> forward(Tape<T>& tape,
                                                           const Tensor<T>& image) const {
    auto enc = encode(tape, image);
    return {decode(tape, enc.memory), enc.memory};
  }

 private:
  ModelConfig cfg_;
  std::vector<Conv2d<T>> backbone_;
  Conv2d<T> refine_, input_proj_;
  EncoderLayer<T> encoder_;
  Tensor<T> query_pos_, anchors_;
  DecoderLayer<T> decoder_;
  AttentionParams<T> gaze_cross_;
  LayerNorm<T> gaze_cross_norm_;
  Linear<T> class_head_, box_hidden_, box_out_;
  PosEmbedding2D<T> pos_;
};

/// Focal-style classification cost used for matching (positive minus
/// negative term at the target class).
inline double focal_match_cost(double logit, double alpha, double gamma) {
  const double p = 1.0 / (1.0 + std::exp(-logit));
  const double eps = 1e-8;
  const double pos = alpha * std::pow(1 - p, gamma) * -std::log(p + eps);
  const double neg = (1 - alpha) * std::pow(p, gamma) * -std::log(1 - p + eps);
  return pos - neg;
}

/// Hungarian matching with class + L1 + GIoU costs, then focal loss over all
/// queries (unmatched queries get all-zero targets) plus L1 and GIoU over the
/// matched pairs. Every term is normalized by max(1, number of targets).
template <class T>
DetLossParts<T> det_loss(Tape<T>& tape, const DetectionOutput<T>& out,
                         const std::vector<GroundTruthObject>& targets,
                         const DetLossWeights& w = {}) {
  const std::size_t nq = out.num_queries(), k = out.num_classes(), ng = targets.size();
  for (const auto& t : targets) {
    require_box(t.box, "det_loss target");
    if (t.class_id < 0 || static_cast<std::size_t>(t.class_id) >= k)
      throw ContractError("det_loss: target class out of range");
  }
  for (const auto* t : {&out.class_logits, &out.boxes})
    for (auto v : t->data())
      if (!std::isfinite(static_cast<double>(v))) throw NumericError("det_loss: non-finite detector output");
  DetLossParts<T> parts;
  std::vector<double> cost(nq * ng);
  auto logits = out.class_logits.data();
  for (std::size_t q = 0; q < nq; ++q) {
    const auto pb = out.box(q);
    for (std::size_t g = 0; g < ng; ++g) {
      const auto& t = targets[g];
      const double c_cls = focal_match_cost(
          static_cast<double>(logits[q * k + static_cast<std::size_t>(t.class_id)]),
          w.focal_alpha, w.focal_gamma);
      const double c_l1 = l1_box_loss(pb, BoxCXCYWH<double>::from(t.box));
      const auto pc = pb.corners();
      const double c_giou = pc.valid() ? -giou(pc, t.box) : 1.0;
      cost[q * ng + g] = w.cls * c_cls + w.l1 * c_l1 + w.giou * c_giou;
    }
  }
  parts.match = hungarian_match(cost, nq, ng);
  const T norm = static_cast<T>(std::max<std::size_t>(1, ng));

  std::vector<T> cls_targets(nq * k, T(0));
  for (auto [q, g] : parts.match.pairs)
    cls_targets[q * k + static_cast<std::size_t>(targets[g].class_id)] = T(1);
  parts.focal = scale(tape,
                      sigmoid_focal_loss(tape, out.class_logits, std::move(cls_targets),
                                         static_cast<T>(w.focal_alpha),
                                         static_cast<T>(w.focal_gamma)),
                      T(1) / norm);
  if (parts.match.pairs.empty()) {
    parts.l1 = Tensor<T>::scalar(T(0));
    parts.giou = Tensor<T>::scalar(T(0));
    parts.total = scale(tape, parts.focal, static_cast<T>(w.cls));
    return parts;
  }
  std::vector<std::size_t> rows;
  std::vector<BoxCXCYWH<double>> tgt;
  for (auto [q, g] : parts.match.pairs) {
    rows.push_back(q);
    tgt.push_back(BoxCXCYWH<double>::from(targets[g].box));
  }
  auto matched = index_rows(tape, out.boxes, rows);
  auto l1_rows = map_rows<4>(tape, matched, [&](const auto& b, std::size_t i) {
    using S = std::decay_t<decltype(b[0])>;
    const BoxCXCYWH<S> p{b[0], b[1], b[2], b[3]};
    const auto& t = tgt[i];
    return l1_box_loss(p, BoxCXCYWH<S>{S(T(t.cx)), S(T(t.cy)), S(T(t.w)), S(T(t.h))});
  });
  auto giou_rows = map_rows<4>(tape, matched, [&](const auto& b, std::size_t i) {
    using S = std::decay_t<decltype(b[0])>;
    const auto p = BoxCXCYWH<S>{b[0], b[1], b[2], b[3]}.corners();
    const auto tc = tgt[i].corners();
    const BoxCorners<S> t{S(T(tc.x1)), S(T(tc.y1)), S(T(tc.x2)), S(T(tc.y2))};
    return giou_loss(p, t);
  });
  parts.l1 = scale(tape, sum(tape, l1_rows), T(1) / norm);
  parts.giou = scale(tape, sum(tape, giou_rows), T(1) / norm);
  parts.total = add(tape,
                    add(tape, scale(tape, parts.focal, static_cast<T>(w.cls)),
                        scale(tape, parts.l1, static_cast<T>(w.l1))),
                    scale(tape, parts.giou, static_cast<T>(w.giou)));
  return parts;
}

}  // namespace transgop
