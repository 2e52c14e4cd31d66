#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "transgop/gradcheck.hpp"
#include "transgop/losses.hpp"
#include "transgop/model.hpp"

// Named finite-difference checks over every differentiable op, the network
// blocks built from them, and a tiny end-to-end model. All in double.

namespace transgop {

struct NamedGradcheck {
  std::string module;
  std::string name;
  std::function<GradcheckReport()> run;
};

namespace gc {

using TD = Tensor<double>;
using TapeD = Tape<double>;
using Inputs = std::span<TD>;

inline TD random(Shape shape, Rng& rng, double lo = -1, double hi = 1, bool grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return TD(std::move(shape), std::move(v), grad);
}

/// Values with magnitude in [0.1, 1] and random sign, clear of kinks at 0.
inline TD away_from_zero(Shape shape, Rng& rng) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return TD(std::move(shape), std::move(v), true);
}

/// Scalar readout with fixed random weights so every output element counts.
inline TD readout(TapeD& tape, const TD& t, std::uint64_t seed = 99) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> w(t.numel());
  for (auto& x : w) x = u(rng);
  return weighted_sum(tape, t, std::move(w));
}

inline GradcheckReport check(std::function<TD(TapeD&, Inputs)> fn, std::vector<TD> inputs) {
  return gradcheck(fn, std::move(inputs));
}

/// Every registered parameter nudged by uniform noise so zero-initialized
/// weights do not hide upstream gradients.
inline void jitter(ParamSet<double>& ps, Rng& rng, double amount) {
  std::uniform_real_distribution<double> u(-amount, amount);
  for (auto& [_, t] : ps.items())
    for (auto& v : t.mutable_data()) v += u(rng);
}

inline std::vector<TD> all_params(ParamSet<double>& ps) {
  std::vector<TD> v;
  for (auto& [_, t] : ps.items()) v.push_back(t);
  return v;
}

}  // namespace gc

/// Model used by the end-to-end check: D=8, 3x3 feature grid.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.image_size = 24;
  c.num_classes = 3;
  c.hidden = 8;
  c.heads = 2;
  c.ffn_hidden = 16;
  c.num_queries = 4;
  c.backbone_channels = {4, 4};
  c.head_crop = 8;
  c.head_channels = 4;
  c.loc_channels = 2;
  c.heatmap_size = 8;
  c.heatmap_channels = 2;
  c.gaze_queries = 5;
  return c;
}

/// Annotated scene for the tiny model; the raster is left empty.
inline SceneSample tiny_scene() {
  SceneSample s;
  s.head_box = {0.02, 0.55, 0.3, 0.95};
  s.objects = {{{0.4, 0.1, 0.7, 0.45}, 1}, {{0.62, 0.5, 0.95, 0.8}, 2}};
  s.gaze_object_index = 1;
  s.gaze_point = {0.8, 0.62};
  return s;
}

template <class T>
SceneInputs<T> tiny_inputs(const ModelConfig& cfg, const Box& head, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<T> px(3 * cfg.image_size * cfg.image_size);
  for (auto& v : px) v = static_cast<T>(u(rng));
  SceneInputs<T> in;
  in.image = Tensor<T>({3, cfg.image_size, cfg.image_size}, std::move(px));
  in.head_crop = crop_head(in.image, head, cfg.head_crop);
  in.head_loc = head_location_map<T>(head, cfg.image_size);
  in.head_box = head;
  return in;
}

inline GradcheckReport end_to_end_gradcheck(const ModelConfig& cfg, BoxTerm term,
                                            std::uint64_t seed = 3) {
  GopModel<double> model(cfg, seed);
  Rng rng(seed + 1);
  gc::jitter(model.params(), rng, 0.05);
  const auto s = tiny_scene();
  const auto in = tiny_inputs<double>(cfg, s.head_box, seed + 2);
  auto fn = [&](gc::TapeD& tape, gc::Inputs) {
    auto out = model.forward(tape, in);
    return sample_loss(tape, out, s, LossWeights{}, DetLossWeights{}, term, 1.0).total;
  };
  return gradcheck(fn, gc::all_params(model.params()));
}

inline std::vector<NamedGradcheck> gradcheck_suite() {
  using namespace gc;
  std::vector<NamedGradcheck> s;
  auto reg = [&](const char* module, const char* name, std::function<GradcheckReport()> f) {
    s.push_back({module, name, std::move(f)});
  };

  // ------------------------------------------------------------ tensor_core
  reg("tensor_core", "add_sub_mul_div", [] {
    Rng r(1);
    return check([](TapeD& t, Inputs x) {
      auto a = add(t, x[0], x[1]);
      auto b = mul(t, sub(t, a, x[2]), x[1]);
      return readout(t, div(t, b, x[2]));
    }, {random({2, 3}, r), random({2, 3}, r), random({2, 3}, r, 0.5, 1.5)});
  });
  reg("tensor_core", "affine_scale", [] {
    Rng r(2);
    return check([](TapeD& t, Inputs x) {
      return readout(t, scale(t, affine_scalar(t, x[0], -1.5, 0.25), 3.0));
    }, {random({5}, r)});
  });
  reg("tensor_core", "relu_abs", [] {
    Rng r(3);
    return check([](TapeD& t, Inputs x) {
      return readout(t, add(t, relu(t, x[0]), abs(t, x[0])));
    }, {away_from_zero({4, 3}, r)});
  });
  reg("tensor_core", "sigmoid", [] {
    Rng r(4);
    return check([](TapeD& t, Inputs x) { return readout(t, sigmoid(t, x[0])); },
                 {random({6}, r, -4, 4)});
  });
  reg("tensor_core", "sum_mean_weighted", [] {
    Rng r(5);
    return check([](TapeD& t, Inputs x) {
      auto a = mul(t, sum(t, x[0]), mean(t, x[0]));
      return add(t, a, weighted_sum(t, x[0], {1, -2, 0.5, 3, 0, 1}));
    }, {random({2, 3}, r)});
  });
  reg("tensor_core", "reshape_transpose", [] {
    Rng r(6);
    return check([](TapeD& t, Inputs x) {
      return readout(t, transpose(t, reshape(t, x[0], {3, 4})));
    }, {random({2, 6}, r)});
  });
  reg("tensor_core", "concat_index_rows", [] {
    Rng r(7);
    return check([](TapeD& t, Inputs x) {
      auto c = concat(t, {x[0], x[1]});
      return readout(t, index_rows(t, c, {4, 0, 2, 0}));
    }, {random({2, 3}, r), random({3, 3}, r)});
  });
  reg("tensor_core", "matmul", [] {
    Rng r(8);
    return check([](TapeD& t, Inputs x) { return readout(t, matmul(t, x[0], x[1])); },
                 {random({3, 4}, r), random({4, 5}, r)});
  });
  reg("tensor_core", "linear", [] {
    Rng r(9);
    return check([](TapeD& t, Inputs x) { return readout(t, linear(t, x[0], x[1], x[2])); },
                 {random({3, 4}, r), random({4, 2}, r), random({2}, r)});
  });
  reg("tensor_core", "softmax_axes", [] {
    Rng r(10);
    return check([](TapeD& t, Inputs x) {
      return add(t, readout(t, softmax(t, x[0], 0), 1), readout(t, softmax(t, x[0], 1), 2));
    }, {random({3, 4}, r, -2, 2)});
  });
  reg("tensor_core", "layer_norm", [] {
    Rng r(11);
    return check([](TapeD& t, Inputs x) {
      return readout(t, layer_norm(t, x[0], x[1], x[2], 1e-5));
    }, {random({3, 6}, r), random({6}, r, 0.5, 1.5), random({6}, r)});
  });
  reg("tensor_core", "conv2d_stride1_pad1", [] {
    Rng r(12);
    return check([](TapeD& t, Inputs x) {
      return readout(t, conv2d(t, x[0], x[1], x[2], 1, 1));
    }, {random({2, 5, 5}, r), random({3, 2, 3, 3}, r), random({3}, r)});
  });
  reg("tensor_core", "conv2d_stride2", [] {
    Rng r(13);
    return check([](TapeD& t, Inputs x) {
      return readout(t, conv2d(t, x[0], x[1], x[2], 2, 1));
    }, {random({2, 6, 6}, r), random({2, 2, 3, 3}, r), random({2}, r)});
  });
  reg("tensor_core", "resize_bilinear", [] {
    Rng r(14);
    return check([](TapeD& t, Inputs x) {
      auto up = resize_bilinear(t, x[0], 7, 5);
      return add(t, readout(t, up, 1), readout(t, resize_bilinear(t, up, 2, 3), 2));
    }, {random({2, 3, 4}, r)});
  });
  reg("tensor_core", "pool_and_scale_spatial", [] {
    Rng r(15);
    return check([](TapeD& t, Inputs x) {
      auto s = scale_spatial(t, x[0], x[1]);
      return add(t, readout(t, s, 1), readout(t, global_avg_pool(t, s), 2));
    }, {random({3, 2, 2}, r), random({1, 4}, r)});
  });
  reg("tensor_core", "sigmoid_focal_loss", [] {
    Rng r(16);
    return check([](TapeD& t, Inputs x) {
      return sigmoid_focal_loss(t, x[0], {1, 0, 0, 0, 1, 0}, 0.25, 2.0);
    }, {random({2, 3}, r, -3, 3)});
  });
  reg("tensor_core", "map_rows_giou_l1", [] {
    return check([](TapeD& t, Inputs x) {
      auto g = map_rows<4>(t, x[0], [](const auto& b, std::size_t i) {
        using S = std::decay_t<decltype(b[0])>;
        const auto p = BoxCXCYWH<S>{b[0], b[1], b[2], b[3]};
        const BoxCorners<S> target{S(0.2 + 0.1 * double(i)), S(0.3), S(0.6), S(0.7)};
        return giou_loss(p.corners(), target) + l1_box_loss(p, BoxCXCYWH<S>::from(target));
      });
      return readout(t, g);
    }, {TD({3, 4}, {0.45, 0.52, 0.31, 0.37, 0.9, 0.2, 0.1, 0.15, 0.41, 0.47, 0.33, 0.41}, true)});
  });

  // ------------------------------------------------------------ nn_blocks
  reg("nn_blocks", "multi_head_attention", [] {
    Rng r(20);
    ParamSet<double> ps;
    auto p = AttentionParams<double>::make(ps, "a", 8, 2, r);
    auto inputs = all_params(ps);
    inputs.push_back(random({3, 8}, r));
    inputs.push_back(random({4, 8}, r));
    inputs.push_back(random({4, 8}, r));
    const std::size_t n = inputs.size();
    return check([p, n](TapeD& t, Inputs x) {
      return readout(t, multi_head_attention(t, x[n - 3], x[n - 2], x[n - 1], p));
    }, inputs);
  });
  reg("nn_blocks", "encoder_layer", [] {
    Rng r(21);
    ParamSet<double> ps;
    auto e = EncoderLayer<double>::make(ps, "e", 8, 2, 16, r);
    jitter(ps, r, 0.1);
    auto inputs = all_params(ps);
    inputs.push_back(random({4, 8}, r));
    auto pos = pos_embed_2d<double>(2, 2, 8).table;
    const std::size_t n = inputs.size();
    return check([e, pos, n](TapeD& t, Inputs x) { return readout(t, e(t, x[n - 1], pos)); },
                 inputs);
  });
  reg("nn_blocks", "decoder_layer", [] {
    Rng r(22);
    ParamSet<double> ps;
    auto d = DecoderLayer<double>::make(ps, "d", 8, 2, 16, r);
    jitter(ps, r, 0.1);
    auto inputs = all_params(ps);
    inputs.push_back(random({3, 8}, r));  // target
    inputs.push_back(random({3, 8}, r));  // query pos
    inputs.push_back(random({4, 8}, r));  // memory keys
    inputs.push_back(random({4, 8}, r));  // memory values
    const std::size_t n = inputs.size();
    return check([d, n](TapeD& t, Inputs x) {
      return readout(t, d(t, x[n - 4], x[n - 3], x[n - 2], x[n - 1]));
    }, inputs);
  });

  // ------------------------------------------------------------ detector
  reg("detector", "det_loss", [] {
    Rng r(30);
    std::vector<GroundTruthObject> gts{{{0.1, 0.1, 0.4, 0.5}, 0}, {{0.5, 0.3, 0.9, 0.8}, 2}};
    TD logits = random({4, 3}, r, -2, 2);
    TD boxes({4, 4}, {0.27, 0.31, 0.33, 0.37, 0.68, 0.57, 0.37, 0.44, 0.5, 0.5, 0.2, 0.2, 0.2, 0.8, 0.1, 0.1},
             true);
    return check([gts](TapeD& t, Inputs x) {
      DetectionOutput<double> out{x[0], x[1]};
      return det_loss(t, out, gts).total;
    }, {logits, boxes});
  });
  reg("detector", "detector_forward_all_params", [] {
    auto cfg = tiny_model_config();
    Rng r(31);
    ParamSet<double> ps;
    Detector<double> det(cfg, ps, r);
    jitter(ps, r, 0.05);
    auto image = random({3, cfg.image_size, cfg.image_size}, r, 0, 1, false);
    std::vector<GroundTruthObject> gts{{{0.1, 0.1, 0.4, 0.5}, 0}, {{0.5, 0.3, 0.9, 0.8}, 2}};
    return check([&det, image, gts](TapeD& t, Inputs) {
      auto [out, mem] = det.forward(t, image);
      return det_loss(t, out, gts).total;
    }, all_params(ps));
  });

  // ------------------------------------------------------------ gaze_regressor
  reg("gaze_regressor", "cross_adapter", [] {
    Rng r(40);
    ParamSet<double> ps;
    auto a = CrossAdapter<double>::make(ps, "a", 8);
    jitter(ps, r, 0.1);
    auto inputs = all_params(ps);
    inputs.push_back(random({4, 8}, r));
    inputs.push_back(random({4, 8}, r));
    const std::size_t n = inputs.size();
    return check([a, n](TapeD& t, Inputs x) {
      auto m = a(t, x[n - 2], x[n - 1]);
      return add(t, readout(t, m.keys, 1), readout(t, m.values, 2));
    }, inputs);
  });
  for (auto mode : {DecoderMode::tokens, DecoderMode::learned_queries}) {
    const std::string name = "gaze_branch_" + to_string(mode);
    s.push_back({"gaze_regressor", name, [mode] {
      auto cfg = tiny_model_config();
      cfg.decoder_mode = mode;
      Rng r(41);
      ParamSet<double> ps;
      GazeRegressor<double> g(cfg, cfg.hidden, ps, r);
      jitter(ps, r, 0.05);
      auto inputs = all_params(ps);
      const std::size_t grid = cfg.grid();
      inputs.push_back(random({cfg.hidden, grid, grid}, r, 0, 1));  // scene features
      inputs.push_back(random({grid * grid, cfg.hidden}, r));       // memory keys
      inputs.push_back(random({grid * grid, cfg.hidden}, r));       // memory values
      const auto head = tiny_scene().head_box;
      auto crop = random({3, cfg.head_crop, cfg.head_crop}, r, 0, 1, false);
      auto loc = head_location_map<double>(head, cfg.image_size);
      const std::size_t n = inputs.size();
      return check([&g, crop, loc, n](TapeD& t, Inputs x) {
        auto f = g.fuse_features(t, x[n - 3], g.head_feature(t, crop), loc);
        auto enc = g.encode(t, f);
        auto mem = g.adapt(t, x[n - 2], x[n - 1]);
        return readout(t, g.predict_heatmap(t, g.decode(t, enc, &mem)));
      }, inputs);
    }});
  }

  // ------------------------------------------------------------ losses
  reg("losses", "gaze_loss", [] {
    Rng r(50);
    auto target = gt_heatmap<double>(0.4, 0.6, 1.0, 1.0, 8);
    return check([target](TapeD& t, Inputs x) { return gaze_loss(t, x[0], target); },
                 {random({8, 8}, r, 0, 1)});
  });
  reg("losses", "gaze_box_loss", [] {
    Rng r(51);
    return check([](TapeD& t, Inputs x) {
      return gaze_box_loss(t, x[0], Box{0.2, 0.3, 0.55, 0.8});
    }, {random({8, 8}, r, 0, 1)});
  });
  reg("losses", "energy_aggregation_loss", [] {
    Rng r(52);
    return check([](TapeD& t, Inputs x) {
      return energy_aggregation_loss(t, x[0], Box{0.2, 0.3, 0.55, 0.8});
    }, {random({8, 8}, r, 0.05, 1)});
  });
  reg("losses", "total_loss", [] {
    Rng r(53);
    return check([](TapeD& t, Inputs x) {
      return total_loss(t, x[0], x[1], x[2], LossWeights{1000, 10});
    }, {random({1}, r), random({1}, r), random({1}, r)});
  });

  // ------------------------------------------------------------ pipeline
  for (auto term : {BoxTerm::gaze_box, BoxTerm::energy}) {
    s.push_back({"pipeline", "end_to_end_" + to_string(term), [term] {
      return end_to_end_gradcheck(tiny_model_config(), term);
    }});
  }
  s.push_back({"pipeline", "end_to_end_gaze_to_object", [] {
    auto cfg = tiny_model_config();
    cfg.cross_direction = CrossDirection::gaze_to_object;
    return end_to_end_gradcheck(cfg, BoxTerm::gaze_box);
  }});
  return s;
}

}  // namespace transgop
