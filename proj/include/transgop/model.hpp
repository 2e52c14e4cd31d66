#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "transgop/detector.hpp"
#include "transgop/gaze.hpp"
#include "transgop/image.hpp"
#include "transgop/losses.hpp"
#include "transgop/synth.hpp"

namespace transgop {

/// Network inputs for one image and head box.
template <class T>
struct SceneInputs {
  Tensor<T> image;      // [3 x S x S]
  Tensor<T> head_crop;  // [3 x c x c]
  Tensor<T> head_loc;   // [1 x S x S]
  Box head_box;
};

template <class T>
SceneInputs<T> make_inputs(const Raster& raster, const Box& head, const ModelConfig& cfg) {
  if (raster.width != cfg.image_size || raster.height != cfg.image_size)
    throw ConfigError("image is " + std::to_string(raster.width) + "x" +
                      std::to_string(raster.height) + ", model expects " +
                      std::to_string(cfg.image_size));
  require_box(head, "head box");
  SceneInputs<T> in;
  in.image = raster_to_tensor<T>(raster);
  in.head_crop = crop_head(in.image, head, cfg.head_crop);
  in.head_loc = head_location_map<T>(head, cfg.image_size);
  in.head_box = head;
  return in;
}

template <class T>
struct GopOutput {
  DetectionOutput<T> detections;
  Tensor<T> heatmap;  // [S_T x S_T]
  FusedFeature<T> fused;
};

/// Detector and gaze regressor sharing one parameter set.
template <class T>
class GopModel {
 public:
  explicit GopModel(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    detector_ = Detector<T>(cfg, params_, rng);
    gaze_ = GazeRegressor<T>(cfg, cfg.hidden, params_, rng);
  }
  GopModel(const GopModel&) = delete;
  GopModel& operator=(const GopModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  const Detector<T>& detector() const { return detector_; }
  const GazeRegressor<T>& gaze() const { return gaze_; }

  GopOutput<T> forward(Tape<T>& tape, const SceneInputs<T>& in) const {
    auto enc = detector_.encode(tape, in.image);
    auto head_feat = gaze_.head_feature(tape, in.head_crop);
    GopOutput<T> out;
    out.fused = gaze_.fuse_features(tape, enc.scene_features, head_feat, in.head_loc);
    auto encoded = gaze_.encode(tape, out.fused);
    Tensor<T> decoded;
    switch (cfg_.cross_direction) {
      case CrossDirection::object_to_gaze: {
        auto mem = gaze_.adapt(tape, enc.memory.keys, enc.memory.values);
        decoded = gaze_.decode(tape, encoded, &mem);
        out.detections = detector_.decode(tape, enc.memory);
        break;
      }
      case CrossDirection::gaze_to_object: {
        auto [k, v] = gaze_.export_tokens(tape, encoded);
        auto mem = gaze_.adapt(tape, k, v);
        out.detections = detector_.decode(tape, enc.memory, mem.keys, mem.values);
        decoded = gaze_.decode(tape, encoded, nullptr);
        break;
      }
      case CrossDirection::none:
        decoded = gaze_.decode(tape, encoded, nullptr);
        out.detections = detector_.decode(tape, enc.memory);
        break;
    }
    out.heatmap = gaze_.predict_heatmap(tape, decoded);
    return out;
  }

 private:
  ModelConfig cfg_;
  ParamSet<T> params_;
  Detector<T> detector_;
  GazeRegressor<T> gaze_;
};

/// Which box-energy term accompanies the heatmap loss.
enum class BoxTerm { gaze_box, energy, none };

inline std::string to_string(BoxTerm b) {
  switch (b) {
    case BoxTerm::gaze_box: return "gaze_box";
    case BoxTerm::energy: return "energy";
    default: return "none";
  }
}
inline BoxTerm parse_box_term(const std::string& s) {
  if (s == "gaze_box") return BoxTerm::gaze_box;
  if (s == "energy") return BoxTerm::energy;
  if (s == "none") return BoxTerm::none;
  throw ConfigError("unknown box loss term '" + s + "'");
}

template <class T>
struct SampleLoss {
  Tensor<T> total, det, gaze, box;  // `box` undefined when BoxTerm::none
};

/// Full objective for one annotated sample.
template <class T>
SampleLoss<T> sample_loss(Tape<T>& tape, const GopOutput<T>& out, const SceneSample& s,
                          const LossWeights& lw, const DetLossWeights& dw, BoxTerm term,
                          double sigma = 3.0) {
  SampleLoss<T> l;
  std::vector<GroundTruthObject> targets;
  for (const auto& o : s.objects) targets.push_back({o.box, o.class_id});
  l.det = det_loss(tape, out.detections, targets, dw).total;
  const std::size_t hs = out.heatmap.dim(0);
  auto target = gt_heatmap<T>(s.gaze_point[0], s.gaze_point[1], sigma, sigma, hs);
  l.gaze = gaze_loss(tape, out.heatmap, target);
  const Box& gb = s.gaze_object().box;
  if (term == BoxTerm::gaze_box) l.box = gaze_box_loss(tape, out.heatmap, gb);
  if (term == BoxTerm::energy) l.box = energy_aggregation_loss(tape, out.heatmap, gb);
  l.total = total_loss(tape, l.det, l.gaze, l.box, lw);
  return l;
}

}  // namespace transgop
