#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "transgop/errors.hpp"

namespace transgop {

enum class DecoderMode { tokens, learned_queries };
/// Which branch supplies keys/values to the other's cross-attention.
enum class CrossDirection { object_to_gaze, gaze_to_object, none };

inline std::string to_string(DecoderMode m) {
  return m == DecoderMode::tokens ? "tokens" : "learned_queries";
}
inline std::string to_string(CrossDirection d) {
  switch (d) {
    case CrossDirection::object_to_gaze: return "object_to_gaze";
    case CrossDirection::gaze_to_object: return "gaze_to_object";
    default: return "none";
  }
}
inline DecoderMode parse_decoder_mode(const std::string& s) {
  if (s == "tokens") return DecoderMode::tokens;
  if (s == "learned_queries") return DecoderMode::learned_queries;
  throw ConfigError("unknown decoder mode '" + s + "'");
}
inline CrossDirection parse_cross_direction(const std::string& s) {
  if (s == "object_to_gaze") return CrossDirection::object_to_gaze;
  if (s == "gaze_to_object") return CrossDirection::gaze_to_object;
  if (s == "none") return CrossDirection::none;
  throw ConfigError("unknown cross direction '" + s + "'");
}

/// Architecture of the detector + gaze regressor.
struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t num_classes = 6;
  std::size_t hidden = 32;  // D, shared by detector and gaze autoencoder
  std::size_t heads = 4;
  std::size_t ffn_hidden = 64;
  std::size_t num_queries = 25;
  std::vector<std::size_t> backbone_channels{8, 16};  // a final stride-2 stage outputs `hidden`
  std::size_t head_crop = 16;
  std::size_t head_channels = 16;  // head feature width C_h
  std::size_t loc_channels = 4;
  std::size_t heatmap_size = 64;
  std::size_t heatmap_channels = 8;
  DecoderMode decoder_mode = DecoderMode::tokens;
  std::size_t gaze_queries = 200;
  bool gaze_autoencoder = true;
  bool cross_adapter = true;
  CrossDirection cross_direction = CrossDirection::object_to_gaze;

  std::size_t backbone_stages() const { return backbone_channels.size() + 1; }
  std::size_t grid() const { return image_size >> backbone_stages(); }

  void validate() const {
    if (hidden == 0 || heads == 0 || hidden % heads != 0)
      throw ConfigError("model: hidden size must be divisible by heads");
    if (hidden % 4 != 0) throw ConfigError("model: hidden size must be a multiple of 4");
    if (num_classes < 1 || num_queries < 1) throw ConfigError("model: need classes and queries");
    if (grid() == 0 || (grid() << backbone_stages()) != image_size)
      throw ConfigError("model: image size must be divisible by 2^" +
                        std::to_string(backbone_stages()));
    if (backbone_stages() > 5)
      throw ConfigError("model: head-location encoder supports at most 5 stride-2 stages");
    if (head_crop < 4 || heatmap_size < 4) throw ConfigError("model: crop/heatmap too small");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"image_size", c.image_size},
       {"num_classes", c.num_classes},
       {"hidden", c.hidden},
       {"heads", c.heads},
       {"ffn_hidden", c.ffn_hidden},
       {"num_queries", c.num_queries},
       {"backbone_channels", c.backbone_channels},
       {"head_crop", c.head_crop},
       {"head_channels", c.head_channels},
       {"loc_channels", c.loc_channels},
       {"heatmap_size", c.heatmap_size},
       {"heatmap_channels", c.heatmap_channels},
       {"decoder_mode", to_string(c.decoder_mode)},
       {"gaze_queries", c.gaze_queries},
       {"gaze_autoencoder", c.gaze_autoencoder},
       {"cross_adapter", c.cross_adapter},
       {"cross_direction", to_string(c.cross_direction)}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.hidden = j.value("hidden", d.hidden);
  c.heads = j.value("heads", d.heads);
  c.ffn_hidden = j.value("ffn_hidden", d.ffn_hidden);
  c.num_queries = j.value("num_queries", d.num_queries);
  c.backbone_channels = j.value("backbone_channels", d.backbone_channels);
  c.head_crop = j.value("head_crop", d.head_crop);
  c.head_channels = j.value("head_channels", d.head_channels);
  c.loc_channels = j.value("loc_channels", d.loc_channels);
  c.heatmap_size = j.value("heatmap_size", d.heatmap_size);
  c.heatmap_channels = j.value("heatmap_channels", d.heatmap_channels);
  c.decoder_mode = parse_decoder_mode(j.value("decoder_mode", to_string(d.decoder_mode)));
  c.gaze_queries = j.value("gaze_queries", d.gaze_queries);
  c.gaze_autoencoder = j.value("gaze_autoencoder", d.gaze_autoencoder);
  c.cross_adapter = j.value("cross_adapter", d.cross_adapter);
  c.cross_direction =
      parse_cross_direction(j.value("cross_direction", to_string(d.cross_direction)));
}

}  // namespace transgop
