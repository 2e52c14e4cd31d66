#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "transgop/boxes.hpp"
#include "transgop/image.hpp"

namespace transgop {

struct SceneObject {
  Box box;
  int class_id = 0;
  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

/// One annotated scene. `image` may be empty for annotation-only records.
struct SceneSample {
  int id = 0;
  std::string file;
  std::size_t width = 0, height = 0;
  Raster image;
  Box head_box;
  std::array<double, 2> gaze_point{};
  std::vector<SceneObject> objects;
  std::size_t gaze_object_index = 0;

  const SceneObject& gaze_object() const { return objects.at(gaze_object_index); }
  std::array<double, 2> head_center() const { return head_box.center(); }
};

/// Shelf-grid retail scene generator parameters.
struct SceneConfig {
  std::size_t rows = 3;
  std::size_t cols = 3;
  std::size_t num_classes = 6;
  double fill_probability = 0.8;
  std::size_t image_size = 64;
  double shelf_margin = 0.16;   // shelf region [margin, 1-margin] x [0.06, 1-margin-0.1]
  double head_radius = 0.075;   // normalized
  double size_min = 0.55;       // object extent as a fraction of its slot
  double size_max = 0.85;
  double position_jitter = 1.0;  // fraction of free slot space used for offsets
  double gaze_jitter = 0.3;      // fraction of half-extent
  int color_shift = 0;           // rotates the class palette (distribution shift)

  void validate() const {
    if (num_classes < 2) throw ContractError("scene config: need at least 2 classes");
    if (rows == 0 || cols == 0 || !(fill_probability > 0.0))
      throw ContractError("scene config admits scenes without objects");
    if (fill_probability > 1.0) throw ContractError("scene config: fill probability > 1");
    if (image_size < 32) throw ContractError("scene config: image size must be >= 32");
    if (!(size_min > 0 && size_min <= size_max && size_max <= 1))
      throw ContractError("scene config: object size range must satisfy 0 < min <= max <= 1");
  }

  struct Region {
    double x1, y1, x2, y2;
  };
  Region shelf() const { return {shelf_margin, 0.06, 1.0 - shelf_margin, 1.0 - shelf_margin - 0.1}; }
};

inline void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = {{"rows", c.rows},
       {"cols", c.cols},
       {"num_classes", c.num_classes},
       {"fill_probability", c.fill_probability},
       {"image_size", c.image_size},
       {"shelf_margin", c.shelf_margin},
       {"head_radius", c.head_radius},
       {"size_min", c.size_min},
       {"size_max", c.size_max},
       {"position_jitter", c.position_jitter},
       {"gaze_jitter", c.gaze_jitter},
       {"color_shift", c.color_shift}};
}

inline void from_json(const nlohmann::json& j, SceneConfig& c) {
  SceneConfig d;
  c.rows = j.value("rows", d.rows);
  c.cols = j.value("cols", d.cols);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.fill_probability = j.value("fill_probability", d.fill_probability);
  c.image_size = j.value("image_size", d.image_size);
  c.shelf_margin = j.value("shelf_margin", d.shelf_margin);
  c.head_radius = j.value("head_radius", d.head_radius);
  c.size_min = j.value("size_min", d.size_min);
  c.size_max = j.value("size_max", d.size_max);
  c.position_jitter = j.value("position_jitter", d.position_jitter);
  c.gaze_jitter = j.value("gaze_jitter", d.gaze_jitter);
  c.color_shift = j.value("color_shift", d.color_shift);
}

using Color = std::array<std::uint8_t, 3>;

inline constexpr Color kBackground{96, 96, 104};
inline constexpr Color kHeadSkin{236, 200, 168};
inline constexpr Color kHeadPupil{20, 20, 20};

inline Color class_color(int class_id, int shift = 0) {
  static constexpr std::array<Color, 12> palette{{{220, 40, 40},
                                                  {40, 180, 60},
                                                  {50, 80, 230},
                                                  {240, 220, 40},
                                                  {200, 60, 220},
                                                  {40, 210, 220},
                                                  {250, 140, 20},
                                                  {120, 60, 20},
                                                  {150, 230, 120},
                                                  {255, 255, 255},
                                                  {110, 40, 160},
                                                  {0, 110, 110}}};
  const auto n = static_cast<int>(palette.size());
  return palette[static_cast<std::size_t>(((class_id + shift) % n + n) % n)];
}

/// Rasterizes a scene: background, objects in index order (later on top),
/// then the head disc with a pupil offset toward the gaze point. A pixel is
/// painted when its center lies inside the shape.
inline Raster render(const SceneSample& s, std::size_t size, int color_shift = 0) {
  if (size < 32) throw ContractError("render: size must be >= 32");
  Raster r(size, size, kBackground);
  const double inv = 1.0 / static_cast<double>(size);
  for (const auto& obj : s.objects) {
    const Color c = class_color(obj.class_id, color_shift);
    for (std::size_t y = 0; y < size; ++y) {
      const double py = (static_cast<double>(y) + 0.5) * inv;
      if (py < obj.box.y1 || py >= obj.box.y2) continue;
      for (std::size_t x = 0; x < size; ++x) {
        const double px = (static_cast<double>(x) + 0.5) * inv;
        if (px >= obj.box.x1 && px < obj.box.x2) r.set(x, y, c);
      }
    }
  }
  if (s.head_box.valid()) {
    const auto [hx, hy] = s.head_center();
    const double rad = 0.5 * std::min(s.head_box.width(), s.head_box.height());
    double dx = s.gaze_point[0] - hx, dy = s.gaze_point[1] - hy;
    const double len = std::hypot(dx, dy);
    if (len > 0) {
      dx /= len;
      dy /= len;
    }
    const double pcx = hx + 0.5 * rad * dx, pcy = hy + 0.5 * rad * dy;
    const double prad = 0.45 * rad;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double px = (static_cast<double>(x) + 0.5) * inv;
        const double py = (static_cast<double>(y) + 0.5) * inv;
        if (std::hypot(px - hx, py - hy) <= rad) {
          const bool pupil = std::hypot(px - pcx, py - pcy) <= prad;
          r.set(x, y, pupil ? kHeadPupil : kHeadSkin);
        }
      }
  }
  return r;
}

/// Deterministic scene from (cfg, seed).
inline SceneSample generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + 0x2545F4914F6CDD1DULL);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * u01(rng); };

  SceneSample s;
  s.id = static_cast<int>(seed & 0x7FFFFFFF);
  s.width = s.height = cfg.image_size;

  const auto shelf = cfg.shelf();
  const double sw = (shelf.x2 - shelf.x1) / static_cast<double>(cfg.cols);
  const double sh = (shelf.y2 - shelf.y1) / static_cast<double>(cfg.rows);
  std::vector<std::size_t> slots;
  for (std::size_t i = 0; i < cfg.rows * cfg.cols; ++i)
    if (u01(rng) < cfg.fill_probability) slots.push_back(i);
  if (slots.empty()) slots.push_back(static_cast<std::size_t>(u01(rng) * cfg.rows * cfg.cols) %
                                     (cfg.rows * cfg.cols));
  for (std::size_t slot : slots) {
    const std::size_t row = slot / cfg.cols, col = slot % cfg.cols;
    const double w = sw * uniform(cfg.size_min, cfg.size_max);
    const double h = sh * uniform(cfg.size_min, cfg.size_max);
    const double cx = shelf.x1 + (static_cast<double>(col) + 0.5) * sw +
                      uniform(-1, 1) * cfg.position_jitter * 0.5 * (sw - w);
    const double cy = shelf.y1 + (static_cast<double>(row) + 0.5) * sh +
                      uniform(-1, 1) * cfg.position_jitter * 0.5 * (sh - h);
    const int cls = static_cast<int>(static_cast<std::size_t>(u01(rng) * cfg.num_classes) %
                                     cfg.num_classes);
    s.objects.push_back({{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, cls});
  }
  s.gaze_object_index =
      static_cast<std::size_t>(u01(rng) * static_cast<double>(s.objects.size())) % s.objects.size();
  const Box& g = s.objects[s.gaze_object_index].box;
  const auto [gcx, gcy] = g.center();
  const double gx = std::clamp(gcx + uniform(-1, 1) * cfg.gaze_jitter * 0.5 * g.width(), g.x1, g.x2);
  const double gy = std::clamp(gcy + uniform(-1, 1) * cfg.gaze_jitter * 0.5 * g.height(), g.y1, g.y2);
  s.gaze_point = {gx, gy};

  // Head on the left, right or bottom border band.
  const double r = cfg.head_radius;
  const double band = shelf.x1;
  double hx = 0, hy = 0;
  switch (static_cast<int>(u01(rng) * 3) % 3) {
    case 0:
      hx = uniform(r + 0.01, std::max(r + 0.01, band - r - 0.005));
      hy = uniform(0.2, 0.85);
      break;
    case 1:
      hx = 1.0 - uniform(r + 0.01, std::max(r + 0.01, band - r - 0.005));
      hy = uniform(0.2, 0.85);
      break;
    default:
      hx = uniform(0.12, 0.88);
      hy = uniform(std::min(1.0 - r - 0.01, shelf.y2 + r + 0.01), 1.0 - r - 0.01);
      break;
  }
  s.head_box = {hx - r, hy - r, hx + r, hy + r};
  s.image = render(s, cfg.image_size, cfg.color_shift);
  return s;
}

inline std::vector<SceneSample> generate_dataset(const SceneConfig& cfg, std::size_t count,
                                                 std::uint64_t first_seed) {
  std::vector<SceneSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(generate_scene(cfg, first_seed + i));
    out.back().id = static_cast<int>(i);
  }
  return out;
}

// ----------------------------------------------------------- annotation files

struct Dataset {
  std::vector<std::string> classes;
  std::vector<SceneSample> samples;
  std::filesystem::path root;  // directory rasters are resolved against
};

inline std::vector<std::string> default_class_names(std::size_t n) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i) names.push_back("class_" + std::to_string(i));
  return names;
}

/// Checks the SceneSample invariants; throws ValidationError naming the record.
inline void validate_sample(const SceneSample& s, std::size_t num_classes, std::size_t index) {
  auto fail = [&](const std::string& what) {
    throw ValidationError("record " + std::to_string(index) + ": " + what);
  };
  auto in_unit = [](const Box& b) {
    return b.x1 >= 0 && b.y1 >= 0 && b.x2 <= 1 && b.y2 <= 1 && b.valid();
  };
  if (!in_unit(s.head_box)) fail("head_box outside [0,1] or degenerate");
  if (s.objects.empty()) fail("no objects");
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const auto& o = s.objects[i];
    if (!in_unit(o.box)) fail("objects[" + std::to_string(i) + "].box outside [0,1] or degenerate");
    if (o.class_id < 0 || static_cast<std::size_t>(o.class_id) >= num_classes)
      fail("objects[" + std::to_string(i) + "].class_id not in class table");
    if (o.box == s.head_box) fail("head_box equals an object box");
  }
  if (s.gaze_object_index >= s.objects.size()) fail("gaze_object_index out of range");
  const auto [gx, gy] = s.gaze_point;
  if (!(gx >= 0 && gx <= 1 && gy >= 0 && gy <= 1)) fail("gaze_point outside [0,1]");
  if (!s.gaze_object().box.contains(gx, gy)) fail("gaze_point outside the gaze object box");
}

inline nlohmann::json sample_to_json(const SceneSample& s) {
  using nlohmann::json;
  auto box = [](const Box& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); };
  json objs = json::array();
  for (const auto& o : s.objects) objs.push_back({{"box", box(o.box)}, {"class_id", o.class_id}});
  return {{"id", s.id},
          {"file", s.file},
          {"width", s.width},
          {"height", s.height},
          {"head_box", box(s.head_box)},
          {"gaze_point", json::array({s.gaze_point[0], s.gaze_point[1]})},
          {"gaze_object_index", s.gaze_object_index},
          {"objects", objs}};
}

inline nlohmann::json dataset_to_json(const Dataset& d) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& s : d.samples) images.push_back(sample_to_json(s));
  return {{"classes", d.classes}, {"images", images}};
}

namespace detail {

inline const nlohmann::json& field(const nlohmann::json& obj, const char* name, std::size_t index) {
  if (!obj.is_object() || !obj.contains(name))
    throw ParseError("record " + std::to_string(index) + ": missing field '" + name + "'");
  return obj.at(name);
}

inline Box parse_box(const nlohmann::json& j, const std::string& name, std::size_t index) {
  if (!j.is_array() || j.size() != 4)
    throw ParseError("record " + std::to_string(index) + ": field '" + name +
                     "' must be [x1,y1,x2,y2]");
  for (auto& v : j)
    if (!v.is_number())
      throw ParseError("record " + std::to_string(index) + ": field '" + name + "' not numeric");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

template <class V>
V parse_number(const nlohmann::json& j, const std::string& name, std::size_t index) {
  if (!j.is_number())
    throw ParseError("record " + std::to_string(index) + ": field '" + name + "' not numeric");
  return j.get<V>();
}

}  // namespace detail

inline SceneSample sample_from_json(const nlohmann::json& im, std::size_t i) {
  using detail::field;
  SceneSample s;
  s.id = detail::parse_number<int>(field(im, "id", i), "id", i);
  const auto& file = field(im, "file", i);
  if (!file.is_string()) throw ParseError("record " + std::to_string(i) + ": field 'file' not a string");
  s.file = file.get<std::string>();
  s.width = detail::parse_number<std::size_t>(field(im, "width", i), "width", i);
  s.height = detail::parse_number<std::size_t>(field(im, "height", i), "height", i);
  s.head_box = detail::parse_box(field(im, "head_box", i), "head_box", i);
  const auto& gp = field(im, "gaze_point", i);
  if (!gp.is_array() || gp.size() != 2 || !gp[0].is_number() || !gp[1].is_number())
    throw ParseError("record " + std::to_string(i) + ": field 'gaze_point' must be [x,y]");
  s.gaze_point = {gp[0].get<double>(), gp[1].get<double>()};
  s.gaze_object_index = detail::parse_number<std::size_t>(field(im, "gaze_object_index", i),
                                                          "gaze_object_index", i);
  const auto& objs = field(im, "objects", i);
  if (!objs.is_array()) throw ParseError("record " + std::to_string(i) + ": field 'objects' not a list");
  for (const auto& o : objs) {
    SceneObject so;
    so.box = detail::parse_box(field(o, "box", i), "objects.box", i);
    so.class_id = detail::parse_number<int>(field(o, "class_id", i), "objects.class_id", i);
    s.objects.push_back(so);
  }
  return s;
}

/// Parses and validates an annotation document. Rasters are not loaded.
inline Dataset dataset_from_json(const nlohmann::json& doc) {
  Dataset d;
  if (!doc.is_object() || !doc.contains("classes"))
    throw ParseError("annotation file: missing field 'classes'");
  const auto& cls = doc.at("classes");
  if (!cls.is_array()) throw ParseError("annotation file: field 'classes' must be a list");
  for (auto& c : cls) {
    if (!c.is_string()) throw ParseError("annotation file: class names must be strings");
    d.classes.push_back(c.get<std::string>());
  }
  if (!doc.contains("images") || !doc.at("images").is_array())
    throw ParseError("annotation file: missing field 'images'");
  std::size_t i = 0;
  for (const auto& im : doc.at("images")) {
    auto s = sample_from_json(im, i);
    validate_sample(s, d.classes.size(), i);
    d.samples.push_back(std::move(s));
    ++i;
  }
  return d;
}

inline Dataset load_annotations(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open annotation file " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("annotation file: ") + e.what());
  }
  auto d = dataset_from_json(doc);
  d.root = path.parent_path();
  return d;
}

/// Loads the raster of a sample from the dataset directory if not present.
inline const Raster& ensure_raster(const Dataset& d, SceneSample& s) {
  if (s.image.empty()) s.image = read_ppm((d.root / s.file).string());
  return s.image;
}

/// Writes annotations.json plus one P6 raster per sample into `dir`.
inline void save_dataset(Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (auto& s : d.samples) {
    if (s.file.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "%06d.ppm", s.id);
      s.file = name;
    }
    if (!s.image.empty()) write_ppm((dir / s.file).string(), s.image);
  }
  std::ofstream os(dir / "annotations.json");
  if (!os) throw ConfigError("cannot write " + (dir / "annotations.json").string());
  os << dataset_to_json(d).dump(1) << '\n';
  d.root = dir;
}

}  // namespace transgop
