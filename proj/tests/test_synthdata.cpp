#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "transgop/synth.hpp"

using namespace transgop;

namespace {

void expect_same(const SceneSample& a, const SceneSample& b) {
  EXPECT_EQ(a.id, b.id);
  EXPECT_EQ(a.file, b.file);
  EXPECT_EQ(a.width, b.width);
  EXPECT_EQ(a.height, b.height);
  EXPECT_EQ(a.head_box, b.head_box);
  EXPECT_EQ(a.gaze_point, b.gaze_point);
  EXPECT_EQ(a.objects, b.objects);
  EXPECT_EQ(a.gaze_object_index, b.gaze_object_index);
  EXPECT_TRUE(a.image == b.image);
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("transgop_synth_" + name);
  std::filesystem::remove_all(p);
  return p;
}

nlohmann::json one_record_doc() {
  SceneConfig cfg;
  Dataset d{default_class_names(cfg.num_classes), {generate_scene(cfg, 11)}, {}};
  d.samples[0].file = "a.ppm";
  return dataset_to_json(d);
}

}  // namespace

TEST(GenerateScene, SameSeedIsBitIdentical) {
  SceneConfig cfg;
  for (std::uint64_t seed : {0ull, 1ull, 77ull, 123456789ull}) expect_same(generate_scene(cfg, seed), generate_scene(cfg, seed));
  const auto a = generate_scene(cfg, 1), b = generate_scene(cfg, 2);
  EXPECT_FALSE(a.image == b.image && a.objects == b.objects);
}

TEST(GenerateScene, FullFillGivesNineObjects) {
  SceneConfig cfg;
  cfg.fill_probability = 1.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) EXPECT_EQ(generate_scene(cfg, seed).objects.size(), 9u);
}

TEST(GenerateScene, RejectsConfigsWithoutObjects) {
  SceneConfig cfg;
  cfg.fill_probability = 0.0;
  EXPECT_THROW(generate_scene(cfg, 0), ContractError);
  cfg = SceneConfig{};
  cfg.rows = 0;
  EXPECT_THROW(generate_scene(cfg, 0), ContractError);
  cfg = SceneConfig{};
  cfg.num_classes = 1;
  EXPECT_THROW(generate_scene(cfg, 0), ContractError);
}

TEST(GenerateScene, GazeIndexUniformOverPresentObjects) {
  SceneConfig cfg;
  // counts[n][i]: scenes with n objects whose gazed index is i.
  std::map<std::size_t, std::vector<double>> counts;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const auto s = generate_scene(cfg, seed);
    auto& c = counts[s.objects.size()];
    c.resize(s.objects.size());
    c[s.gaze_object_index] += 1;
  }
  for (const auto& [n, c] : counts) {
    double total = 0;
    for (double v : c) total += v;
    if (total < 200) continue;
    const double p = 1.0 / static_cast<double>(n);
    const double sigma = std::sqrt(total * p * (1 - p));
    for (std::size_t i = 0; i < n; ++i)
      EXPECT_NEAR(c[i], total * p, 3 * sigma) << "n=" << n << " index " << i;
  }
}

TEST(GenerateScene, EverySampleValidates) {
  SceneConfig cfg;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const auto s = generate_scene(cfg, seed);
    EXPECT_NO_THROW(validate_sample(s, cfg.num_classes, seed));
    EXPECT_EQ(s.image.width, cfg.image_size);
  }
  cfg.rows = 4;
  cfg.cols = 5;
  cfg.image_size = 96;
  for (std::uint64_t seed = 0; seed < 100; ++seed)
    EXPECT_NO_THROW(validate_sample(generate_scene(cfg, seed), cfg.num_classes, seed));
}

TEST(GenerateDataset, SeedPartitionMatchesSerialGeneration) {
  SceneConfig cfg;
  const auto serial = generate_dataset(cfg, 60, 500);
  // Three workers with disjoint seed ranges.
  std::vector<SceneSample> merged;
  for (std::uint64_t start : {500ull, 520ull, 540ull}) {
    auto part = generate_dataset(cfg, 20, start);
    for (std::size_t i = 0; i < part.size(); ++i) part[i].id = static_cast<int>(start - 500 + i);
    merged.insert(merged.end(), part.begin(), part.end());
  }
  ASSERT_EQ(merged.size(), serial.size());
  for (std::size_t i = 0; i < serial.size(); ++i) expect_same(serial[i], merged[i]);
}

TEST(Render, ObjectCentersCarryClassColor) {
  SceneConfig cfg;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto s = generate_scene(cfg, seed);
    for (std::size_t k = 0; k < s.objects.size(); ++k) {
      const auto& o = s.objects[k];
      bool covered = false;
      for (std::size_t j = k + 1; j < s.objects.size(); ++j) {
        const auto& b = s.objects[j].box;
        const auto [cx, cy] = o.box.center();
        covered |= b.contains(cx, cy);
      }
      if (covered) continue;
      const auto [cx, cy] = o.box.center();
      const auto px = static_cast<std::size_t>(cx * 64), py = static_cast<std::size_t>(cy * 64);
      EXPECT_EQ(s.image.at(px, py), class_color(o.class_id));
    }
  }
}

TEST(Render, EmptySceneIsUniformBackground) {
  SceneSample s;
  const auto r = render(s, 48);
  ASSERT_EQ(r.width, 48u);
  for (std::size_t y = 0; y < 48; ++y)
    for (std::size_t x = 0; x < 48; ++x) ASSERT_EQ(r.at(x, y), kBackground);
  EXPECT_THROW(render(s, 31), ContractError);
}

TEST(Render, LaterObjectIsDrawnOnTop) {
  SceneSample s;
  s.objects = {{{0.1, 0.1, 0.6, 0.6}, 0}, {{0.4, 0.4, 0.9, 0.9}, 1}};
  auto r = render(s, 64);
  EXPECT_EQ(r.at(32, 32), class_color(1));  // overlap
  EXPECT_EQ(r.at(12, 12), class_color(0));
  EXPECT_EQ(r.at(50, 50), class_color(1));
  EXPECT_EQ(r.at(2, 60), kBackground);
  std::swap(s.objects[0], s.objects[1]);
  r = render(s, 64);
  EXPECT_EQ(r.at(32, 32), class_color(0));
}

TEST(Render, PixelCenterContainment) {
  SceneSample s;
  // Edges at 10.5 and 20.5 pixels: columns 10..19 have centers inside.
  s.objects = {{{10.5 / 64, 10.5 / 64, 20.5 / 64, 20.5 / 64}, 2}};
  const auto r = render(s, 64);
  for (std::size_t x = 8; x < 23; ++x) {
    const bool inside = x >= 10 && x < 20;
    EXPECT_EQ(r.at(x, 15) == class_color(2), inside) << x;
  }
}

TEST(Render, HeadDiscIsDistinctFromEveryClass) {
  SceneConfig cfg;
  const auto s = generate_scene(cfg, 9);
  const auto [hx, hy] = s.head_center();
  const auto c = s.image.at(static_cast<std::size_t>(hx * 64), static_cast<std::size_t>(hy * 64));
  EXPECT_TRUE(c == kHeadSkin || c == kHeadPupil);
  for (int k = 0; k < 12; ++k) {
    EXPECT_NE(class_color(k), kHeadSkin);
    EXPECT_NE(class_color(k), kHeadPupil);
    EXPECT_NE(class_color(k), kBackground);
  }
}

TEST(Annotations, ExportImportRoundTripIsIdentity) {
  SceneConfig cfg;
  Dataset d{default_class_names(cfg.num_classes), generate_dataset(cfg, 25, 40), {}};
  const auto dir = temp_dir("roundtrip");
  save_dataset(d, dir);
  auto back = load_annotations(dir / "annotations.json");
  EXPECT_EQ(back.classes, d.classes);
  ASSERT_EQ(back.samples.size(), d.samples.size());
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    EXPECT_TRUE(back.samples[i].image.empty());
    ensure_raster(back, back.samples[i]);
    expect_same(back.samples[i], d.samples[i]);
  }
  std::filesystem::remove_all(dir);
}

TEST(Annotations, GazePointOutsideGazeBoxIsValidationError) {
  auto doc = one_record_doc();
  auto& im = doc["images"][0];
  const auto idx = im["gaze_object_index"].get<std::size_t>();
  const auto box = im["objects"][idx]["box"];
  im["gaze_point"] = {box[2].get<double>() + 0.01 > 1 ? box[0].get<double>() - 0.01 : box[2].get<double>() + 0.01,
                      box[1].get<double>()};
  try {
    dataset_from_json(doc);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("record 0"), std::string::npos);
  }
}

TEST(Annotations, OtherInvariantViolations) {
  auto base = one_record_doc();
  auto doc = base;
  doc["images"][0]["objects"][0]["class_id"] = 99;
  EXPECT_THROW(dataset_from_json(doc), ValidationError);
  doc = base;
  doc["images"][0]["gaze_object_index"] = 50;
  EXPECT_THROW(dataset_from_json(doc), ValidationError);
  doc = base;
  doc["images"][0]["head_box"] = doc["images"][0]["objects"][0]["box"];
  EXPECT_THROW(dataset_from_json(doc), ValidationError);
  doc = base;
  doc["images"][0]["objects"][0]["box"] = {0.5, 0.5, 1.2, 0.9};
  EXPECT_THROW(dataset_from_json(doc), ValidationError);
  doc = base;
  doc["images"][0]["objects"] = nlohmann::json::array();
  EXPECT_THROW(dataset_from_json(doc), ValidationError);
}

TEST(Annotations, SchemaViolationsNameRecordAndField) {
  auto base = one_record_doc();
  auto doc = base;
  doc.erase("classes");
  EXPECT_THROW(dataset_from_json(doc), ParseError);

  doc = base;
  doc["images"].push_back(doc["images"][0]);
  doc["images"][1].erase("head_box");
  try {
    dataset_from_json(doc);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("record 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("head_box"), std::string::npos) << msg;
  }

  doc = base;
  doc["images"][0]["gaze_point"] = {0.5};
  EXPECT_THROW(dataset_from_json(doc), ParseError);
  doc = base;
  doc["images"][0]["objects"][0]["box"] = "nope";
  EXPECT_THROW(dataset_from_json(doc), ParseError);

  const auto dir = temp_dir("bad");
  std::filesystem::create_directories(dir);
  { std::ofstream(dir / "annotations.json") << "{ not json"; }
  EXPECT_THROW(load_annotations(dir / "annotations.json"), ParseError);
  EXPECT_THROW(load_annotations(dir / "missing.json"), ParseError);
  std::filesystem::remove_all(dir);
}

TEST(SceneConfigJson, RoundTrip) {
  SceneConfig c;
  c.rows = 4;
  c.color_shift = 3;
  c.gaze_jitter = 0.1;
  nlohmann::json j = c;
  const auto back = j.get<SceneConfig>();
  EXPECT_EQ(back.rows, 4u);
  EXPECT_EQ(back.color_shift, 3);
  EXPECT_EQ(back.gaze_jitter, 0.1);
}
