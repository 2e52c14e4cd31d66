#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "transgop/gradcheck_suite.hpp"
#include "transgop/train.hpp"

using namespace transgop;
using TD = Tensor<double>;

namespace {

TD rand_tensor(Shape s, Rng& rng, double lo = -1, double hi = 1, bool grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = u(rng);
  return TD(std::move(s), std::move(v), grad);
}

void zero_param(ParamSet<double>& ps, const std::string& name) {
  auto t = ps.get(name);
  std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
}

struct Tiny {
  ModelConfig cfg = tiny_model_config();
  SceneSample scene = tiny_scene();
};

}  // namespace

TEST(HeadLocation, BinaryMapOverHeadBox) {
  auto m = head_location_map<double>({0.25, 0.5, 0.5, 1.0}, 8);
  ASSERT_EQ(m.shape(), (Shape{1, 8, 8}));
  double ones = 0;
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      const double v = m.data()[y * 8 + x];
      EXPECT_TRUE(v == 0.0 || v == 1.0);
      EXPECT_EQ(v, (x >= 2 && x < 4 && y >= 4) ? 1.0 : 0.0);
      ones += v;
    }
  EXPECT_EQ(ones, 8.0);
  EXPECT_THROW(head_location_map<double>({0.51, 0.51, 0.52, 0.52}, 8), ContractError);
}

TEST(Fusion, ZeroInitAttentionIsUniform) {
  Tiny t;
  GopModel<double> model(t.cfg, 1);
  zero_param(model.params(), "gaze.fuse.w");
  zero_param(model.params(), "gaze.fuse.b");
  Rng rng(2);
  const std::size_t g = t.cfg.grid(), hw = g * g;
  auto scene = rand_tensor({t.cfg.hidden, g, g}, rng);
  auto in = tiny_inputs<double>(t.cfg, t.scene.head_box, 3);
  Tape<double> tape;
  auto hf = model.gaze().head_feature(tape, in.head_crop);
  auto f = model.gaze().fuse_features(tape, scene, hf, in.head_loc);
  for (double a : f.attention.data()) EXPECT_NEAR(a, 1.0 / double(hw), 1e-15);
  for (std::size_t i = 0; i < scene.numel(); ++i)
    EXPECT_NEAR(f.fused.data()[i], scene.data()[i] / double(hw), 1e-15);
}

TEST(Fusion, OneHotAttentionKeepsOnePosition) {
  Tiny t;
  GopModel<double> model(t.cfg, 1);
  zero_param(model.params(), "gaze.fuse.w");
  auto b = model.params().get("gaze.fuse.b");
  const std::size_t g = t.cfg.grid(), hw = g * g, p = 4;
  for (std::size_t i = 0; i < hw; ++i) b.mutable_data()[i] = i == p ? 0.0 : -1e3;
  Rng rng(4);
  auto scene = rand_tensor({t.cfg.hidden, g, g}, rng, 0.5, 1.0);
  auto in = tiny_inputs<double>(t.cfg, t.scene.head_box, 3);
  Tape<double> tape;
  auto f = model.gaze().fuse_features(tape, scene, model.gaze().head_feature(tape, in.head_crop), in.head_loc);
  for (std::size_t c = 0; c < t.cfg.hidden; ++c)
    for (std::size_t i = 0; i < hw; ++i) {
      const double v = f.fused.data()[c * hw + i];
      if (i == p) EXPECT_NEAR(v, scene.data()[c * hw + i], 1e-12);
      else EXPECT_EQ(v, 0.0);
    }
}

TEST(Fusion, RejectsEmptyHeadMapAndWrongSceneShape) {
  Tiny t;
  GopModel<double> model(t.cfg, 1);
  Rng rng(5);
  const std::size_t g = t.cfg.grid();
  auto in = tiny_inputs<double>(t.cfg, t.scene.head_box, 3);
  Tape<double> tape;
  auto hf = model.gaze().head_feature(tape, in.head_crop);
  auto empty = TD::zeros({1, t.cfg.image_size, t.cfg.image_size});
  EXPECT_THROW(model.gaze().fuse_features(tape, rand_tensor({t.cfg.hidden, g, g}, rng), hf, empty),
               ContractError);
  EXPECT_THROW(model.gaze().fuse_features(tape, rand_tensor({t.cfg.hidden, g + 1, g}, rng), hf, in.head_loc),
               ShapeError);
}

TEST(GazeEncode, TokenCountAndDeterminism) {
  Tiny t;
  GopModel<double> model(t.cfg, 1);
  auto in = tiny_inputs<double>(t.cfg, t.scene.head_box, 3);
  Tape<double> a(false), b(false);
  auto enc = model.detector().encode(a, in.image);
  auto f = model.gaze().fuse_features(a, enc.scene_features, model.gaze().head_feature(a, in.head_crop),
                                      in.head_loc);
  auto x = model.gaze().encode(a, f), y = model.gaze().encode(b, f);
  EXPECT_EQ(x.shape(), (Shape{t.cfg.grid() * t.cfg.grid(), t.cfg.hidden}));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x.data()[i], y.data()[i]);
}

TEST(GazeEncode, EncoderIsPermutationEquivariantWithoutPositions) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    ParamSet<double> ps;
    auto enc = EncoderLayer<double>::make(ps, "e", 8, 2, 16, rng);
    auto x = rand_tensor({9, 8}, rng);
    std::vector<std::size_t> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tape<double> tape;
    auto zero_pos = TD::zeros({9, 8});
    auto y = enc(tape, x, zero_pos);
    auto yp = enc(tape, index_rows(tape, x, perm), zero_pos);
    for (std::size_t i = 0; i < 9; ++i)
      for (std::size_t c = 0; c < 8; ++c)
        ASSERT_NEAR(yp.data()[i * 8 + c], y.data()[perm[i] * 8 + c], 1e-10);
  }
}

TEST(CrossAdapter, IdentityOnNormalizedTokensAndShape) {
  Rng rng(7);
  ParamSet<double> ps;
  auto ad = CrossAdapter<double>::make(ps, "ad", 8);
  Tape<double> tape;
  auto ln = LayerNorm<double>::make(ps, "ln", 8);
  auto k = ln(tape, rand_tensor({5, 8}, rng)), v = ln(tape, rand_tensor({5, 8}, rng));
  auto out = ad(tape, k, v);
  EXPECT_EQ(out.length(), 5u);
  // Re-normalizing already normalized tokens is the identity up to the LayerNorm epsilon.
  for (std::size_t i = 0; i < k.numel(); ++i) {
    EXPECT_NEAR(out.keys.data()[i], k.data()[i], 1e-4);
    EXPECT_NEAR(out.values.data()[i], v.data()[i], 1e-4);
  }
  EXPECT_THROW(ad(tape, rand_tensor({5, 4}, rng), rand_tensor({5, 4}, rng)), ConfigError);
}

TEST(CrossAdapter, Gradcheck) {
  Rng rng(8);
  ParamSet<double> ps;
  auto ad = CrossAdapter<double>::make(ps, "ad", 8);
  std::normal_distribution<double> n(0, 0.1);
  for (auto& [_, t] : ps.items())
    for (auto& x : t.mutable_data()) x += n(rng);
  std::vector<TD> inputs{rand_tensor({4, 8}, rng, -1, 1, true), rand_tensor({4, 8}, rng, -1, 1, true)};
  for (auto& [_, t] : ps.items()) inputs.push_back(t);
  auto w = rand_tensor({4, 8}, rng);
  auto rep = gradcheck(
      [&](Tape<double>& t, std::span<TD> x) {
        auto m = ad(t, x[0], x[1]);
        return sum(t, mul(t, mul(t, m.keys, m.values), w));
      },
      inputs);
  EXPECT_TRUE(rep.passed) << rep.diagnostic;
}

TEST(GazeDecode, ZeroValuesLeaveOnlyResidualPath) {
  Tiny t;
  GopModel<double> model(t.cfg, 1);  // attention biases start at zero
  Rng rng(9);
  const std::size_t hw = t.cfg.grid() * t.cfg.grid();
  auto encoded = rand_tensor({hw, t.cfg.hidden}, rng);
  AdaptedMemory<double> mem{rand_tensor({hw, t.cfg.hidden}, rng), TD::zeros({hw, t.cfg.hidden})};
  Tape<double> tape;
  auto with = model.gaze().decode(tape, encoded, &mem);
  auto without = model.gaze().decode(tape, encoded, nullptr);
  // Only the extra layer norm of already-normalized tokens separates the two.
  for (std::size_t i = 0; i < with.numel(); ++i) EXPECT_NEAR(with.data()[i], without.data()[i], 1e-4);
}

TEST(GazeDecode, JointMemoryPermutationInvariance) {
  for (auto mode : {DecoderMode::tokens, DecoderMode::learned_queries}) {
    Tiny t;
    t.cfg.decoder_mode = mode;
    GopModel<double> model(t.cfg, 2);
    Rng rng(10);
    const std::size_t hw = t.cfg.grid() * t.cfg.grid();
    auto encoded = rand_tensor({hw, t.cfg.hidden}, rng);
    AdaptedMemory<double> mem{rand_tensor({7, t.cfg.hidden}, rng), rand_tensor({7, t.cfg.hidden}, rng)};
    std::vector<std::size_t> perm{3, 0, 6, 1, 5, 2, 4};
    Tape<double> tape;
    AdaptedMemory<double> pm{index_rows(tape, mem.keys, perm), index_rows(tape, mem.values, perm)};
    auto a = model.gaze().decode(tape, encoded, &mem);
    auto b = model.gaze().decode(tape, encoded, &pm);
    ASSERT_EQ(a.shape(), (Shape{hw, t.cfg.hidden}));
    for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(a.data()[i], b.data()[i], 1e-10);
  }
}

TEST(GazeDecode, GradientReachesDetectorMemory) {
  Tiny t;
  GopModel<double> model(t.cfg, 3);
  Rng rng(11);
  const std::size_t hw = t.cfg.grid() * t.cfg.grid();
  auto encoded = rand_tensor({hw, t.cfg.hidden}, rng);
  auto keys = rand_tensor({hw, t.cfg.hidden}, rng), values = rand_tensor({hw, t.cfg.hidden}, rng);
  auto readout = [&](const TD& k) {
    Tape<double> tape(false);
    auto mem = model.gaze().adapt(tape, k, values);
    auto out = model.gaze().decode(tape, encoded, &mem);
    double s = 0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += out.data()[i] * double(i % 7);
    return s;
  };
  const double h = 1e-5;
  auto kp = keys.clone(), km = keys.clone();
  kp.mutable_data()[5] += h;
  km.mutable_data()[5] -= h;
  EXPECT_GT(std::abs((readout(kp) - readout(km)) / (2 * h)), 1e-9);
}

TEST(Heatmap, ShapeAndRangeForAnyGrid) {
  for (std::size_t img : {32, 64}) {
    ModelConfig c;
    c.image_size = img;
    c.hidden = 8;
    c.heads = 2;
    c.ffn_hidden = 8;
    c.num_queries = 4;
    GopModel<double> model(c, 4);
    Rng rng(12);
    const std::size_t hw = c.grid() * c.grid();
    Tape<double> tape(false);
    auto hm = model.gaze().predict_heatmap(tape, rand_tensor({hw, c.hidden}, rng, -3, 3));
    ASSERT_EQ(hm.shape(), (Shape{64, 64}));
    for (double v : hm.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(GazeBranch, EndToEndGradcheckBothDecoderModes) {
  for (auto mode : {DecoderMode::tokens, DecoderMode::learned_queries}) {
    auto cfg = tiny_model_config();
    cfg.decoder_mode = mode;
    auto rep = end_to_end_gradcheck(cfg, BoxTerm::gaze_box);
    EXPECT_TRUE(rep.passed) << to_string(mode) << ": " << rep.diagnostic;
  }
}

TEST(GazeBranch, CrossAttentionGradcheckWithFourMemoryTokens) {
  // Memory shorter than the gaze grid: 9 gaze tokens attend into 4 tokens.
  auto cfg = tiny_model_config();
  GopModel<double> model(cfg, 5);
  Rng rng(13);
  gc::jitter(model.params(), rng, 0.05);
  std::vector<TD> inputs{rand_tensor({9, 8}, rng, -1, 1, true), rand_tensor({4, 8}, rng, -1, 1, true),
                         rand_tensor({4, 8}, rng, -1, 1, true)};
  for (auto& [_, t] : model.params().items()) inputs.push_back(t);
  auto w = rand_tensor({8, 8}, rng);
  auto rep = gradcheck(
      [&](Tape<double>& t, std::span<TD> x) {
        auto mem = model.gaze().adapt(t, x[1], x[2]);
        auto hm = model.gaze().predict_heatmap(t, model.gaze().decode(t, x[0], &mem));
        return sum(t, mul(t, hm, w));
      },
      inputs);
  EXPECT_TRUE(rep.passed) << rep.diagnostic;
}

TEST(GazeBranch, ZeroedMemoryStillTrains) {
  auto cfg = tiny_model_config();
  cfg.heatmap_size = 16;
  GopModel<double> model(cfg, 6);
  auto s = tiny_scene();
  auto in = tiny_inputs<double>(cfg, s.head_box, 7);
  auto target = gt_heatmap<double>(s.gaze_point[0], s.gaze_point[1], 2.0, 2.0, 16);
  const std::size_t hw = cfg.grid() * cfg.grid();
  AdaptedMemory<double> zero{TD::zeros({hw, cfg.hidden}), TD::zeros({hw, cfg.hidden})};
  TrainConfig tc;
  AdamW<double> opt(model.params());
  double first = 0, last = 0;
  for (int step = 0; step < 60; ++step) {
    Tape<double> tape;
    auto enc = model.detector().encode(tape, in.image);
    auto f = model.gaze().fuse_features(tape, enc.scene_features,
                                        model.gaze().head_feature(tape, in.head_crop), in.head_loc);
    auto hm = model.gaze().predict_heatmap(tape, model.gaze().decode(tape, model.gaze().encode(tape, f), &zero));
    for (double v : hm.data()) ASSERT_TRUE(std::isfinite(v));
    auto loss = gaze_loss(tape, hm, target);
    (step == 0 ? first : last) = loss.item();
    tape.backward(loss);
    opt.step(model.params(), tc, 1e-2);
    model.params().zero_grad();
  }
  EXPECT_LT(last, first);
}

TEST(GazeBranch, OverfitsOneSampleHeatmap) {
  ModelConfig cfg;  // desk scale, 64x64 heatmap
  GopModel<float> model(cfg, 0);
  auto scene = generate_scene(SceneConfig{}, 17);
  auto in = make_inputs<float>(scene.image, scene.head_box, cfg);
  auto target = gt_heatmap<float>(scene.gaze_point[0], scene.gaze_point[1], 3.0, 3.0, 64);
  TrainConfig tc;
  AdamW<float> opt(model.params());
  double loss_value = 1;
  int steps = 0;
  for (; steps < 500 && loss_value >= 1e-4; ++steps) {
    Tape<float> tape;
    auto out = model.forward(tape, in);
    auto loss = gaze_loss(tape, out.heatmap, target);
    loss_value = loss.item();
    tape.backward(loss);
    opt.step(model.params(), tc, 1e-3);
    model.params().zero_grad();
  }
  EXPECT_LT(loss_value, 1e-4) << "after " << steps << " steps";
}
