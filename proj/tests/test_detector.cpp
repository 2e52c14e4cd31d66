#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "transgop/detector.hpp"
#include "transgop/gradcheck.hpp"
#include "transgop/train.hpp"
#include "oracles.hpp"

using namespace transgop;
using TD = Tensor<double>;

namespace {

ModelConfig tiny_detector_config(std::size_t queries) {
  ModelConfig c;
  c.image_size = 24;
  c.num_classes = 3;
  c.hidden = 8;
  c.heads = 2;
  c.ffn_hidden = 16;
  c.num_queries = queries;
  c.backbone_channels = {4, 4};
  return c;
}

TD random_image(std::size_t s, Rng& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> v(3 * s * s);
  for (auto& x : v) x = u(rng);
  return TD({3, s, s}, std::move(v));
}

}  // namespace

TEST(Hungarian, HandCaseAndSingleTarget) {
  auto m = hungarian_match({1, 2, 3, 0}, 2, 2);
  ASSERT_EQ(m.pairs.size(), 2u);
  EXPECT_EQ(m.pairs[0], (std::pair<std::size_t, std::size_t>{0, 0}));
  EXPECT_EQ(m.pairs[1], (std::pair<std::size_t, std::size_t>{1, 1}));
  EXPECT_DOUBLE_EQ(m.total_cost, 1.0);

  auto one = hungarian_match({0.7, 0.2, 0.9}, 3, 1);
  ASSERT_EQ(one.pairs.size(), 1u);
  EXPECT_EQ(one.pairs[0].first, 1u);
}

TEST(Hungarian, NonFiniteCostIsContractError) {
  EXPECT_THROW(hungarian_match({1, NAN, 0, 2}, 2, 2), ContractError);
  EXPECT_THROW(hungarian_match({1, INFINITY}, 1, 2), ContractError);
  EXPECT_TRUE(hungarian_match({}, 0, 3).pairs.empty());
}

TEST(HungarianProperty, EqualsBruteForceOnRandomMatrices) {
  Rng rng(7);
  std::uniform_int_distribution<std::size_t> side(1, 6);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t r = side(rng), c = side(rng);
    std::vector<double> cost(r * c);
    for (auto& x : cost) x = trial % 4 == 0 ? std::round(u(rng)) : u(rng);  // ties on some trials
    auto m = hungarian_match(cost, r, c);
    ASSERT_EQ(m.pairs.size(), std::min(r, c));
    std::vector<bool> ur(r), uc(c);
    double total = 0;
    for (auto [i, j] : m.pairs) {
      ASSERT_FALSE(ur[i] || uc[j]) << "assignment not injective";
      ur[i] = uc[j] = true;
      total += cost[i * c + j];
    }
    EXPECT_NEAR(total, m.total_cost, 1e-9);
    ASSERT_NEAR(total, oracle::brute_force_assignment(cost, r, c), 1e-9) << "trial " << trial;
  }
}

TEST(Focal, ClosedFormCases) {
  Tape<double> tape;
  // p_t = 1 everywhere (saturated logits) gives zero.
  auto z = sigmoid_focal_loss(tape, TD({2}, {60.0, -60.0}), {1.0, 0.0}, 0.25, 2.0);
  EXPECT_NEAR(z.item(), 0.0, 1e-20);
  // Single positive with p = 0.9.
  const double logit = std::log(0.9 / 0.1);
  auto one = sigmoid_focal_loss(tape, TD({1}, {logit}), {1.0}, 0.25, 2.0);
  EXPECT_NEAR(one.item(), 2.634e-4, 5e-8);
  // gamma = 0, alpha = 0.5 is half the binary cross-entropy.
  auto half = sigmoid_focal_loss(tape, TD({2}, {0.3, -1.2}), {1.0, 0.0}, 0.5, 0.0);
  const double p0 = 1 / (1 + std::exp(-0.3)), p1 = 1 / (1 + std::exp(1.2));
  EXPECT_NEAR(half.item(), 0.5 * (-std::log(p0) - std::log(1 - p1)), 1e-12);
  EXPECT_THROW(sigmoid_focal_loss(tape, TD({1}, {0.0}), {1.0}, 1.0, 2.0), ContractError);
}

TEST(Giou, HandCases) {
  Box a{0, 0, 1, 1}, b{2, 0, 3, 1};
  EXPECT_NEAR(giou(a, b), -1.0 / 3.0, 1e-12);
  EXPECT_NEAR(giou(Box{0, 0, 2, 2}, Box{1, 1, 3, 3}), -5.0 / 63.0, 1e-12);
  EXPECT_DOUBLE_EQ(giou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(giou_loss(a, a), 0.0);
  EXPECT_THROW(giou(Box{0, 0, 0, 1}, a), ContractError);
  EXPECT_DOUBLE_EQ(l1_box_loss(BoxCXCYWH<double>{0.5, 0.5, 0.2, 0.2}, BoxCXCYWH<double>{0.4, 0.7, 0.2, 0.1}),
                   0.1 + 0.2 + 0.1);
}

TEST(GiouProperty, SymmetricBoundedAndDecreasingWithSeparation) {
  Rng rng(11);
  std::uniform_real_distribution<double> u(0, 1);
  auto rand_box = [&] {
    double x1 = u(rng), y1 = u(rng);
    return Box{x1, y1, x1 + 0.01 + u(rng), y1 + 0.01 + u(rng)};
  };
  for (int trial = 0; trial < 500; ++trial) {
    Box a = rand_box(), b = rand_box();
    const double g = giou(a, b);
    EXPECT_NEAR(g, giou(b, a), 1e-12);
    EXPECT_GT(g, -1.0);
    EXPECT_LE(g, 1.0);
    EXPECT_NEAR(giou(a, a), 1.0, 1e-12);
    // Slide b to the right of a; giou keeps falling.
    Box s{a.x2 + 0.01, b.y1, a.x2 + 0.01 + b.width(), b.y2};
    double prev = giou(a, s);
    for (int k = 0; k < 5; ++k) {
      s.x1 += 0.1;
      s.x2 += 0.1;
      const double cur = giou(a, s);
      ASSERT_LT(cur, prev);
      prev = cur;
    }
  }
}

TEST(Detector, ForwardIsWellFormedAndDeterministic) {
  auto cfg = tiny_detector_config(4);
  Rng rng(1);
  ParamSet<double> ps;
  Detector<double> det(cfg, ps, rng);
  auto img = random_image(cfg.image_size, rng);
  Tape<double> t1(false), t2(false);
  auto [out, mem] = det.forward(t1, img);
  auto [out2, mem2] = det.forward(t2, img);
  EXPECT_EQ(out.num_queries(), 4u);
  EXPECT_EQ(out.num_classes(), 3u);
  EXPECT_EQ(mem.length(), cfg.grid() * cfg.grid());
  EXPECT_EQ(mem.values.dim(1), cfg.hidden);
  for (std::size_t i = 0; i < out.boxes.numel(); ++i) {
    EXPECT_TRUE(std::isfinite(out.boxes.data()[i]));
    EXPECT_EQ(out.boxes.data()[i], out2.boxes.data()[i]);
  }
  for (std::size_t i = 0; i < out.class_logits.numel(); ++i) {
    EXPECT_TRUE(std::isfinite(out.class_logits.data()[i]));
    EXPECT_EQ(out.class_logits.data()[i], out2.class_logits.data()[i]);
  }
  EXPECT_THROW(det.forward(t1, random_image(16, rng)), ShapeError);
}

TEST(Detector, ExportedMemoryIsWhatTheDecoderReads) {
  auto cfg = tiny_detector_config(4);
  Rng rng(2);
  ParamSet<double> ps;
  Detector<double> det(cfg, ps, rng);
  auto img = random_image(cfg.image_size, rng);
  Tape<double> tape(false);
  auto enc = det.encode(tape, img);
  auto [out, mem] = det.forward(tape, img);
  auto again = det.decode(tape, enc.memory);
  for (std::size_t i = 0; i < mem.values.numel(); ++i) {
    EXPECT_EQ(mem.values.data()[i], enc.memory.values.data()[i]);
    EXPECT_EQ(mem.keys.data()[i], enc.memory.keys.data()[i]);
  }
  for (std::size_t i = 0; i < out.boxes.numel(); ++i) EXPECT_EQ(out.boxes.data()[i], again.boxes.data()[i]);
  // Keys carry the positional table, values do not.
  for (std::size_t i = 0; i < mem.keys.numel(); ++i)
    EXPECT_NEAR(mem.keys.data()[i] - mem.values.data()[i], det.pos().table.data()[i], 1e-12);
}

TEST(DetLoss, PerfectPredictionIsNearZero) {
  std::vector<GroundTruthObject> gts{{{0.1, 0.2, 0.4, 0.6}, 1}, {{0.5, 0.5, 0.9, 0.8}, 0}};
  std::vector<double> logits(3 * 2, -40.0), boxes;
  logits[0 * 2 + 1] = 40;
  logits[2 * 2 + 0] = 40;
  auto push = [&](const Box& b) {
    auto c = BoxCXCYWH<double>::from(b);
    boxes.insert(boxes.end(), {c.cx, c.cy, c.w, c.h});
  };
  push(gts[0].box);
  push({0.3, 0.3, 0.4, 0.4});
  push(gts[1].box);
  Tape<double> tape;
  DetectionOutput<double> out{TD({3, 2}, logits, true), TD({3, 4}, boxes, true)};
  auto parts = det_loss(tape, out, gts);
  EXPECT_NEAR(parts.total.item(), 0.0, 1e-12);
  EXPECT_EQ(parts.match.pairs.size(), 2u);
}

TEST(DetLoss, EmptySceneIsPureBackgroundTerm) {
  Rng rng(3);
  std::uniform_real_distribution<double> u(-2, 2);
  std::vector<double> logits(4 * 3);
  for (auto& x : logits) x = u(rng);
  std::vector<double> boxes{0.5, 0.5, 0.2, 0.2, 0.3, 0.3, 0.1, 0.1, 0.6, 0.7, 0.2, 0.3, 0.2, 0.8, 0.1, 0.1};
  Tape<double> tape;
  DetectionOutput<double> out{TD({4, 3}, logits), TD({4, 4}, boxes)};
  auto parts = det_loss(tape, out, {});
  auto bg = sigmoid_focal_loss(tape, out.class_logits, std::vector<double>(12, 0.0), 0.25, 2.0);
  EXPECT_NEAR(parts.total.item(), 2.0 * bg.item(), 1e-12);
  EXPECT_TRUE(parts.match.pairs.empty());
  EXPECT_GE(parts.total.item(), 0.0);
}

TEST(DetLoss, GradcheckOnTwoQueryDetector) {
  auto cfg = tiny_detector_config(2);
  Rng rng(4);
  ParamSet<double> ps;
  Detector<double> det(cfg, ps, rng);
  std::normal_distribution<double> n(0, 0.05);
  for (auto& [_, t] : ps.items())
    for (auto& v : t.mutable_data()) v += n(rng);
  auto img = random_image(cfg.image_size, rng);
  std::vector<GroundTruthObject> gts{{{0.12, 0.15, 0.43, 0.52}, 0}, {{0.55, 0.31, 0.92, 0.83}, 2}};
  std::vector<TD> inputs;
  for (auto& [_, t] : ps.items()) inputs.push_back(t);
  auto rep = gradcheck(
      [&](Tape<double>& t, std::span<TD>) { return det_loss(t, det.forward(t, img).first, gts).total; },
      inputs);
  EXPECT_TRUE(rep.passed) << rep.diagnostic << " max " << rep.max_error;
}

TEST(DetLoss, DecreasesWhenOverfittingOneScene) {
  auto cfg = tiny_detector_config(4);
  Rng rng(5);
  ParamSet<double> ps;
  Detector<double> det(cfg, ps, rng);
  auto img = random_image(cfg.image_size, rng);
  std::vector<GroundTruthObject> gts{{{0.1, 0.1, 0.45, 0.4}, 1}, {{0.5, 0.55, 0.85, 0.9}, 2}};
  TrainConfig tc;
  AdamW<double> opt(ps);
  double first = 0, last = 0;
  for (int step = 0; step < 50; ++step) {
    Tape<double> tape;
    auto loss = det_loss(tape, det.forward(tape, img).first, gts).total;
    if (step == 0) first = loss.item();
    last = loss.item();
    tape.backward(loss);
    opt.step(ps, tc, 1e-2);
    ps.zero_grad();
  }
  EXPECT_LT(last, 0.5 * first);
}
