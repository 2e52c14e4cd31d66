#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "transgop/metrics.hpp"
#include "oracles.hpp"

using namespace transgop;
using TD = Tensor<double>;

using namespace transgop::oracle;

TEST(Soc, HandCasesAndErrors) {
  const Box a{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(soc(a, a), 1.0);
  EXPECT_NEAR(soc(a, Box{2, 0, 3, 1}), 1.0 / 3.0, 1e-12);
  EXPECT_GT(soc(a, Box{2, 0, 3, 1}), soc(a, Box{3, 0, 4, 1}));
  EXPECT_THROW(soc(a, Box{1, 1, 1, 2}), ContractError);
}

TEST(SocProperty, SymmetricBoundedAndOneOnlyAtIdentity) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    Box a = rand_box(rng), b = rand_box(rng);
    const double s = soc(a, b);
    ASSERT_NEAR(s, soc(b, a), 1e-12);
    ASSERT_GE(s, 0.0);
    ASSERT_LE(s, 1.0);
    if (!(a == b)) {
      ASSERT_LT(s, 1.0);
    }
  }
}

TEST(MSoc, PerfectWrongClassAndCountMismatch) {
  Rng rng(2);
  std::vector<std::optional<GOPPrediction>> preds, wrong;
  std::vector<GazeTarget> gts;
  for (int i = 0; i < 10; ++i) {
    Box b = rand_box(rng);
    gts.push_back({b, i % 3});
    preds.push_back(GOPPrediction{b, i % 3, 0.9, 0.5, 0});
    wrong.push_back(GOPPrediction{b, (i % 3) + 1, 0.9, 0.5, 0});
  }
  auto r = msoc_suite(preds, gts);
  EXPECT_DOUBLE_EQ(r.mean_matched, 1.0);
  EXPECT_DOUBLE_EQ(r.mean_agnostic, 1.0);
  for (double v : r.matched) EXPECT_DOUBLE_EQ(v, 1.0);
  auto w = msoc_suite(wrong, gts);
  EXPECT_DOUBLE_EQ(w.mean_matched, 0.0);
  EXPECT_DOUBLE_EQ(w.mean_agnostic, 1.0);
  preds.pop_back();
  EXPECT_THROW(msoc_suite(preds, gts), ContractError);
}

TEST(MSocProperty, MatchesPerImageLoopAndIsMonotone) {
  Rng rng(3);
  std::uniform_int_distribution<int> cls(0, 2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + trial % 9;
    std::vector<std::optional<GOPPrediction>> preds;
    std::vector<GazeTarget> gts;
    for (std::size_t i = 0; i < n; ++i) {
      Box g = rand_box(rng);
      gts.push_back({g, cls(rng)});
      if (trial % 5 == 0 && i == 0) {
        preds.push_back(std::nullopt);  // selection miss
        continue;
      }
      preds.push_back(GOPPrediction{trial % 2 ? jitter(g, rng, 0.1) : rand_box(rng), cls(rng), 0.5, 0.1, 0});
    }
    auto r = msoc_suite(preds, gts);
    auto th = default_thresholds();
    double mm = 0, ma = 0;
    for (std::size_t t = 0; t < th.size(); ++t) {
      double hm = 0, ha = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (!preds[i]) continue;
        const bool over = (giou(preds[i]->box, gts[i].box) + 1) / 2 >= th[t];
        ha += over;
        hm += over && preds[i]->class_id == gts[i].class_id;
      }
      ASSERT_NEAR(r.matched[t], hm / double(n), 1e-12);
      ASSERT_NEAR(r.agnostic[t], ha / double(n), 1e-12);
      if (t > 0) {
        ASSERT_LE(r.matched[t], r.matched[t - 1]);
        ASSERT_LE(r.agnostic[t], r.agnostic[t - 1]);
      }
      mm += hm / double(n) / double(th.size());
      ma += ha / double(n) / double(th.size());
    }
    ASSERT_NEAR(r.mean_matched, mm, 1e-12);
    ASSERT_NEAR(r.mean_agnostic, ma, 1e-12);
  }
}

TEST(Ap, SingleCorrectDetectionAndDuplicate) {
  const Box g{0.2, 0.2, 0.6, 0.6};
  const Box d{0.2, 0.2, 0.6, 0.58};  // IoU 0.95
  std::vector<std::vector<GroundTruthObject>> gts{{{g, 1}}};
  auto one = ap_suite({{{d, 1, 0.9}}}, gts, 3);
  EXPECT_DOUBLE_EQ(one.at(0.5), 1.0);
  EXPECT_DOUBLE_EQ(one.at(0.75), 1.0);
  auto dup = ap_suite({{{d, 1, 0.9}, {d, 1, 0.8}}}, gts, 3);
  EXPECT_DOUBLE_EQ(dup.at(0.5), 1.0);
  // The duplicate is a false positive: precision 1 then 1/2.
  EXPECT_DOUBLE_EQ(average_precision({1, 0}, 1), 1.0);
  EXPECT_DOUBLE_EQ(average_precision({0, 1}, 1), 0.5);
  // Duplicate ranked first and correct one second: same boxes, same outcome.
  auto flipped = ap_suite({{{d, 1, 0.8}, {d, 1, 0.9}}}, gts, 3);
  EXPECT_DOUBLE_EQ(flipped.at(0.5), 1.0);
  EXPECT_THROW(ap_suite({}, gts, 3), ContractError);
}

TEST(Ap, HandPrecisionRecallCurve) {
  // Ranked TP, FP, TP with 3 ground truths: precision 1, 1/2, 2/3.
  // Interpolated: 1 at recall 1/3, 2/3 at recall 2/3 -> (1 + 2/3) / 3.
  EXPECT_NEAR(average_precision({1, 0, 1}, 3), (1.0 + 2.0 / 3.0) / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(average_precision({}, 2), 0.0);
  EXPECT_DOUBLE_EQ(average_precision({1}, 0), 0.0);
}

TEST(ApProperty, MatchesReferenceEvaluatorOnRandomSets) {
  Rng rng(4);
  std::uniform_int_distribution<int> cls(0, 2), count(0, 4);
  std::uniform_real_distribution<double> score(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<Detection>> dets(5);
    std::vector<std::vector<GroundTruthObject>> gts(5);
    for (std::size_t i = 0; i < 5; ++i) {
      for (int k = count(rng); k > 0; --k) gts[i].push_back({rand_box(rng), cls(rng)});
      for (auto& g : gts[i])
        if (score(rng) < 0.7) dets[i].push_back({jitter(g.box, rng, 0.08), score(rng) < 0.8 ? g.class_id : cls(rng),
                                                 trial % 3 == 0 ? 0.5 : score(rng)});
      for (int k = count(rng) / 2; k > 0; --k) dets[i].push_back({rand_box(rng), cls(rng), score(rng)});
    }
    auto r = ap_suite(dets, gts, 3);
    double mean = 0;
    for (std::size_t t = 0; t < r.thresholds.size(); ++t) {
      ASSERT_NEAR(r.ap[t], reference_ap(dets, gts, 3, r.thresholds[t]), 1e-12) << "trial " << trial;
      ASSERT_GE(r.ap[t], 0.0);
      ASSERT_LE(r.ap[t], 1.0);
      mean += r.ap[t] / double(r.thresholds.size());
    }
    ASSERT_NEAR(r.mean, mean, 1e-12);
  }
}

TEST(Auc, OneHotConstantAndInverted) {
  TD m = TD::zeros({64, 64});
  auto [px, py] = point_to_pixel(0.3, 0.6, 64);
  m.mutable_data()[py * 64 + px] = 1;
  EXPECT_DOUBLE_EQ(gaze_auc(m, 0.3, 0.6), 1.0);
  EXPECT_DOUBLE_EQ(gaze_auc(TD::full({64, 64}, 0.2), 0.3, 0.6), 0.5);
  TD inv = TD::full({64, 64}, 0.5);
  inv.mutable_data()[0] = 1.0;
  inv.mutable_data()[py * 64 + px] = 0.0;
  EXPECT_NEAR(gaze_auc(inv, 0.3, 0.6), 0.0, 1e-12);
}

TEST(AucProperty, InvariantUnderIncreasingTransform) {
  Rng rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(32 * 32);
    for (auto& x : v) x = std::round(u(rng) * 20) / 20;  // plenty of ties
    TD m({32, 32}, v), t({32, 32}, v);
    for (auto& x : t.mutable_data()) x = std::exp(3 * x) - 7;
    const double gx = u(rng), gy = u(rng);
    ASSERT_DOUBLE_EQ(gaze_auc(m, gx, gy), gaze_auc(t, gx, gy));
    // Brute-force pairwise definition.
    auto [px, py] = point_to_pixel(gx, gy, 32);
    const double pos = v[py * 32 + px];
    double acc = 0;
    for (std::size_t i = 0; i < v.size(); ++i)
      if (i != py * 32 + px) acc += v[i] < pos ? 1.0 : v[i] == pos ? 0.5 : 0.0;
    ASSERT_NEAR(gaze_auc(m, gx, gy), acc / double(v.size() - 1), 1e-12);
  }
}

TEST(PointErrors, HandCasesArgmaxTiesAndDegenerateHead) {
  auto e = point_errors({0.9, 0.5}, {0.5, 0.5}, {0.5, 0.9});
  EXPECT_NEAR(e.angle_deg, 90.0, 1e-9);
  auto a = point_errors({0.5, 0.1}, {0.5, 0.5}, {0.5, 0.9});
  EXPECT_NEAR(a.angle_deg, 180.0, 1e-9);
  EXPECT_NEAR(a.dist, 0.8, 1e-12);
  auto z = point_errors({0.2, 0.3}, {0.5, 0.5}, {0.2, 0.3});
  EXPECT_EQ(z.dist, 0.0);
  EXPECT_NEAR(z.angle_deg, 0.0, 1e-6);
  EXPECT_THROW(point_errors({0.5, 0.5}, {0.5, 0.5}, {0.2, 0.3}), ContractError);

  TD m = TD::zeros({4, 4});
  m.mutable_data()[6] = 2;
  m.mutable_data()[9] = 2;
  auto p = heatmap_argmax(m);  // index 6 = row 1, col 2
  EXPECT_NEAR(p[0], 2.5 / 4, 1e-12);
  EXPECT_NEAR(p[1], 1.5 / 4, 1e-12);
}

TEST(Selection, EnergyThenScoreThenIndex) {
  TD m = TD::full({64, 64}, 0.1);
  const Box b0{0.0, 0.0, 0.25, 0.25}, b1{0.5, 0.5, 0.75, 0.75};
  auto g1 = to_gaze_box(b1);
  for (std::size_t y = g1.y1; y < g1.y2; ++y)
    for (std::size_t x = g1.x1; x < g1.x2; ++x) m.mutable_data()[y * 64 + x] = 0.9;
  auto s = select_gaze_object(m, {{b0, 0, 0.9}, {b1, 1, 0.5}});
  ASSERT_TRUE(s);
  EXPECT_EQ(s->index, 1u);
  EXPECT_NEAR(s->energy, 0.9, 1e-12);

  TD flat = TD::full({64, 64}, 0.3);
  auto t = select_gaze_object(flat, {{b0, 0, 0.8}, {b1, 1, 0.9}});
  EXPECT_EQ(t->index, 1u);
  auto u = select_gaze_object(flat, {{b0, 0, 0.9}, {b1, 1, 0.9}});
  EXPECT_EQ(u->index, 0u);
  // Below the floor: ignored; nothing left: nullopt.
  auto v = select_gaze_object(m, {{b0, 0, 0.9}, {b1, 1, 0.05}});
  EXPECT_EQ(v->index, 0u);
  EXPECT_FALSE(select_gaze_object(m, {{b0, 0, 0.05}}));
  EXPECT_FALSE(select_gaze_object(m, {}));
}

TEST(SelectionProperty, BruteForceMaxAndScaleInvariance) {
  Rng rng(6);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(64 * 64);
    for (auto& x : v) x = u(rng);
    TD m({64, 64}, v);
    std::vector<Detection> dets;
    for (int k = 0; k < 3; ++k) dets.push_back({rand_box(rng), k, 0.1 + 0.9 * u(rng)});
    auto s = select_gaze_object(m, dets);
    ASSERT_TRUE(s);
    std::size_t best = 0;
    double be = -1;
    for (std::size_t k = 0; k < 3; ++k) {
      auto g = to_gaze_box(dets[k].box);
      double acc = 0;
      for (std::size_t y = g.y1; y < g.y2; ++y)
        for (std::size_t x = g.x1; x < g.x2; ++x) acc += v[y * 64 + x];
      acc /= double(g.cells());
      if (acc > be) be = acc, best = k;
    }
    ASSERT_EQ(s->index, best);
    TD scaled({64, 64}, v);
    for (auto& x : scaled.mutable_data()) x *= 3.7;
    ASSERT_EQ(select_gaze_object(scaled, dets)->index, best);
  }
}

TEST(RandomSelection, ExpectedHitRate) {
  const Box g{0.1, 0.1, 0.3, 0.3};
  std::vector<std::vector<Detection>> dets{
      {{g, 0, 0.9}, {{0.6, 0.6, 0.9, 0.9}, 1, 0.9}, {{0.5, 0.1, 0.7, 0.3}, 2, 0.9}, {g, 0, 0.01}},
      {{g, 0, 0.9}}};
  std::vector<GazeTarget> gts{{g, 0}, {g, 1}};
  // Image 0: one hit among three survivors; image 1: one of one.
  EXPECT_NEAR(random_selection_rate(dets, gts, 0.5), (1.0 / 3.0 + 1.0) / 2.0, 1e-12);
  // Nine equally likely candidates with one hit.
  std::vector<Detection> nine;
  for (int k = 0; k < 9; ++k) nine.push_back({Box{0.1 * k, 0.8, 0.1 * k + 0.08, 0.9}, 0, 0.5});
  EXPECT_NEAR(random_selection_rate({nine}, {{nine[4].box, 0}}, 0.5), 1.0 / 9.0, 1e-12);
}

TEST(MetricsCsv, HeaderAndFourDecimals) {
  MetricReport r;
  r.msoc = msoc_suite({GOPPrediction{{0, 0, 0.5, 0.5}, 0, 0.9, 0.3, 0}}, {{{0, 0, 0.5, 0.5}, 0}});
  r.ap = ap_suite({{}}, {{}}, 2);
  r.auc = 0.123456;
  std::ostringstream os;
  write_metrics_csv(os, r);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "metric,value,threshold,class_mode");
  std::getline(is, line);
  EXPECT_EQ(line, "mSoC,1.0000,mean,matched");
  std::getline(is, line);
  EXPECT_EQ(line, "mSoC,1.0000,0.5000,matched");
  EXPECT_NE(os.str().find("AUC,0.1235,,"), std::string::npos);
}
