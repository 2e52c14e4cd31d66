#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "transgop/boxes.hpp"
#include "transgop/detector.hpp"
#include "transgop/losses.hpp"

namespace transgop {

struct Detection {
  Box box;  // corners, normalized
  int class_id = 0;
  double score = 0;
};

/// Selected gaze object for one image.
struct GOPPrediction {
  Box box;
  int class_id = 0;
  double score = 0;
  double energy = 0;  // mean heatmap value inside the box
  std::size_t index = 0;  // index into the detection list
};

struct GazeTarget {
  Box box;
  int class_id = 0;
};

inline std::vector<double> default_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

/// Overlap score in [0, 1] behind which the mSoC suite is computed.
using OverlapMetric = std::function<double(const Box&, const Box&)>;

/// (GIoU + 1) / 2.
inline double soc(const Box& a, const Box& b) { return (giou(a, b) + 1.0) / 2.0; }

struct MSocResult {
  std::vector<double> thresholds;
  std::vector<double> matched;   // class must agree
  std::vector<double> agnostic;  // box overlap only
  double mean_matched = 0, mean_agnostic = 0;

  double at(const std::vector<double>& v, double tau) const {
    for (std::size_t i = 0; i < thresholds.size(); ++i)
      if (std::abs(thresholds[i] - tau) < 1e-9) return v[i];
    throw ContractError("threshold " + std::to_string(tau) + " not evaluated");
  }
};

/// Fraction of images whose prediction reaches each threshold. A missing
/// prediction counts as a miss.
inline MSocResult msoc_suite(const std::vector<std::optional<GOPPrediction>>& preds,
                             const std::vector<GazeTarget>& gts,
                             const std::vector<double>& thresholds = default_thresholds(),
                             const OverlapMetric& metric = soc) {
  if (preds.size() != gts.size())
    throw ContractError("msoc_suite: " + std::to_string(preds.size()) + " predictions for " +
                        std::to_string(gts.size()) + " images");
  MSocResult r;
  r.thresholds = thresholds;
  r.matched.assign(thresholds.size(), 0);
  r.agnostic.assign(thresholds.size(), 0);
  if (gts.empty()) return r;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (!preds[i]) continue;
    const double s = metric(preds[i]->box, gts[i].box);
    const bool same = preds[i]->class_id == gts[i].class_id;
    for (std::size_t t = 0; t < thresholds.size(); ++t)
      if (s >= thresholds[t]) {
        r.agnostic[t] += 1;
        if (same) r.matched[t] += 1;
      }
  }
  const auto n = static_cast<double>(gts.size());
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    r.matched[t] /= n;
    r.agnostic[t] /= n;
  }
  if (!thresholds.empty()) {
    r.mean_matched = std::accumulate(r.matched.begin(), r.matched.end(), 0.0) / double(thresholds.size());
    r.mean_agnostic = std::accumulate(r.agnostic.begin(), r.agnostic.end(), 0.0) / double(thresholds.size());
  }
  return r;
}

struct ApResult {
  std::vector<double> thresholds;
  std::vector<double> ap;  // mean over classes with ground truth, per threshold
  double mean = 0;

  double at(double tau) const {
    for (std::size_t i = 0; i < thresholds.size(); ++i)
      if (std::abs(thresholds[i] - tau) < 1e-9) return ap[i];
    throw ContractError("threshold " + std::to_string(tau) + " not evaluated");
  }
};

/// Area under the precision/recall curve with all-point interpolation: the
/// interpolated precision at each true positive, summed, over `num_gt`.
/// `tp` flags are in score order.
inline double average_precision(const std::vector<char>& tp, std::size_t num_gt) {
  if (num_gt == 0) return 0;
  std::vector<double> prec(tp.size());
  double ctp = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    ctp += tp[i] ? 1 : 0;
    prec[i] = ctp / static_cast<double>(i + 1);
  }
  for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double acc = 0;
  for (std::size_t i = 0; i < tp.size(); ++i)
    if (tp[i]) acc += prec[i];
  return acc / static_cast<double>(num_gt);
}

/// Per-class AP with greedy score-ordered matching, averaged over classes
/// that have at least one ground-truth object. Score ties are broken by
/// image index, then detection index.
inline ApResult ap_suite(const std::vector<std::vector<Detection>>& dets,
                         const std::vector<std::vector<GroundTruthObject>>& gts,
                         std::size_t num_classes,
                         const std::vector<double>& thresholds = default_thresholds()) {
  if (dets.size() != gts.size()) throw ContractError("ap_suite: image count mismatch");
  struct Ref {
    double score;
    std::size_t image, det;
  };
  ApResult r;
  r.thresholds = thresholds;
  r.ap.assign(thresholds.size(), 0);
  std::vector<std::vector<Ref>> by_class(num_classes);
  std::vector<std::size_t> gt_count(num_classes, 0);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (std::size_t j = 0; j < dets[i].size(); ++j) {
      const auto c = dets[i][j].class_id;
      if (c < 0 || static_cast<std::size_t>(c) >= num_classes)
        throw ContractError("ap_suite: detection class out of range");
      by_class[static_cast<std::size_t>(c)].push_back({dets[i][j].score, i, j});
    }
    for (const auto& g : gts[i]) {
      if (g.class_id < 0 || static_cast<std::size_t>(g.class_id) >= num_classes)
        throw ContractError("ap_suite: ground-truth class out of range");
      ++gt_count[static_cast<std::size_t>(g.class_id)];
    }
  }
  for (auto& refs : by_class)
    std::sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.image != b.image) return a.image < b.image;
      return a.det < b.det;
    });
  std::size_t active = 0;
  for (std::size_t c = 0; c < num_classes; ++c) active += gt_count[c] > 0;
  if (active == 0) return r;

  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    double total = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (gt_count[c] == 0) continue;
      std::vector<std::vector<char>> taken(gts.size());
      for (std::size_t i = 0; i < gts.size(); ++i) taken[i].assign(gts[i].size(), 0);
      std::vector<char> tp;
      tp.reserve(by_class[c].size());
      for (const auto& ref : by_class[c]) {
        const Box& db = dets[ref.image][ref.det].box;
        double best = -1;
        std::size_t best_g = 0;
        for (std::size_t g = 0; g < gts[ref.image].size(); ++g) {
          const auto& gt = gts[ref.image][g];
          if (gt.class_id != static_cast<int>(c) || taken[ref.image][g]) continue;
          const double iou = box_iou(db, gt.box);
          if (iou > best) {
            best = iou;
            best_g = g;
          }
        }
        const bool hit = best >= thresholds[t];
        if (hit) taken[ref.image][best_g] = 1;
        tp.push_back(hit);
      }
      total += average_precision(tp, gt_count[c]);
    }
    r.ap[t] = total / static_cast<double>(active);
  }
  if (!thresholds.empty())
    r.mean = std::accumulate(r.ap.begin(), r.ap.end(), 0.0) / static_cast<double>(thresholds.size());
  return r;
}

/// Heatmap pixel containing a normalized point.
inline std::pair<std::size_t, std::size_t> point_to_pixel(double x, double y, std::size_t size) {
  const auto s = static_cast<double>(size);
  auto f = [&](double v) {
    return static_cast<std::size_t>(std::clamp(std::floor(v * s), 0.0, s - 1));
  };
  return {f(x), f(y)};
}

/// ROC AUC of the heatmap cells against a single positive cell at the
/// ground-truth gaze pixel; ties count one half.
template <class T>
double gaze_auc(const Tensor<T>& m, double gx, double gy) {
  const std::size_t s = detail::square_side(m, "gaze_auc");
  const auto [px, py] = point_to_pixel(gx, gy, s);
  auto v = m.data();
  const double pos = static_cast<double>(v[py * s + px]);
  double below = 0, tied = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i == py * s + px) continue;
    const double x = static_cast<double>(v[i]);
    if (x < pos) below += 1;
    else if (x == pos) tied += 1;
  }
  return (below + 0.5 * tied) / static_cast<double>(v.size() - 1);
}

/// Normalized center of the first maximal cell.
template <class T>
std::array<double, 2> heatmap_argmax(const Tensor<T>& m) {
  const std::size_t s = detail::square_side(m, "heatmap_argmax");
  auto v = m.data();
  const auto idx = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
  return {(static_cast<double>(idx % s) + 0.5) / static_cast<double>(s),
          (static_cast<double>(idx / s) + 0.5) / static_cast<double>(s)};
}

struct GazePointError {
  double dist = 0;
  double angle_deg = 0;
};

inline GazePointError point_errors(std::array<double, 2> pred, std::array<double, 2> head,
                                   std::array<double, 2> gt) {
  GazePointError e;
  e.dist = std::hypot(pred[0] - gt[0], pred[1] - gt[1]);
  const double ax = pred[0] - head[0], ay = pred[1] - head[1];
  const double bx = gt[0] - head[0], by = gt[1] - head[1];
  const double na = std::hypot(ax, ay), nb = std::hypot(bx, by);
  if (na == 0 || nb == 0)
    throw ContractError("angular error undefined: point coincides with the head center");
  const double c = std::clamp((ax * bx + ay * by) / (na * nb), -1.0, 1.0);
  e.angle_deg = std::acos(c) * 180.0 / M_PI;
  return e;
}

/// Distance and angle of the heatmap argmax against the ground-truth point.
template <class T>
GazePointError l2_and_angular(const Tensor<T>& m, std::array<double, 2> head,
                              std::array<double, 2> gt) {
  return point_errors(heatmap_argmax(m), head, gt);
}

/// Clip a box to [0,1]^2; nullopt if nothing remains.
inline std::optional<Box> clip_unit(const Box& b) {
  Box c{std::clamp(b.x1, 0.0, 1.0), std::clamp(b.y1, 0.0, 1.0), std::clamp(b.x2, 0.0, 1.0),
        std::clamp(b.y2, 0.0, 1.0)};
  if (!c.valid()) return std::nullopt;
  return c;
}

/// Every query as a detection with its best class; boxes clipped to the image.
template <class T>
std::vector<Detection> to_detections(const DetectionOutput<T>& out) {
  std::vector<Detection> d;
  for (std::size_t q = 0; q < out.num_queries(); ++q) {
    auto clipped = clip_unit(out.box(q).corners());
    if (!clipped) continue;
    auto [score, cls] = out.confidence(q);
    d.push_back({*clipped, cls, score});
  }
  return d;
}

template <class T>
double mean_box_energy(const Tensor<T>& m, const Box& box) {
  const std::size_t s = detail::square_side(m, "mean_box_energy");
  const GazeBox g = to_gaze_box(box, s);
  auto v = m.data();
  double acc = 0;
  for (std::size_t y = g.y1; y < g.y2; ++y)
    for (std::size_t x = g.x1; x < g.x2; ++x) acc += static_cast<double>(v[y * s + x]);
  return acc / static_cast<double>(g.cells());
}

/// Detection with the highest mean heatmap energy among those scoring at
/// least `score_floor`; ties go to the higher score, then the lower index.
/// nullopt when no detection survives the floor.
template <class T>
std::optional<GOPPrediction> select_gaze_object(const Tensor<T>& m, const std::vector<Detection>& dets,
                                                double score_floor = 0.1) {
  std::optional<GOPPrediction> best;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const auto& d = dets[i];
    if (d.score < score_floor) continue;
    const double e = mean_box_energy(m, d.box);
    if (!best || e > best->energy || (e == best->energy && d.score > best->score))
      best = GOPPrediction{d.box, d.class_id, d.score, e, i};
  }
  return best;
}

/// Expected class-agnostic hit rate at `tau` if the gaze object were picked
/// uniformly among detections above the score floor.
inline double random_selection_rate(const std::vector<std::vector<Detection>>& dets,
                                    const std::vector<GazeTarget>& gts, double tau,
                                    double score_floor = 0.1, const OverlapMetric& metric = soc) {
  if (dets.size() != gts.size()) throw ContractError("random_selection_rate: image count mismatch");
  if (gts.empty()) return 0;
  double acc = 0;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    double n = 0, hit = 0;
    for (const auto& d : dets[i]) {
      if (d.score < score_floor) continue;
      n += 1;
      hit += metric(d.box, gts[i].box) >= tau;
    }
    if (n > 0) acc += hit / n;
  }
  return acc / static_cast<double>(gts.size());
}

/// Aggregate evaluation numbers, fractions in [0, 1].
struct MetricReport {
  MSocResult msoc;
  ApResult ap;
  double auc = 0;
  double dist = 0;
  double angle = 0;
  std::size_t images = 0;
  std::size_t selection_misses = 0;
  std::size_t angle_excluded = 0;
  double random_agnostic_msoc50 = 0;
};

inline std::string format4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

/// CSV with header `metric,value,threshold,class_mode`.
inline void write_metrics_csv(std::ostream& os, const MetricReport& r) {
  os << "metric,value,threshold,class_mode\n";
  auto row = [&](const std::string& name, double v, const std::string& tau, const std::string& mode) {
    os << name << ',' << format4(v) << ',' << tau << ',' << mode << '\n';
  };
  for (const auto* mode : {"matched", "agnostic"}) {
    const bool m = std::string(mode) == "matched";
    row("mSoC", m ? r.msoc.mean_matched : r.msoc.mean_agnostic, "mean", mode);
    for (std::size_t i = 0; i < r.msoc.thresholds.size(); ++i)
      row("mSoC", m ? r.msoc.matched[i] : r.msoc.agnostic[i], format4(r.msoc.thresholds[i]), mode);
  }
  row("AP", r.ap.mean, "mean", "matched");
  for (std::size_t i = 0; i < r.ap.thresholds.size(); ++i)
    row("AP", r.ap.ap[i], format4(r.ap.thresholds[i]), "matched");
  row("AUC", r.auc, "", "");
  row("Dist", r.dist, "", "");
  row("Ang", r.angle, "", "");
  row("random_mSoC", r.random_agnostic_msoc50, format4(0.5), "agnostic");
}

}  // namespace transgop
