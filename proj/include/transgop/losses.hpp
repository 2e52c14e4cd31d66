#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "transgop/boxes.hpp"
#include "transgop/ops.hpp"

namespace transgop {

/// Gaussian ground-truth heatmap [size x size] centered on the pixel that
/// contains the gaze point, evaluated in heatmap pixel units and normalized
/// so that its maximum is 1.
template <class T>
Tensor<T> gt_heatmap(double qx, double qy, double sigma_x = 3.0, double sigma_y = 3.0,
                     std::size_t size = 64) {
  if (!(qx >= 0 && qx <= 1 && qy >= 0 && qy <= 1))
    throw ContractError("gt_heatmap: gaze point (" + std::to_string(qx) + ", " +
                        std::to_string(qy) + ") outside [0,1]^2");
  if (!(sigma_x > 0 && sigma_y > 0)) throw ContractError("gt_heatmap: sigma must be positive");
  const auto last = static_cast<double>(size - 1);
  const double cx = std::min(std::floor(qx * static_cast<double>(size)), last);
  const double cy = std::min(std::floor(qy * static_cast<double>(size)), last);
  std::vector<T> v(size * size);
  double peak = 0;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double g = std::exp(-(dx * dx / (2 * sigma_x * sigma_x) + dy * dy / (2 * sigma_y * sigma_y)));
      peak = std::max(peak, g);
      v[y * size + x] = static_cast<T>(g);
    }
  for (auto& e : v) e = static_cast<T>(static_cast<double>(e) / peak);
  return Tensor<T>({size, size}, std::move(v));
}

/// Pixel rectangle on a heatmap grid.
struct GazeBox {
  std::size_t x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // x2/y2 exclusive
  std::size_t width() const { return x2 - x1; }
  std::size_t height() const { return y2 - y1; }
  std::size_t cells() const { return width() * height(); }
  bool contains(std::size_t x, std::size_t y) const { return x >= x1 && x < x2 && y >= y1 && y < y2; }
};

/// Normalized corners -> pixel range: floor on mins, ceil on maxes, clamped.
inline GazeBox to_gaze_box(const Box& b, std::size_t size = 64) {
  require_box(b, "to_gaze_box");
  const auto s = static_cast<double>(size);
  auto clampi = [&](double v) {
    return static_cast<std::size_t>(std::clamp(v, 0.0, s));
  };
  GazeBox g{clampi(std::floor(b.x1 * s)), clampi(std::floor(b.y1 * s)),
            clampi(std::ceil(b.x2 * s)), clampi(std::ceil(b.y2 * s))};
  if (g.x2 <= g.x1 || g.y2 <= g.y1)
    throw ContractError("gaze box maps to an empty pixel region");
  return g;
}

namespace detail {
template <class T>
void require_heatmap_pair(const Tensor<T>& m, const Tensor<T>& t, const char* what) {
  if (m.shape() != t.shape())
    throw ShapeError(std::string(what) + ": heatmap " + shape_str(m.shape()) + " vs target " +
                     shape_str(t.shape()));
}
template <class T>
std::size_t square_side(const Tensor<T>& m, const char* what) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1))
    throw ShapeError(std::string(what) + ": expected a square heatmap, got " + shape_str(m.shape()));
  return m.dim(0);
}
}  // namespace detail

/// Mean squared error between predicted and ground-truth heatmaps.
template <class T>
Tensor<T> gaze_loss(Tape<T>& tape, const Tensor<T>& m, const Tensor<T>& t) {
  detail::require_heatmap_pair(m, t, "gaze_loss");
  auto d = sub(tape, m, t);
  return mean(tape, mul(tape, d, d));
}

/// 1 - mean of the heatmap over the gaze box cells.
template <class T>
Tensor<T> gaze_box_loss(Tape<T>& tape, const Tensor<T>& m, const GazeBox& box) {
  const std::size_t s = detail::square_side(m, "gaze_box_loss");
  if (box.x2 > s || box.y2 > s || box.cells() == 0 || box.x2 <= box.x1 || box.y2 <= box.y1)
    throw ContractError("gaze_box_loss: box outside the heatmap or empty");
  std::vector<T> w(s * s, T(0));
  for (std::size_t y = box.y1; y < box.y2; ++y)
    for (std::size_t x = box.x1; x < box.x2; ++x) w[y * s + x] = T(1);
  // Divide rather than weight by 1/n, so an all-ones box gives exactly 0.
  const auto inside = weighted_sum(tape, m, std::move(w));
  return affine_scalar(tape, div(tape, inside, Tensor<T>::scalar(static_cast<T>(box.cells()))), T(-1), T(1));
}

template <class T>
Tensor<T> gaze_box_loss(Tape<T>& tape, const Tensor<T>& m, const Box& box) {
  return gaze_box_loss(tape, m, to_gaze_box(box, detail::square_side(m, "gaze_box_loss")));
}

/// 1 - (energy inside the box) / (total energy). Ablation baseline.
template <class T>
Tensor<T> energy_aggregation_loss(Tape<T>& tape, const Tensor<T>& m, const GazeBox& box) {
  const std::size_t s = detail::square_side(m, "energy_aggregation_loss");
  if (box.x2 > s || box.y2 > s || box.x2 <= box.x1 || box.y2 <= box.y1)
    throw ContractError("energy_aggregation_loss: box outside the heatmap or empty");
  double total = 0;
  for (auto v : m.data()) total += static_cast<double>(v);
  if (!(total > 0)) throw ContractError("energy_aggregation_loss: heatmap has no energy");
  std::vector<T> w(s * s, T(0));
  for (std::size_t y = box.y1; y < box.y2; ++y)
    for (std::size_t x = box.x1; x < box.x2; ++x) w[y * s + x] = T(1);
  auto inside = weighted_sum(tape, m, std::move(w));
  return affine_scalar(tape, div(tape, inside, sum(tape, m)), T(-1), T(1));
}

template <class T>
Tensor<T> energy_aggregation_loss(Tape<T>& tape, const Tensor<T>& m, const Box& box) {
  return energy_aggregation_loss(
      tape, m, to_gaze_box(box, detail::square_side(m, "energy_aggregation_loss")));
}

struct LossWeights {
  double alpha = 1000;  // gaze heatmap loss
  double beta = 10;     // gaze box loss
};

/// L = L_det + alpha * L_gaze + beta * L_gb. Any undefined component is
/// treated as absent.
template <class T>
Tensor<T> total_loss(Tape<T>& tape, const Tensor<T>& det, const Tensor<T>& gaze,
                     const Tensor<T>& gaze_box, const LossWeights& w = {}) {
  const char* names[] = {"L_det", "L_gaze", "L_gb"};
  const Tensor<T>* parts[] = {&det, &gaze, &gaze_box};
  for (int i = 0; i < 3; ++i) {
    if (!parts[i]->defined()) continue;
    if (parts[i]->numel() != 1) throw ShapeError(std::string("total_loss: ") + names[i] + " is not a scalar");
    const double v = static_cast<double>(parts[i]->item());
    if (!std::isfinite(v))
      throw NumericError(std::string("total_loss: ") + names[i] + " is non-finite (" +
                         std::to_string(v) + ")");
  }
  Tensor<T> acc;
  auto accumulate = [&](const Tensor<T>& part, double weight) {
    if (!part.defined() || weight == 0) return;
    auto term = weight == 1 ? part : scale(tape, part, static_cast<T>(weight));
    acc = acc.defined() ? add(tape, acc, term) : term;
  };
  accumulate(det, 1);
  accumulate(gaze, w.alpha);
  accumulate(gaze_box, w.beta);
  if (!acc.defined()) return Tensor<T>::scalar(T(0));
  return acc;
}

}  // namespace transgop
