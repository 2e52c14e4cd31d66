#pragma once

#include <array>
#include <cmath>
#include <string>

#include "transgop/dual.hpp"
#include "transgop/errors.hpp"

namespace transgop {

/// Axis-aligned box by corners, normalized image coordinates.
template <class S = double>
struct BoxCorners {
  S x1{}, y1{}, x2{}, y2{};

  S width() const { return x2 - x1; }
  S height() const { return y2 - y1; }
  S area() const { return width() * height(); }
  bool valid() const { return value_of(x1) < value_of(x2) && value_of(y1) < value_of(y2); }
  std::array<double, 2> center() const {
    return {value_of((x1 + x2) * S(0.5)), value_of((y1 + y2) * S(0.5))};
  }
  bool contains(double x, double y) const {
    return value_of(x1) <= x && x <= value_of(x2) && value_of(y1) <= y && y <= value_of(y2);
  }
  friend bool operator==(const BoxCorners&, const BoxCorners&) = default;
};

using Box = BoxCorners<double>;

template <class S = double>
struct BoxCXCYWH {
  S cx{}, cy{}, w{}, h{};

  BoxCorners<S> corners() const {
    const S hw = w * S(0.5), hh = h * S(0.5);
    return {cx - hw, cy - hh, cx + hw, cy + hh};
  }
  static BoxCXCYWH from(const BoxCorners<S>& b) {
    return {(b.x1 + b.x2) * S(0.5), (b.y1 + b.y2) * S(0.5), b.x2 - b.x1, b.y2 - b.y1};
  }
};

template <class S>
void require_box(const BoxCorners<S>& b, const char* what) {
  if (!(value_of(b.x2) - value_of(b.x1) > 0) || !(value_of(b.y2) - value_of(b.y1) > 0))
    throw ContractError(std::string(what) + ": degenerate box (zero or negative area)");
}

template <class S>
S box_iou(const BoxCorners<S>& a, const BoxCorners<S>& b) {
  const S iw = smax(S(0), smin(a.x2, b.x2) - smax(a.x1, b.x1));
  const S ih = smax(S(0), smin(a.y2, b.y2) - smax(a.y1, b.y1));
  const S inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

/// Generalized IoU: IoU - |C \ (A u B)| / |C| with C the enclosing box.
template <class S>
S giou(const BoxCorners<S>& a, const BoxCorners<S>& b) {
  require_box(a, "giou");
  require_box(b, "giou");
  const S iw = smax(S(0), smin(a.x2, b.x2) - smax(a.x1, b.x1));
  const S ih = smax(S(0), smin(a.y2, b.y2) - smax(a.y1, b.y1));
  const S inter = iw * ih;
  const S uni = a.area() + b.area() - inter;
  const S cw = smax(a.x2, b.x2) - smin(a.x1, b.x1);
  const S ch = smax(a.y2, b.y2) - smin(a.y1, b.y1);
  const S c = cw * ch;
  return inter / uni - (c - uni) / c;
}

template <class S>
S giou_loss(const BoxCorners<S>& a, const BoxCorners<S>& b) {
  return S(1) - giou(a, b);
}

/// Sum of absolute differences of (cx, cy, w, h).
template <class S>
S l1_box_loss(const BoxCXCYWH<S>& a, const BoxCXCYWH<S>& b) {
  return sabs(a.cx - b.cx) + sabs(a.cy - b.cy) + sabs(a.w - b.w) + sabs(a.h - b.h);
}

}  // namespace transgop
