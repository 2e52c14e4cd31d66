#pragma once

#include <array>
#include <cmath>
#include <cstddef>

namespace transgop {

/// Forward-mode dual number carrying N partial derivatives. Used for small
/// closed-form per-row functions (box losses) whose reverse rule would be
/// tedious to hand-derive.
template <class T, std::size_t N>
struct Dual {
  T v{};
  std::array<T, N> d{};

  Dual() = default;
  Dual(T value) : v(value) {}  // NOLINT: implicit lift from constants
  static Dual variable(T value, std::size_t i) {
    Dual r(value);
    r.d[i] = T(1);
    return r;
  }

  friend Dual operator+(const Dual& a, const Dual& b) {
    Dual r(a.v + b.v);
    for (std::size_t i = 0; i < N; ++i) r.d[i] = a.d[i] + b.d[i];
    return r;
  }
  friend Dual operator-(const Dual& a, const Dual& b) {
    Dual r(a.v - b.v);
    for (std::size_t i = 0; i < N; ++i) r.d[i] = a.d[i] - b.d[i];
    return r;
  }
  friend Dual operator-(const Dual& a) {
    Dual r(-a.v);
    for (std::size_t i = 0; i < N; ++i) r.d[i] = -a.d[i];
    return r;
  }
  friend Dual operator*(const Dual& a, const Dual& b) {
    Dual r(a.v * b.v);
    for (std::size_t i = 0; i < N; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
    return r;
  }
  friend Dual operator/(const Dual& a, const Dual& b) {
    Dual r(a.v / b.v);
    const T inv = T(1) / (b.v * b.v);
    for (std::size_t i = 0; i < N; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) * inv;
    return r;
  }
  friend bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
  friend bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
  friend bool operator<=(const Dual& a, const Dual& b) { return a.v <= b.v; }
  friend bool operator>=(const Dual& a, const Dual& b) { return a.v >= b.v; }
};

template <class T, std::size_t N>
Dual<T, N> abs(const Dual<T, N>& a) {
  return a.v < T(0) ? -a : a;
}

// Scalar helpers that work for plain floating point and Dual alike.
template <class S>
S smin(const S& a, const S& b) {
  return b < a ? b : a;
}
template <class S>
S smax(const S& a, const S& b) {
  return a < b ? b : a;
}
template <class S>
S sabs(const S& a) {
  using std::abs;
  return abs(a);
}

template <class S>
struct ScalarValue {
  static auto get(const S& s) { return s; }
};
template <class T, std::size_t N>
struct ScalarValue<Dual<T, N>> {
  static T get(const Dual<T, N>& s) { return s.v; }
};

template <class S>
auto value_of(const S& s) {
  return ScalarValue<S>::get(s);
}

}  // namespace transgop
