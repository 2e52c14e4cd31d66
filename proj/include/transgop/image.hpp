#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "transgop/errors.hpp"
#include "transgop/tensor.hpp"

namespace transgop {

/// 8-bit interleaved RGB raster, row-major.
struct Raster {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;

  Raster() = default;
  Raster(std::size_t w, std::size_t h, std::array<std::uint8_t, 3> fill = {0, 0, 0})
      : width(w), height(h), rgb(w * h * 3) {
    for (std::size_t i = 0; i < w * h; ++i)
      for (int c = 0; c < 3; ++c) rgb[i * 3 + c] = fill[c];
  }
  bool empty() const { return rgb.empty(); }
  std::array<std::uint8_t, 3> at(std::size_t x, std::size_t y) const {
    const std::size_t i = (y * width + x) * 3;
    return {rgb[i], rgb[i + 1], rgb[i + 2]};
  }
  void set(std::size_t x, std::size_t y, std::array<std::uint8_t, 3> c) {
    const std::size_t i = (y * width + x) * 3;
    rgb[i] = c[0];
    rgb[i + 1] = c[1];
    rgb[i + 2] = c[2];
  }
  friend bool operator==(const Raster&, const Raster&) = default;
};

/// [3 x H x W] tensor with values in [0, 1].
template <class T>
Tensor<T> raster_to_tensor(const Raster& r) {
  std::vector<T> v(3 * r.width * r.height);
  const std::size_t hw = r.width * r.height;
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) v[c * hw + p] = static_cast<T>(r.rgb[p * 3 + c]) / T(255);
  return Tensor<T>({3, r.height, r.width}, std::move(v));
}

namespace detail {
inline void skip_pnm_space(std::istream& is) {
  for (;;) {
    int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (c == ' ' || c == '\n' || c == '\r' || c == '\t') {
      is.get();
    } else {
      return;
    }
  }
}
}  // namespace detail

inline void write_ppm(const std::string& path, const Raster& r) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path);
  os << "P6\n" << r.width << ' ' << r.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(r.rgb.data()), static_cast<std::streamsize>(r.rgb.size()));
}

inline Raster read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open image " + path);
  std::string magic;
  is >> magic;
  if (magic != "P6") throw ParseError(path + ": not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  detail::skip_pnm_space(is);
  is >> w;
  detail::skip_pnm_space(is);
  is >> h;
  detail::skip_pnm_space(is);
  is >> maxval;
  if (!is || w == 0 || h == 0 || maxval != 255) throw ParseError(path + ": bad PPM header");
  is.get();
  Raster r(w, h);
  is.read(reinterpret_cast<char*>(r.rgb.data()), static_cast<std::streamsize>(r.rgb.size()));
  if (!is) throw ParseError(path + ": truncated PPM payload");
  return r;
}

/// Portable graymap (P5), 8-bit.
inline std::string encode_pgm(std::size_t w, std::size_t h, const std::vector<std::uint8_t>& gray) {
  std::ostringstream os;
  os << "P5\n" << w << ' ' << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
  return os.str();
}

}  // namespace transgop
