#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "transgop/tensor.hpp"

// Sectioned little-endian binary container used for checkpoints.
//
//   file    := "TGOPCKPT" u32:version u32:section_count section*
//   section := char[4]:tag u64:payload_bytes payload
//   tensors := u32:count record*
//   record  := u32:name_len utf8:name u8:dtype u32:rank u64:dims[rank] payload
//
// dtype 1 = IEEE-754 binary32, 2 = binary64; payload is row-major, little-endian.

namespace transgop::io {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

class ByteWriter {
 public:
  template <class U>
  void put_uint(U v) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i)
      buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void put_f32(float v) { put_uint(std::bit_cast<std::uint32_t>(v)); }
  void put_f64(double v) { put_uint(std::bit_cast<std::uint64_t>(v)); }
  void put_bytes(const std::string& s) { buf_.append(s); }
  void put_string(const std::string& s) {
    put_uint(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  const std::string& bytes() const { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& s) : s_(s) {}
  template <class U>
  U get_uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(s_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  float get_f32() { return std::bit_cast<float>(get_uint<std::uint32_t>()); }
  double get_f64() { return std::bit_cast<double>(get_uint<std::uint64_t>()); }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::string get_string() { return get_bytes(get_uint<std::uint32_t>()); }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > s_.size()) throw ParseError("checkpoint: truncated data");
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

/// Name + dtype + shape + values. Values are widened to double in memory; the
/// dtype decides the on-disk width, so binary32 values survive exactly.
struct TensorBlob {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<double> values;

  template <class T>
  static TensorBlob from(std::string name, const Tensor<T>& t) {
    return {std::move(name), dtype_of<T>(), t.shape(),
            std::vector<double>(t.data().begin(), t.data().end())};
  }
  template <class T>
  void copy_into(Tensor<T>& t) const {
    if (t.shape() != shape)
      throw ConfigError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) +
                        ", model expects " + shape_str(t.shape()));
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  }
};

inline std::string encode_tensors(const std::vector<TensorBlob>& blobs) {
  ByteWriter w;
  w.put_uint(static_cast<std::uint32_t>(blobs.size()));
  for (const auto& b : blobs) {
    w.put_string(b.name);
    w.put_uint(static_cast<std::uint8_t>(b.dtype));
    w.put_uint(static_cast<std::uint32_t>(b.shape.size()));
    for (auto d : b.shape) w.put_uint(static_cast<std::uint64_t>(d));
    for (double v : b.values) {
      if (b.dtype == DType::f32)
        w.put_f32(static_cast<float>(v));
      else
        w.put_f64(v);
    }
  }
  return w.take();
}

inline std::vector<TensorBlob> decode_tensors(const std::string& bytes) {
  ByteReader r(bytes);
  const auto n = r.get_uint<std::uint32_t>();
  std::vector<TensorBlob> out;
  out.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    TensorBlob b;
    b.name = r.get_string();
    const auto tag = r.get_uint<std::uint8_t>();
    if (tag != 1 && tag != 2) throw ParseError("checkpoint: unknown dtype tag for " + b.name);
    b.dtype = static_cast<DType>(tag);
    const auto rank = r.get_uint<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k)
      b.shape.push_back(static_cast<std::size_t>(r.get_uint<std::uint64_t>()));
    const std::size_t count = shape_numel(b.shape);
    b.values.resize(count);
    for (auto& v : b.values) v = b.dtype == DType::f32 ? r.get_f32() : r.get_f64();
    out.push_back(std::move(b));
  }
  if (!r.done()) throw ParseError("checkpoint: trailing bytes in tensor section");
  return out;
}

/// Ordered list of tagged sections.
class SectionFile {
 public:
  static constexpr char kMagic[9] = "TGOPCKPT";
  static constexpr std::uint32_t kVersion = 1;

  void add(std::string tag, std::string payload) {
    if (tag.size() != 4) throw ContractError("section tag must be 4 bytes: " + tag);
    sections_.emplace_back(std::move(tag), std::move(payload));
  }
  const std::string* find(const std::string& tag) const {
    for (auto& [t, p] : sections_)
      if (t == tag) return &p;
    return nullptr;
  }
  const std::string& require(const std::string& tag) const {
    if (auto* p = find(tag)) return *p;
    throw ParseError("checkpoint: missing section " + tag);
  }
  const auto& sections() const { return sections_; }

  std::string encode() const {
    ByteWriter w;
    w.put_bytes(std::string(kMagic, 8));
    w.put_uint(kVersion);
    w.put_uint(static_cast<std::uint32_t>(sections_.size()));
    for (auto& [tag, payload] : sections_) {
      w.put_bytes(tag);
      w.put_uint(static_cast<std::uint64_t>(payload.size()));
      w.put_bytes(payload);
    }
    return w.take();
  }

  static SectionFile decode(const std::string& bytes) {
    ByteReader r(bytes);
    if (r.get_bytes(8) != std::string(kMagic, 8)) throw ParseError("checkpoint: bad magic");
    if (r.get_uint<std::uint32_t>() != kVersion) throw ParseError("checkpoint: unsupported version");
    const auto n = r.get_uint<std::uint32_t>();
    SectionFile f;
    for (std::uint32_t i = 0; i < n; ++i) {
      auto tag = r.get_bytes(4);
      auto len = r.get_uint<std::uint64_t>();
      f.sections_.emplace_back(std::move(tag), r.get_bytes(static_cast<std::size_t>(len)));
    }
    if (!r.done()) throw ParseError("checkpoint: trailing bytes");
    return f;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open " + path + " for writing");
    auto bytes = encode();
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw ConfigError("failed writing " + path);
  }
  static SectionFile load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return decode(bytes);
  }

 private:
  std::vector<std::pair<std::string, std::string>> sections_;
};

}  // namespace transgop::io
