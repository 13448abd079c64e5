#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "pargan/nn.hpp"

// Little-endian binary container: magic, a header of 32-bit ints, then named
// tensors as (name length, utf-8 name, rank, extents, 32-bit floats) until EOF.

namespace pargan::checkpoint {

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  static_assert(sizeof bits == sizeof f);
  std::memcpy(&bits, &f, sizeof f);
  put_u32(out, bits);
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

  std::uint32_t u32() {
    need(4, "32-bit integer");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() {
    const auto bits = u32();
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
  }
  std::string str(std::size_t n) {
    need(n, "string");
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated checkpoint reading ") + what, pos_);
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

template <typename T>
void save(const std::string& path, std::string_view magic, const std::vector<std::int32_t>& header,
          const nn::NamedParams<T>& params) {
  std::string out(magic);
  for (auto v : header) detail::put_u32(out, static_cast<std::uint32_t>(v));
  for (const auto& [name, t] : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(e));
    for (auto v : t.data()) detail::put_f32(out, static_cast<float>(v));
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
  }
  std::filesystem::rename(tmp, path);
}

/// Reads the header of a checkpoint, checking the magic.
inline std::vector<std::int32_t> read_header(const std::string& path, std::string_view magic,
                                             std::size_t header_ints) {
  detail::Reader r(detail::read_file(path));
  if (r.str(std::min<std::size_t>(magic.size(), 64)) != magic) {
    throw FormatError("bad checkpoint magic, expected " + std::string(magic), 0);
  }
  std::vector<std::int32_t> header;
  for (std::size_t i = 0; i < header_ints; ++i) header.push_back(static_cast<std::int32_t>(r.u32()));
  return header;
}

/// Loads tensors into `params` (matched by name and shape). Rejects a wrong
/// magic, a header differing from `expected_header`, and missing, unknown or
/// mis-shaped tensors.
template <typename T>
void load(const std::string& path, std::string_view magic,
          const std::vector<std::int32_t>& expected_header, const nn::NamedParams<T>& params) {
  detail::Reader r(detail::read_file(path));
  if (r.str(magic.size()) != magic) {
    throw FormatError("bad checkpoint magic, expected " + std::string(magic), 0);
  }
  for (std::size_t i = 0; i < expected_header.size(); ++i) {
    const auto at = r.pos();
    const auto v = static_cast<std::int32_t>(r.u32());
    if (v != expected_header[i]) {
      throw FormatError("checkpoint spec field " + std::to_string(i) + " is " + std::to_string(v) +
                            ", expected " + std::to_string(expected_header[i]),
                        at);
    }
  }
  // Staged so a failing load leaves the model untouched.
  std::vector<std::vector<T>> staged(params.size());
  std::vector<bool> seen(params.size(), false);
  while (!r.done()) {
    const auto at = r.pos();
    const auto len = r.u32();
    const auto name = r.str(len);
    const auto rank = r.u32();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32());
    std::size_t idx = params.size();
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].first == name) idx = i;
    }
    if (idx == params.size()) throw FormatError("unknown tensor '" + name + "'", at);
    auto t = params[idx].second;
    if (t.shape() != shape) {
      throw FormatError("tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                            shape_str(t.shape()),
                        at);
    }
    std::vector<T> values(static_cast<std::size_t>(t.numel()));
    for (auto& v : values) v = static_cast<T>(r.f32());
    staged[idx] = std::move(values);
    seen[idx] = true;
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!seen[i]) throw FormatError("checkpoint lacks tensor '" + params[i].first + "'", r.pos());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto t = params[i].second;
    std::copy(staged[i].begin(), staged[i].end(), t.mutable_data().begin());
  }
}

}  // namespace pargan::checkpoint
