#pragma once

// Little-endian byte encoding shared by the dataset and checkpoint formats.

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "restune/errors.hpp"

namespace restune::detail {

class ByteWriter {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void magic(const char (&tag)[5]) { bytes(tag, 4); }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }

  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string what) : data_(data), what_(std::move(what)) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

  void expect_magic(const char (&tag)[5]) {
    need(4, "magic");
    if (std::memcmp(data_.data() + pos_, tag, 4) != 0) {
      throw ParseError(what_ + ": bad magic, expected '" + std::string(tag) + "'", pos_);
    }
    pos_ += 4;
  }
  std::uint8_t u8(const char* field) { return static_cast<std::uint8_t>(get_le(1, field)); }
  std::uint16_t u16(const char* field) { return static_cast<std::uint16_t>(get_le(2, field)); }
  std::uint32_t u32(const char* field) { return static_cast<std::uint32_t>(get_le(4, field)); }
  std::uint64_t u64(const char* field) { return get_le(8, field); }
  float f32(const char* field) {
    const auto bits = u32(field);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64(const char* field) {
    const auto bits = u64(field);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(std::size_t n, const char* field) {
    need(n, field);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n, const char* field) const {
    if (remaining() < n) {
      throw ParseError(what_ + ": truncated while reading " + field + " (need " + std::to_string(n) + " bytes, have " +
                           std::to_string(remaining()) + ")",
                       pos_);
    }
  }

 private:
  std::uint64_t get_le(int n, const char* field) {
    need(static_cast<std::size_t>(n), field);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace restune::detail
