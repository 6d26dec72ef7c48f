#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>

#include "otpr/error.hpp"

namespace otpr::io {

// Little-endian writer/reader used by every versioned binary format
// (checkpoints, buffer snapshots, demo sets).
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot open '" + path.string() + "' for writing");
  }

  void magic(std::string_view tag) {
    raw(tag.data(), tag.size());
    raw("\n", 1);
  }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void f64s(std::span<const double> values) {
    for (double v : values) f64(v);
  }
  void str(std::string_view s) {
    u64(s.size());
    raw(s.data(), s.size());
  }

  void finish() {
    out_.flush();
    if (!out_) throw IoError("write failed for '" + path_.string() + "'");
  }

 private:
  template <typename T>
  void le(T v) {
    unsigned char bytes[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i)
      bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    raw(bytes, sizeof(T));
  }
  void raw(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  }

  std::filesystem::path path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path)
      : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open '" + path.string() + "' for reading");
  }

  void expect_magic(std::string_view tag) {
    std::string got(tag.size() + 1, '\0');
    raw(got.data(), got.size());
    if (got.substr(0, tag.size()) != tag || got.back() != '\n')
      throw IoError("'" + path_.string() + "' is not a " + std::string(tag) + " file");
  }
  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, 1);
    return v;
  }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  void f64s(std::span<double> out) {
    for (double& v : out) v = f64();
  }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > (1ull << 32)) throw IoError("corrupt string length in '" + path_.string() + "'");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

 private:
  template <typename T>
  T le() {
    unsigned char bytes[sizeof(T)];
    raw(bytes, sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes[i]) << (8 * i);
    return v;
  }
  void raw(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw IoError("unexpected end of file in '" + path_.string() + "'");
  }

  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace otpr::io
