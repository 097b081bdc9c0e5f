#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace isslab {

/// Malformed, truncated or mismatched binary file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Little-endian writer; byte order is fixed regardless of the host.
class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  void magic(std::string_view tag) { out_.write(tag.data(), static_cast<std::streamsize>(tag.size())); }
  void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
  void u32(std::uint32_t v) { le(v); }
  void i32(std::int32_t v) { le(static_cast<std::uint32_t>(v)); }
  void u64(std::uint64_t v) { le(v); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void f64s(std::span<const double> vs) {
    for (double v : vs) f64(v);
  }
  void check() const {
    if (!out_) throw std::runtime_error("write failed");
  }

 private:
  template <typename U>
  void le(U v) {
    std::array<char, sizeof(U)> bytes{};
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out_.write(bytes.data(), bytes.size());
  }
  std::ostream& out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(in) {}

  void expect_magic(std::string_view tag) {
    std::string got(tag.size(), '\0');
    in_.read(got.data(), static_cast<std::streamsize>(got.size()));
    if (!in_ || got != tag) throw FormatError("bad magic: expected '" + std::string(tag) + "'");
  }
  std::uint8_t u8() {
    const int c = in_.get();
    if (c == std::char_traits<char>::eof()) throw FormatError("truncated file");
    return static_cast<std::uint8_t>(c);
  }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::int32_t i32() { return static_cast<std::int32_t>(le<std::uint32_t>()); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  void f64s(std::span<double> out) {
    for (double& v : out) v = f64();
  }
  /// Throws unless the stream is exhausted.
  void expect_end() {
    if (in_.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after payload");
  }

 private:
  template <typename U>
  U le() {
    std::array<unsigned char, sizeof(U)> bytes{};
    in_.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
    if (!in_) throw FormatError("truncated file");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
    return v;
  }
  std::istream& in_;
};

}  // namespace isslab
