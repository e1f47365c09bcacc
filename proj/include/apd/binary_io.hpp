#pragma once

#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "apd/common.hpp"

namespace apd::binio {

// Little-endian fixed-width encoding. All supported targets are little-endian
// hosts, so values are written with their in-memory representation.
static_assert(sizeof(float) == 4 && sizeof(double) == 8);

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  template <typename T>
  void pod(const T& v) {
    raw(&v, sizeof(T));
  }
  void u32(std::uint32_t v) { pod(v); }
  void u64(std::uint64_t v) { pod(v); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void raw(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    hash_.update(p, n);
  }
  std::uint64_t checksum() const { return hash_.digest(); }

 private:
  std::ostream& out_;
  Fnv1a hash_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string what) : in_(in), what_(std::move(what)) {}

  template <typename T>
  T pod() {
    T v{};
    raw(&v, sizeof(T));
    return v;
  }
  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  std::string str(std::size_t max_len = 1 << 20) {
    const auto n = u32();
    if (n > max_len) throw FormatError(what_ + ": implausible string length", offset_);
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw FormatError(what_ + ": unexpected end of file", offset_ + static_cast<std::uint64_t>(in_.gcount()));
    hash_.update(p, n);
    offset_ += n;
  }
  std::uint64_t offset() const { return offset_; }
  std::uint64_t checksum() const { return hash_.digest(); }
  [[noreturn]] void fail(const std::string& msg) const { throw FormatError(what_ + ": " + msg, offset_); }
  bool at_eof() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& in_;
  std::string what_;
  Fnv1a hash_;
  std::uint64_t offset_ = 0;
};

}  // namespace apd::binio
