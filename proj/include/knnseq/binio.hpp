#pragma once

// Little-endian binary streams with byte-offset tracking, shared by every
// on-disk artifact.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "knnseq/errors.hpp"

namespace knnseq {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& os) : os_(os) {}

  void bytes(const void* p, std::size_t n) {
    os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os_) throw StorageError("write failed at byte offset " + std::to_string(offset_));
    offset_ += n;
  }

  void magic(std::string_view m) { bytes(m.data(), m.size()); }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    bytes(&v, sizeof v);
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void array(std::span<const T> v) {
    if (!v.empty()) bytes(v.data(), v.size_bytes());
  }

  /// Zero-fill up to the next multiple of 8.
  void pad8() {
    static constexpr std::array<char, 8> zeros{};
    if (const auto r = offset_ % 8; r != 0) bytes(zeros.data(), 8 - r);
  }

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::ostream& os_;
  std::uint64_t offset_ = 0;
};

class BinaryReader {
 public:
  /// `size` is the total stream length when known; it bounds allocations made
  /// from header fields.
  explicit BinaryReader(std::istream& is, std::uint64_t start = 0,
                        std::uint64_t size = std::numeric_limits<std::uint64_t>::max())
      : is_(is), offset_(start), size_(size) {}

  void bytes(void* p, std::size_t n, std::string_view what) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw FormatError("truncated file while reading " + std::string(what), offset_ + static_cast<std::uint64_t>(is_.gcount()));
    }
    offset_ += n;
  }

  void expect_magic(std::string_view m) {
    std::string got(m.size(), '\0');
    const auto at = offset_;
    bytes(got.data(), got.size(), "magic");
    if (got != m) throw FormatError("bad magic: expected \"" + std::string(m) + "\"", at);
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get(std::string_view what) {
    T v{};
    bytes(&v, sizeof v, what);
    return v;
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  std::vector<T> array(std::size_t n, std::string_view what) {
    if (size_ != std::numeric_limits<std::uint64_t>::max() &&
        (n > (size_ - std::min(size_, offset_)) / sizeof(T))) {
      throw FormatError("truncated file: " + std::string(what) + " needs " + std::to_string(n * sizeof(T)) +
                            " bytes, " + std::to_string(size_ - std::min(size_, offset_)) + " remain",
                        offset_);
    }
    std::vector<T> v(n);
    if (n > 0) bytes(v.data(), n * sizeof(T), what);
    return v;
  }

  void skip_pad8() {
    char buf[8];
    if (const auto r = offset_ % 8; r != 0) bytes(buf, 8 - r, "padding");
  }

  std::uint64_t offset() const noexcept { return offset_; }

  [[noreturn]] void fail(const std::string& what) const { throw FormatError(what, offset_); }
  void check(bool ok, const std::string& what) const {
    if (!ok) fail(what);
  }

  bool at_end() const { return offset_ == size_ || is_.peek() == std::char_traits<char>::eof(); }

  std::uint64_t size() const noexcept { return size_; }

 private:
  std::istream& is_;
  std::uint64_t offset_;
  std::uint64_t size_;
};

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw StorageError("cannot open " + path.string() + " for writing");
  return os;
}

inline std::ifstream open_for_read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StorageError("cannot open " + path.string() + " for reading");
  return is;
}

inline std::uint64_t file_length(const std::filesystem::path& path) {
  std::error_code ec;
  const auto n = std::filesystem::file_size(path, ec);
  if (ec) throw StorageError("cannot stat " + path.string() + ": " + ec.message());
  return n;
}

}  // namespace knnseq
