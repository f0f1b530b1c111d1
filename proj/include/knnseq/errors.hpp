#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace knnseq {

/// Caller supplied a value outside an operation's contract.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Operation called on an object that is not ready for it (untrained, empty).
class InvalidState : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A file could not be opened, written, or read back.
class StorageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated on-disk artifact. Carries the byte offset at which
/// the problem was detected.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace knnseq
