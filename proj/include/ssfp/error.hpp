#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ssfp {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition on an argument was violated (shape, range, emptiness).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// An output specification cannot be applied (e.g. k larger than the class count).
class InvalidSpec : public Error {
 public:
  using Error::Error;
};

/// Malformed file or wire payload. `offset` is the byte position where parsing failed.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// The black-box endpoint could not be reached or answered with garbage.
class TransportError : public Error {
 public:
  using Error::Error;
};

}  // namespace ssfp
