#pragma once

#include <stdexcept>
#include <string>

namespace suscept {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition on an argument or configuration was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable input file.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// SGLD chain left the region where its losses are meaningful.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require(bool cond, const std::string& message) {
  if (!cond) throw InvalidArgument(message);
}

}  // namespace detail
}  // namespace suscept
