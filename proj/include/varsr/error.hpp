#pragma once

#include <stdexcept>
#include <string>

namespace varsr {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, long long offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  long long offset() const { return offset_; }

 private:
  long long offset_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ChecksumError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or broken invariants while sampling tokens or residuals.
class GenerationError : public Error {
 public:
  using Error::Error;
};

}  // namespace varsr
