#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace qgs {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible operand shapes; the message carries both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or consumed by a numeric op.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Training loss became non-finite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// Malformed binary file. `offset` is the byte position where decoding failed
// and `section` names the record that could not be read.
class ParseError : public Error {
 public:
  ParseError(const std::string& section, std::size_t offset, const std::string& what)
      : Error("parse error in section '" + section + "' at byte " + std::to_string(offset) +
              ": " + what),
        section_(section),
        offset_(offset) {}

  const std::string& section() const { return section_; }
  std::size_t offset() const { return offset_; }

 private:
  std::string section_;
  std::size_t offset_;
};

}  // namespace qgs
