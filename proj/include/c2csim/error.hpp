#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace c2c {

// Invalid or unresolvable configuration (unknown profile name, bad parameters).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file. Carries the 1-based line number when known.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// The analytic model was asked for something it cannot evaluate.
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A model does not fit the memory pool it must live in.
class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace c2c
