#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace hgl {

// Schema violations: unknown types/relations, bad ranges, malformed graph files.
class SchemaError : public std::runtime_error {
 public:
  explicit SchemaError(const std::string& msg) : std::runtime_error(msg) {}
  SchemaError(const std::string& msg, std::vector<std::string> violations)
      : std::runtime_error(msg + format_list(violations)),
        violations_(std::move(violations)) {}
  const std::vector<std::string>& violations() const { return violations_; }

 private:
  static std::string format_list(const std::vector<std::string>& v) {
    std::string s;
    for (const auto& item : v) s += "\n  - " + item;
    return s;
  }
  std::vector<std::string> violations_;
};

// Dimension or layout mismatch in a math op; message names the op.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite value produced by a math op or optimizer update.
class NumericFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid experiment or component configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hgl
