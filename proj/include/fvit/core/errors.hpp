#pragma once

#include <stdexcept>
#include <string>

namespace fvit {

/// Shape or axis disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A scalar hyperparameter outside its legal range (eps <= 0, even kernel size, ...).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A model or block configuration that cannot be built.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed input file (bad magic, wrong record size, truncated payload).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Two sources that must agree do not (image/label counts, checkpoint tensor names).
class ConsistencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// API misuse: backward on an empty tape, unknown preset name, label out of range.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite values where finite ones are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fvit
