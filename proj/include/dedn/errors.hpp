#pragma once

#include <stdexcept>

namespace dedn {

/// Tensor operands with incompatible dimensions.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid user-supplied configuration value (flag or hyperparameter).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// API misuse by calling code (broken precondition).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Input data failed validation (dataset files, partitions, splits).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed binary artifact (checkpoint or bundle layout).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem failure.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite value where a finite one is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dedn
