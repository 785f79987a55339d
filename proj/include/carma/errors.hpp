#pragma once

#include <stdexcept>
#include <string>

namespace carma {

// Violated precondition on an API call (bad argument, wrong state).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

class IndexError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Text outside the tokenizer alphabet or vocabulary.
class EncodingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Config schema violations; the CLI maps these to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Loss became NaN/inf during training.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN reached an operation that refuses to propagate it silently.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace carma
