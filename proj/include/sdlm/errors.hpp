#pragma once

#include <stdexcept>
#include <string>

namespace sdlm {

/// Base class for every contract failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN / Inf encountered or produced.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Token id, target id or unit reference out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Caller violated an API precondition (e.g. non-scalar backward root).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Bad data handed to an operation (empty corpus, short text, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Sequence would exceed the model's context window.
class TruncationError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss or gradient.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace sdlm
