#pragma once

#include <stdexcept>
#include <string>

namespace asen {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes of operands do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API precondition (detached tensor, non-scalar loss, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by an operation, or a non-finite training loss.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class DegenerateVectorError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

// Attribute index outside the vocabulary.
class VocabularyError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents: bad magic, truncation, bad manifest line.
class FormatError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

// Invalid synthetic dataset specification.
class SpecError : public Error {
 public:
  using Error::Error;
};

}  // namespace asen
