#pragma once

#include <stdexcept>
#include <string>

namespace gazekit {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input outside the domain of a mathematical operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// File contents are malformed, truncated or carry the wrong format tag.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Stored model architecture differs from the one requested.
class ArchitectureMismatch : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, divergence or a failed optimizer.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Configuration rejected by an operation (e.g. PCCR without a glint).
class UnsupportedConfiguration : public Error {
 public:
  using Error::Error;
};

}  // namespace gazekit
