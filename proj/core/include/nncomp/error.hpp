// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace nncomp {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor or layer extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition (bad argument, wrong call order).
class ContractError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or a numerical routine that failed to converge.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary container (checkpoint or IDX file).
class FormatError : public Error {
 public:
  enum class Kind {
    BadMagic,
    VersionMismatch,
    UnsupportedDtype,
    Truncated,
    LengthMismatch,
    HeaderInconsistent,
  };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Problems found while parsing or binding a schedule recipe. The message
/// always names the recipe location (line/column or key path).
class RecipeError : public Error {
 public:
  enum class Kind {
    Syntax,
    UnknownKey,
    UnknownClass,
    Unresolved,
    OutOfRange,
    MissingField,
    UnknownParameter,
  };

  RecipeError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace nncomp
