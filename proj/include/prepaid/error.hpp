#pragma once

#include <stdexcept>
#include <string>

namespace prepaid {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid argument or value outside a parameter/statistic domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Factorization or linear-system failure that survived regularization.
class NumericError : public Error {
 public:
  using Error::Error;
};

class SimulationError : public Error {
 public:
  using Error::Error;
};

class DegenerateGeometry : public Error {
 public:
  using Error::Error;
};

class OptimizationError : public Error {
 public:
  using Error::Error;
};

class UnsupportedMethod : public Error {
 public:
  using Error::Error;
};

class EmptyDatabase : public Error {
 public:
  using Error::Error;
};

/// Errors raised while decoding a PPDB file. `kind()` tells them apart.
class FormatError : public Error {
 public:
  enum class Kind { bad_magic, unsupported_version, truncated, checksum_mismatch, inconsistent, io };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace prepaid
