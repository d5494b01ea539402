#pragma once

#include <stdexcept>
#include <string>

namespace wseg {

// Error taxonomy mirrored by the CLI exit codes: DataError -> 3,
// NumericalError -> 4. Anything else is a plain bug.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Bad or inconsistent input data: missing files, malformed masks,
// dimension mismatches between paired inputs.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(what) {}
};

// Non-finite value produced by a numeric operation, or a request that
// is numerically ill-posed (e.g. backward on a non-scalar).
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(what) {}
};

}  // namespace wseg
