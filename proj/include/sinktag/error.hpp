#pragma once

#include <stdexcept>
#include <string>

namespace sinktag {

// Base for every error raised by the library. The CLI maps these to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Input data violates a documented invariant (stochasticity, shapes, class sizes...).
class DataError : public Error {
 public:
  using Error::Error;
};

// Symmetric factorization failed even after the ridge was applied.
class FactorizationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace sinktag
