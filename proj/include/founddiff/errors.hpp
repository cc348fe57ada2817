#pragma once

#include <stdexcept>
#include <string>

namespace founddiff {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Invalid or inconsistent run configuration (CLI exit code 2).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

// Simulation / dataset / checkpoint I/O problems (CLI exit code 3).
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(what) {}
};

// Training produced a non-finite loss (CLI exit code 4).
class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& what) : Error(what) {}
};

}  // namespace founddiff
