#pragma once

#include <stdexcept>
#include <string>

namespace lenspsych {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid run configuration or missing prerequisite (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data: bundles, TSVs, alignments (CLI exit code 1).
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace lenspsych
