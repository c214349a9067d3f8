#pragma once

#include <stdexcept>
#include <string>

namespace coeforge {

/// Caller supplied something the operation cannot accept (bad id, overlong input, empty target).
class InputError : public std::invalid_argument {
 public:
  explicit InputError(const std::string& what) : std::invalid_argument(what) {}
};

/// A computation produced a non-finite value or violated an internal invariant.
class InternalError : public std::runtime_error {
 public:
  explicit InternalError(const std::string& what) : std::runtime_error(what) {}
};

/// Checkpoint, corpus or artifact file could not be read back.
class LoadError : public std::runtime_error {
 public:
  explicit LoadError(const std::string& what) : std::runtime_error(what) {}
};

/// Inconsistent or unsupported configuration.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

}  // namespace coeforge
