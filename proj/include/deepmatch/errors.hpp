#pragma once

#include <stdexcept>
#include <string>

namespace dm {

/// File or stream level failure: missing file, malformed header, truncated
/// payload, trailing garbage.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// A configuration value violates one of the documented rules (divisibility,
/// ranges, unknown keys).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace dm
