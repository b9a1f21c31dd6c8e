#pragma once

#include <stdexcept>
#include <string>

namespace jotr {

// Thrown when tensor extents do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
public:
    explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// Thrown when a configuration violates a documented invariant.
class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// Thrown on malformed files, short reads, bad magic bytes and similar.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

void log_warn(const std::string& message);
void log_info(const std::string& message);

} // namespace jotr
