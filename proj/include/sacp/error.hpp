#pragma once

#include <stdexcept>
#include <string>

namespace sacp {

// Input that violates a documented precondition or file format.
class ValidationError : public std::invalid_argument {
public:
  explicit ValidationError(const std::string &what) : std::invalid_argument(what) {}
};

// Failure while executing an otherwise valid request (sampler exhaustion,
// divergence, child process trouble, ...).
class RuntimeFailure : public std::runtime_error {
public:
  explicit RuntimeFailure(const std::string &what) : std::runtime_error(what) {}
};

} // namespace sacp
