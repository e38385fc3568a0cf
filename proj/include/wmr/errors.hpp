#pragma once

#include <stdexcept>
#include <string>

namespace wmr {

/// Caller supplied something unusable: bad shapes, unreadable files, invalid
/// configuration. The CLI maps this to exit code 2.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Something failed while running: non-finite losses, I/O on output paths.
/// The CLI maps this to exit code 3.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace wmr
