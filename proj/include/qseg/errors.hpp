#pragma once

#include <stdexcept>
#include <string>

namespace qseg {

// Contract violations (bad shapes, invalid arguments) throw std::invalid_argument.
// These two classes exist so callers (the CLI in particular) can map failure
// categories to distinct exit codes.

class io_error : public std::runtime_error {
 public:
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace qseg
