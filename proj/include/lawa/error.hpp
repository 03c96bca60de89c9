#pragma once

#include <stdexcept>
#include <string>

namespace lawa {

// Runtime failure: I/O, malformed files, numeric blow-ups.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition (bad flag, incompatible plan, ...).
// The CLI reports these with exit code 1 before touching the filesystem.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A container or manifest file that does not parse or violates its layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace lawa
