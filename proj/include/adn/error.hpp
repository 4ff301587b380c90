#pragma once

#include <stdexcept>
#include <string>

namespace adn {

enum class Errc {
  InvalidArgument,
  ShapeMismatch,
  BadMagic,
  UnknownVersion,
  Checksum,
  SizeMismatch,
  Corrupt,
  NonBinaryLabel,
  InconsistentSpec,
  Unsupported,
  ClassAbsent,
  Divergence,
  GridMismatch,
  Io,
};

const char* to_string(Errc code);

// Validation failure on user-supplied data or arguments. Everything else that
// escapes the library is treated as an internal error by the CLI.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace adn
