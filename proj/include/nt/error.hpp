#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nt {

enum class ErrorKind {
  ShapeMismatch,
  NonFinite,
  NonFiniteLoss,
  InvalidArg,
  ArchMismatch,
  ArchIncompatible,
  UnsupportedTopology,
  EmptyLayer,
  BadMagic,
  TruncatedFile,
  CountMismatch,
  VersionUnsupported,
  PayloadLengthMismatch,
  IoError,
  Usage,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace nt
