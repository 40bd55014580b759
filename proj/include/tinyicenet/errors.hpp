#pragma once

#include <stdexcept>
#include <string>

namespace tinyicenet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when tensor shapes disagree. `dimension()` names the offending axis
/// ("channels", "height", ...), so callers can report it without parsing text.
class ShapeError : public Error {
 public:
  ShapeError(std::string dimension, const std::string& what)
      : Error("shape mismatch in " + dimension + ": " + what), dimension_(std::move(dimension)) {}
  const std::string& dimension() const noexcept { return dimension_; }

 private:
  std::string dimension_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class FormatErrc { BadMagic, Truncated, VersionMismatch, ChecksumMismatch, Malformed, ArchitectureMismatch };

inline const char* to_string(FormatErrc code) {
  switch (code) {
    case FormatErrc::BadMagic: return "bad magic";
    case FormatErrc::Truncated: return "truncated";
    case FormatErrc::VersionMismatch: return "version mismatch";
    case FormatErrc::ChecksumMismatch: return "checksum mismatch";
    case FormatErrc::Malformed: return "malformed";
    case FormatErrc::ArchitectureMismatch: return "architecture mismatch";
  }
  return "unknown";
}

class FormatError : public Error {
 public:
  FormatError(FormatErrc code, const std::string& what)
      : Error(std::string(to_string(code)) + ": " + what), code_(code) {}
  FormatErrc code() const noexcept { return code_; }

 private:
  FormatErrc code_;
};

/// Numerical failure during training (non-finite loss and the like).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace tinyicenet
