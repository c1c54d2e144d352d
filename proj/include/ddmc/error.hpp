#pragma once

#include <stdexcept>
#include <string>

namespace ddmc {

enum class ErrorKind {
  shape,
  value,
  mode,
  ordering,
  integrity,
  bad_magic,
  bad_version,
  truncated,
  io,
  config,
};

/// Base for every error raised by the library. The kind drives CLI exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorKind::shape, what) {}
};

class ValueError : public Error {
 public:
  explicit ValueError(const std::string& what) : Error(ErrorKind::value, what) {}
};

class ModeError : public Error {
 public:
  explicit ModeError(const std::string& what) : Error(ErrorKind::mode, what) {}
};

class OrderingError : public Error {
 public:
  explicit OrderingError(const std::string& what) : Error(ErrorKind::ordering, what) {}
};

class IntegrityError : public Error {
 public:
  explicit IntegrityError(const std::string& what) : Error(ErrorKind::integrity, what) {}
};

class FormatError : public Error {
 public:
  FormatError(ErrorKind kind, const std::string& what) : Error(kind, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::value: return "value";
    case ErrorKind::mode: return "mode";
    case ErrorKind::ordering: return "ordering";
    case ErrorKind::integrity: return "integrity";
    case ErrorKind::bad_magic: return "bad_magic";
    case ErrorKind::bad_version: return "bad_version";
    case ErrorKind::truncated: return "truncated";
    case ErrorKind::io: return "io";
    case ErrorKind::config: return "config";
  }
  return "unknown";
}

}  // namespace ddmc
