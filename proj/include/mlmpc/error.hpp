#pragma once

#include <stdexcept>
#include <string>

namespace mlmpc {

enum class ErrorKind {
  NotPSD,
  DimensionMismatch,
  ProjectionDiverged,
  OptimFailed,
  SolveFailed,
  EmptyLog,
  InvalidArgument,
  Io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NotPSD: return "NotPSD";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::ProjectionDiverged: return "ProjectionDiverged";
    case ErrorKind::OptimFailed: return "OptimFailed";
    case ErrorKind::SolveFailed: return "SolveFailed";
    case ErrorKind::EmptyLog: return "EmptyLog";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::Io: return "Io";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace mlmpc
