#ifndef SDEINFER_ERRORS_HPP
#define SDEINFER_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace sdeinfer {

enum class ErrorKind {
  InvalidConfig,
  ShapeMismatch,
  NonFiniteDrift,
  NotPSD,
  SingularCovariance,
  SingularInnovation,
  DomainExit,
  DegenerateWeights,
  InitFailure,
  NonFiniteJacobian,
  StepFailure,
  SingularForecastCov,
  SingularV,
  TuningFailure,
  CorruptArchive,
  IoFailure,
};

// Coarse grouping used for CLI exit codes.
enum class ErrorCategory { Config, Numeric, Io };

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFiniteDrift: return "NonFiniteDrift";
    case ErrorKind::NotPSD: return "NotPSD";
    case ErrorKind::SingularCovariance: return "SingularCovariance";
    case ErrorKind::SingularInnovation: return "SingularInnovation";
    case ErrorKind::DomainExit: return "DomainExit";
    case ErrorKind::DegenerateWeights: return "DegenerateWeights";
    case ErrorKind::InitFailure: return "InitFailure";
    case ErrorKind::NonFiniteJacobian: return "NonFiniteJacobian";
    case ErrorKind::StepFailure: return "StepFailure";
    case ErrorKind::SingularForecastCov: return "SingularForecastCov";
    case ErrorKind::SingularV: return "SingularV";
    case ErrorKind::TuningFailure: return "TuningFailure";
    case ErrorKind::CorruptArchive: return "CorruptArchive";
    case ErrorKind::IoFailure: return "IoFailure";
  }
  return "Unknown";
}

inline ErrorCategory category_of(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidConfig:
    case ErrorKind::ShapeMismatch:
      return ErrorCategory::Config;
    case ErrorKind::CorruptArchive:
    case ErrorKind::IoFailure:
      return ErrorCategory::Io;
    default:
      return ErrorCategory::Numeric;
  }
}

class SdeError : public std::runtime_error {
 public:
  SdeError(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  ErrorCategory category() const noexcept { return category_of(kind_); }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw SdeError(kind, what);
}

inline void require(bool condition, ErrorKind kind, const std::string& what) {
  if (!condition) fail(kind, what);
}

}  // namespace sdeinfer

#endif  // SDEINFER_ERRORS_HPP
