#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace qfilter {

enum class ErrorKind {
  NotHermitian,
  NotPSD,
  TooFarFromDomain,
  ShapeMismatch,
  ZeroProbabilityJump,
  DegenerateNormalization,
  RateOverflow,
  NotNormalized,
  SingularNormalizer,
  DegenerateOutcome,
  InsufficientData,
  TooManyAborted,
  ParseError,
  ValidationError,
};

constexpr std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::NotHermitian: return "NotHermitian";
    case ErrorKind::NotPSD: return "NotPSD";
    case ErrorKind::TooFarFromDomain: return "TooFarFromDomain";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::ZeroProbabilityJump: return "ZeroProbabilityJump";
    case ErrorKind::DegenerateNormalization: return "DegenerateNormalization";
    case ErrorKind::RateOverflow: return "RateOverflow";
    case ErrorKind::NotNormalized: return "NotNormalized";
    case ErrorKind::SingularNormalizer: return "SingularNormalizer";
    case ErrorKind::DegenerateOutcome: return "DegenerateOutcome";
    case ErrorKind::InsufficientData: return "InsufficientData";
    case ErrorKind::TooManyAborted: return "TooManyAborted";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::ValidationError: return "ValidationError";
  }
  return "Unknown";
}

/// Six significant digits, for numbers quoted in error messages.
inline std::string format_real(double x) {
  std::ostringstream os;
  os.precision(6);
  os << x;
  return os.str();
}

/// Every failure raised by the library carries one of the kinds above so that
/// callers (and the CLI exit-code mapping) can dispatch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind), message_(message) {}

  ErrorKind kind() const noexcept { return kind_; }
  /// The message without the kind prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorKind kind_;
  std::string message_;
};

}  // namespace qfilter
