#include "cosched/error.hpp"

namespace cosched {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::AddressSpaceExhausted: return "AddressSpaceExhausted";
    case ErrorCode::AlreadyMapped: return "AlreadyMapped";
    case ErrorCode::NotMapped: return "NotMapped";
    case ErrorCode::OverlapDetected: return "OverlapDetected";
    case ErrorCode::CycleDetected: return "CycleDetected";
    case ErrorCode::InconsistentUnion: return "InconsistentUnion";
    case ErrorCode::RingFull: return "RingFull";
    case ErrorCode::PoolExhausted: return "PoolExhausted";
    case ErrorCode::AlreadyBound: return "AlreadyBound";
    case ErrorCode::NotBound: return "NotBound";
    case ErrorCode::DependencyViolation: return "DependencyViolation";
    case ErrorCode::Stalled: return "Stalled";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

SimError::SimError(ErrorCode code, const std::string& what)
    : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

}  // namespace cosched
