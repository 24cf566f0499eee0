#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cosched {

enum class ErrorCode {
  InvalidArgument,
  AddressSpaceExhausted,
  AlreadyMapped,
  NotMapped,
  OverlapDetected,
  CycleDetected,
  InconsistentUnion,
  RingFull,
  PoolExhausted,
  AlreadyBound,
  NotBound,
  DependencyViolation,
  Stalled,
  ConfigError,
};

std::string_view to_string(ErrorCode code);

/// Every recoverable simulator error. The code is what tests and callers branch on.
class SimError : public std::runtime_error {
 public:
  SimError(ErrorCode code, const std::string& what);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace cosched
