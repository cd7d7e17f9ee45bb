#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace localid {

enum class ErrorCode {
  UnknownAxis,
  LabelMismatch,
  InvalidLaw,
  ZeroMassEvent,
  PathLeavesSimplex,
  EmptyDataset,
  EmptyTarget,
  DegenerateWeight,
  NotSymmetric,
  NegativeEigenvalue,
  InfeasiblePoint,
  OverlapViolation,
  BridgeViolated,
  MissingOverlap,
  ConstructionInapplicable,
  InvalidSizes,
  NotBijective,
  DegenerateVariance,
  EmptyArm,
  GridTooCoarse,
  BridgeUnsolvable,
  EstimandMismatch,
  ConfigInvalid,
  PerturbationLeavesSimplex,
  ParseError,
};

std::string_view error_name(ErrorCode code);

class LabError : public std::runtime_error {
 public:
  LabError(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_name(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw LabError(code, what); }

}  // namespace localid
