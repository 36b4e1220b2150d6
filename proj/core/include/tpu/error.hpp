#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Core>

namespace tpu {

enum class ErrorCode {
  NonConvergence,
  SingularJacobian,
  NotSymmetric,
  DimensionMismatch,
  InvalidArgument,
  DegenerateSample,
  EmptyStratum,
  OverSampledStratum,
  SchemaMismatch,
  InconsistentMissingness,
  NonPositiveWeight,
  InsufficientCompleteCases,
  RankDeficient,
  Separation,
  NoEvents,
  ZeroDensity,
  UnderflowDenominator,
  TooManyFailures,
  SingularMiddleBlock,
  StudyAborted,
  Io,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Base exception for every recoverable failure raised by the library.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Raised by root solvers when the iteration cap is hit. Carries the last iterate.
class NonConvergence : public Error {
 public:
  NonConvergence(const std::string& what, Eigen::VectorXd last_iterate, double residual)
      : Error(ErrorCode::NonConvergence, what),
        last_iterate_(std::move(last_iterate)),
        residual_(residual) {}

  const Eigen::VectorXd& last_iterate() const noexcept { return last_iterate_; }
  double residual() const noexcept { return residual_; }

 private:
  Eigen::VectorXd last_iterate_;
  double residual_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace tpu
