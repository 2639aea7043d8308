#pragma once

#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Dense>

namespace hnervf {

enum class ErrorKind {
  constraint,        // variance-function domain violated
  singular_variance, // sigma^2 not positive even after flooring
  singular_design,   // rank-deficient regression design
  rank,              // auxiliary matrix could not be inverted
  non_convergence,
  precondition,
  shape,
  kurtosis_unidentified,
  kurtosis_undefined,
  registry,
  parse,
  schema,
  study_failure,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::constraint: return "constraint";
    case ErrorKind::singular_variance: return "singular-variance";
    case ErrorKind::singular_design: return "singular-design";
    case ErrorKind::rank: return "rank";
    case ErrorKind::non_convergence: return "non-convergence";
    case ErrorKind::precondition: return "precondition";
    case ErrorKind::shape: return "shape";
    case ErrorKind::kurtosis_unidentified: return "kurtosis-unidentified";
    case ErrorKind::kurtosis_undefined: return "kurtosis-undefined";
    case ErrorKind::registry: return "registry";
    case ErrorKind::parse: return "parse";
    case ErrorKind::schema: return "schema";
    case ErrorKind::study_failure: return "study-failure";
  }
  return "unknown";
}

/// Base exception for every failure raised by the library. The kind drives
/// CLI exit codes; the stage (when set) names the pipeline step that failed.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& stage() const noexcept { return stage_; }

  void set_stage(std::string stage) { stage_ = std::move(stage); }

 private:
  ErrorKind kind_;
  std::string stage_;
};

class SingularDesignError : public Error {
 public:
  SingularDesignError(const std::string& what, long column)
      : Error(ErrorKind::singular_design, what), column_(column) {}
  /// Zero-based index of the first column that is linearly dependent on the
  /// preceding ones, or -1 when unknown.
  long column() const noexcept { return column_; }

 private:
  long column_;
};

class NonConvergenceError : public Error {
 public:
  NonConvergenceError(const std::string& what, Eigen::VectorXd last_iterate,
                      double residual_norm)
      : Error(ErrorKind::non_convergence, what),
        last_iterate_(std::move(last_iterate)),
        residual_norm_(residual_norm) {}

  const Eigen::VectorXd& last_iterate() const noexcept { return last_iterate_; }
  double residual_norm() const noexcept { return residual_norm_; }

 private:
  Eigen::VectorXd last_iterate_;
  double residual_norm_;
};

}  // namespace hnervf
