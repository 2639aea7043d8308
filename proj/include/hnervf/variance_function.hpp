#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "hnervf/errors.hpp"

namespace hnervf {

enum class VarianceKind { exponential, quadratic, custom };

inline const char* to_string(VarianceKind kind) {
  switch (kind) {
    case VarianceKind::exponential: return "exponential";
    case VarianceKind::quadratic: return "quadratic";
    case VarianceKind::custom: return "custom";
  }
  return "unknown";
}

/// Error-variance function sigma^2(z'gamma) together with its first two
/// derivatives in the linear index. Custom functions supply both derivatives
/// explicitly.
struct VarianceFunction {
  using Scalar = std::function<double(double)>;
  using Domain = std::function<bool(double index, const Eigen::VectorXd& gamma)>;

  VarianceKind kind = VarianceKind::exponential;
  std::string name;
  Scalar eval;
  Scalar d1;
  Scalar d2;
  Domain domain_check;

  bool in_domain(double index, const Eigen::VectorXd& gamma) const {
    return !domain_check || domain_check(index, gamma);
  }
};

inline VarianceFunction exponential_variance() {
  auto e = [](double x) { return std::exp(x); };
  return {VarianceKind::exponential, "exponential", e, e, e, {}};
}

/// sigma^2(x) = x^2. The sign of gamma is not identified, so gamma_1 > 0 is
/// imposed.
inline VarianceFunction quadratic_variance() {
  return {VarianceKind::quadratic,
          "quadratic",
          [](double x) { return x * x; },
          [](double x) { return 2.0 * x; },
          [](double) { return 2.0; },
          [](double, const Eigen::VectorXd& gamma) {
            return gamma.size() > 0 && gamma(0) > 0.0;
          }};
}

inline VarianceFunction custom_variance(std::string name, VarianceFunction::Scalar eval,
                                        VarianceFunction::Scalar d1,
                                        VarianceFunction::Scalar d2,
                                        VarianceFunction::Domain domain = {}) {
  if (!eval || !d1 || !d2) {
    throw Error(ErrorKind::registry,
                "custom variance function '" + name + "' must supply eval, d1 and d2");
  }
  return {VarianceKind::custom, std::move(name), std::move(eval), std::move(d1),
          std::move(d2), std::move(domain)};
}

inline VarianceFunction variance_function_by_name(const std::string& name) {
  if (name == "exponential" || name == "exp") return exponential_variance();
  if (name == "quadratic") return quadratic_variance();
  throw Error(ErrorKind::registry, "unknown variance function '" + name + "'");
}

struct VarianceValue {
  double sigma2 = 0.0;
  double d1 = 0.0;
  double d2 = 0.0;
  bool floored = false;
};

/// Evaluates sigma^2, (sigma^2)' and (sigma^2)'' at z'gamma. Values below
/// `floor` are raised to it and flagged.
inline VarianceValue eval_variance(const VarianceFunction& vf, const Eigen::VectorXd& gamma,
                                   const Eigen::Ref<const Eigen::VectorXd>& z,
                                   double floor = 0.0) {
  if (z.size() != gamma.size()) {
    throw Error(ErrorKind::shape, "variance covariate length " + std::to_string(z.size()) +
                                      " does not match gamma length " +
                                      std::to_string(gamma.size()));
  }
  const double index = z.dot(gamma);
  if (!vf.in_domain(index, gamma)) {
    throw Error(ErrorKind::constraint,
                std::string("gamma violates the domain of the ") + vf.name +
                    " variance function");
  }
  VarianceValue out{vf.eval(index), vf.d1(index), vf.d2(index), false};
  if (!(out.sigma2 >= 0.0) || !std::isfinite(out.sigma2)) {
    throw Error(ErrorKind::singular_variance,
                "variance function returned a negative or non-finite value");
  }
  if (out.sigma2 < floor) {
    out.sigma2 = floor;
    out.floored = true;
  }
  return out;
}

}  // namespace hnervf
