#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "hnervf/hnervf.hpp"

namespace hnervf::testing {

/// Random clustered dataset with intercept columns in X and Z; the other
/// covariates are uniform. Responses follow the model at `theta` with
/// effects drawn from `dist`.
inline ClusteredDataset random_dataset(std::uint64_t seed, std::size_t m, Eigen::Index n_min,
                                       Eigen::Index n_max, const ModelParams& theta,
                                       EffectDistribution dist = EffectDistribution::M1,
                                       double z_hi = 3.0) {
  RandomStream rs(seed, 99, 0);
  const Eigen::Index p = theta.beta.size();
  const Eigen::Index q = theta.gamma.size();
  std::vector<Cluster> clusters;
  for (std::size_t i = 0; i < m; ++i) {
    const auto n = n_min + static_cast<Eigen::Index>(
                               std::uniform_int_distribution<long>(0, n_max - n_min)(rs.engine()));
    Cluster c;
    c.id = "c" + std::to_string(i);
    c.X.resize(n, p);
    c.Z.resize(n, q);
    c.y.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      c.X(j, 0) = 1.0;
      for (Eigen::Index k = 1; k < p; ++k) c.X(j, k) = rs.uniform(0.0, 2.0);
      c.Z(j, 0) = 1.0;
      for (Eigen::Index k = 1; k < q; ++k) c.Z(j, k) = rs.uniform(0.0, z_hi);
    }
    const double v = theta.tau2 > 0.0 ? sample_effect(dist, theta.tau2, rs) : 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double s2 = std::exp(c.Z.row(j).dot(theta.gamma));
      c.y(j) = c.X.row(j).dot(theta.beta) + v + sample_effect(dist, s2, rs, EffectRole::error);
    }
    clusters.push_back(std::move(c));
  }
  return ClusteredDataset(std::move(clusters), p, q);
}

inline ModelParams params(std::initializer_list<double> beta, std::initializer_list<double> gamma,
                          double tau2) {
  ModelParams t;
  t.beta = Eigen::Map<const VectorXd>(beta.begin(), static_cast<Eigen::Index>(beta.size()));
  t.gamma = Eigen::Map<const VectorXd>(gamma.begin(), static_cast<Eigen::Index>(gamma.size()));
  t.tau2 = tau2;
  return t;
}

/// Central-difference gradient.
inline VectorXd numeric_gradient(const std::function<double(const VectorXd&)>& f,
                                 const VectorXd& x, double h = 1e-5) {
  VectorXd g(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    VectorXd a = x, b = x;
    a(k) += h;
    b(k) -= h;
    g(k) = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

inline ModelParams unstack(const VectorXd& theta, Eigen::Index p, Eigen::Index q) {
  ModelParams t;
  t.beta = theta.head(p);
  t.gamma = theta.segment(p, q);
  t.tau2 = theta(p + q);
  return t;
}

}  // namespace hnervf::testing
