#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "hnervf/dataset.hpp"
#include "hnervf/errors.hpp"
#include "hnervf/variance_function.hpp"

namespace hnervf {

/// Relative variance floor: sigma^2 never drops below this multiple of the
/// dataset median.
inline constexpr double kVarianceFloorRatio = 1e-8;

/// sigma^2 and its derivatives for the observations of one cluster.
struct ClusterVariances {
  VectorXd sigma2;
  VectorXd d1;
  VectorXd d2;
};

/// Variances of every observation in a dataset at a given gamma, floored at
/// kVarianceFloorRatio times the median.
struct DatasetVariances {
  std::vector<ClusterVariances> clusters;
  double floor = 0.0;
  bool floored = false;
};

inline DatasetVariances dataset_variances(const ClusteredDataset& data,
                                          const VarianceFunction& vf,
                                          const VectorXd& gamma) {
  DatasetVariances out;
  out.clusters.reserve(data.m());
  std::vector<double> all;
  all.reserve(static_cast<std::size_t>(data.N()));
  for (const auto& c : data.clusters()) {
    ClusterVariances cv{VectorXd(c.size()), VectorXd(c.size()), VectorXd(c.size())};
    for (Eigen::Index j = 0; j < c.size(); ++j) {
      const VarianceValue v = eval_variance(vf, gamma, c.Z.row(j).transpose());
      cv.sigma2(j) = v.sigma2;
      cv.d1(j) = v.d1;
      cv.d2(j) = v.d2;
      all.push_back(v.sigma2);
    }
    out.clusters.push_back(std::move(cv));
  }
  auto mid = all.begin() + static_cast<std::ptrdiff_t>(all.size() / 2);
  std::nth_element(all.begin(), mid, all.end());
  double median = *mid;
  if (all.size() % 2 == 0) {
    median = 0.5 * (median + *std::max_element(all.begin(), mid));
  }
  out.floor = kVarianceFloorRatio * median;
  if (!(out.floor > 0.0)) {
    throw Error(ErrorKind::singular_variance,
                "median error variance is not positive; cannot floor variances");
  }
  for (auto& cv : out.clusters) {
    for (Eigen::Index j = 0; j < cv.sigma2.size(); ++j) {
      if (cv.sigma2(j) < out.floor) {
        cv.sigma2(j) = out.floor;
        out.floored = true;
      }
    }
  }
  return out;
}

/// Covariance algebra of one cluster:
///   Sigma = tau^2 J + W,  W = diag(sigma^2),
///   Sigma^{-1} = W^{-1} - tau^2 w w' / eta,  w = W^{-1} 1,
///   eta = 1 + tau^2 sum_h sigma_h^{-2},  lambda_j = tau^2 sigma_j^{-2} / eta.
/// delta holds one row per observation (the q-vectors delta_ij).
struct ClusterGeometry {
  double tau2 = 0.0;
  VectorXd sigma2;
  VectorXd d1;
  VectorXd d2;
  MatrixXd Sigma;
  MatrixXd SigmaInv;
  double eta = 1.0;
  VectorXd lambda;
  MatrixXd delta;

  Eigen::DiagonalMatrix<double, Eigen::Dynamic> W() const { return sigma2.asDiagonal(); }
  /// R_1 = tau^2 / eta, the MSE of the BLUP.
  double r1() const { return tau2 / eta; }
};

inline ClusterGeometry cluster_geometry(double tau2, const ClusterVariances& v,
                                        const MatrixXd& Z) {
  const Eigen::Index n = v.sigma2.size();
  if (tau2 < 0.0) throw Error(ErrorKind::constraint, "tau^2 must be nonnegative");
  for (Eigen::Index j = 0; j < n; ++j) {
    if (!(v.sigma2(j) > 0.0)) {
      throw Error(ErrorKind::singular_variance, "error variance is not positive");
    }
  }
  ClusterGeometry g;
  g.tau2 = tau2;
  g.sigma2 = v.sigma2;
  g.d1 = v.d1;
  g.d2 = v.d2;

  const VectorXd w = v.sigma2.cwiseInverse();
  g.eta = 1.0 + tau2 * w.sum();
  g.lambda = (tau2 / g.eta) * w;

  g.Sigma = MatrixXd::Constant(n, n, tau2);
  g.Sigma.diagonal() += v.sigma2;
  g.SigmaInv = -(tau2 / g.eta) * w * w.transpose();
  g.SigmaInv.diagonal() += w;

  const MatrixXd check = g.Sigma * g.SigmaInv - MatrixXd::Identity(n, n);
  const double cond = g.Sigma.cwiseAbs().rowwise().sum().maxCoeff() *
                      g.SigmaInv.cwiseAbs().rowwise().sum().maxCoeff();
  const double tol = std::max(1e-10, 64.0 * std::numeric_limits<double>::epsilon() * cond);
  if (check.cwiseAbs().maxCoeff() > tol) {
    throw Error(ErrorKind::singular_variance, "closed-form inverse failed its identity check");
  }

  // delta_j = tau^4 sum_h sigma_h^{-4} s1_h z_h - tau^2 eta sigma_j^{-2} s1_j z_j
  const VectorXd a = w.cwiseProduct(w).cwiseProduct(v.d1);
  const VectorXd common = tau2 * tau2 * (Z.transpose() * a);
  g.delta.resize(n, Z.cols());
  for (Eigen::Index j = 0; j < n; ++j) {
    g.delta.row(j) =
        common.transpose() - tau2 * g.eta * w(j) * v.d1(j) * Z.row(j);
  }
  return g;
}

/// Geometry of a single cluster evaluated without a dataset-level floor.
inline ClusterGeometry cluster_geometry(const ModelParams& params, const Cluster& cluster,
                                        const VarianceFunction& vf) {
  ClusterVariances v{VectorXd(cluster.size()), VectorXd(cluster.size()),
                     VectorXd(cluster.size())};
  for (Eigen::Index j = 0; j < cluster.size(); ++j) {
    const VarianceValue val = eval_variance(vf, params.gamma, cluster.Z.row(j).transpose());
    v.sigma2(j) = val.sigma2;
    v.d1(j) = val.d1;
    v.d2(j) = val.d2;
  }
  return cluster_geometry(params.tau2, v, cluster.Z);
}

inline std::vector<ClusterGeometry> dataset_geometry(double tau2,
                                                     const DatasetVariances& vars,
                                                     const ClusteredDataset& data) {
  std::vector<ClusterGeometry> out;
  out.reserve(data.m());
  for (std::size_t i = 0; i < data.m(); ++i) {
    out.push_back(cluster_geometry(tau2, vars.clusters[i], data[i].Z));
  }
  return out;
}

}  // namespace hnervf
