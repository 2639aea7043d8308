#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hnervf/dataset.hpp"
#include "hnervf/errors.hpp"
#include "hnervf/estimation.hpp"
#include "hnervf/geometry.hpp"

namespace hnervf {

/// Predictor of mu_i = c_i'beta + v_i given beta and the cluster geometry:
/// c_i'beta + sum_j lambda_ij (y_ij - x_ij'beta).
inline double blup(const VectorXd& beta, const ClusterGeometry& g, const Cluster& cluster,
                   const VectorXd& target) {
  if (target.size() != beta.size()) {
    throw Error(ErrorKind::shape, "target covariate vector has the wrong length");
  }
  return target.dot(beta) + g.lambda.dot(cluster.y - cluster.X * beta);
}

/// BLUP at known parameters.
inline double blup(const ModelParams& params, const Cluster& cluster, const VectorXd& target,
                   const VarianceFunction& vf) {
  return blup(params.beta, cluster_geometry(params, cluster, vf), cluster, target);
}

/// EBLUP of cluster i at the fitted parameters.
inline double eblup(const FitResult& fit, const ClusteredDataset& data, std::size_t i,
                    const VectorXd& target) {
  return blup(fit.params.beta, fit.geometry[i], data[i], target);
}

/// R_1 = tau^2 / eta.
inline double mse_first_order(const ClusterGeometry& g) { return g.r1(); }

/// R_2: contribution of estimating (beta, gamma, tau^2) to the MSE.
inline double mse_second_order(const ClusterGeometry& g, const OmegaMatrix& omega,
                               const Cluster& cluster, const VectorXd& target) {
  const double eta = g.eta;
  const VectorXd w = g.sigma2.cwiseInverse();
  const MatrixXd Ogg = omega.gamma_gamma();
  const VectorXd s_delta = g.delta.transpose() * w;

  double weighted_quad = 0.0;
  for (Eigen::Index j = 0; j < g.delta.rows(); ++j) {
    const VectorXd dj = g.delta.row(j).transpose();
    weighted_quad += w(j) * dj.dot(Ogg * dj);
  }
  const VectorXd d = target - cluster.X.transpose() * g.lambda;

  const double e2 = eta * eta;
  return g.tau2 * s_delta.dot(Ogg * s_delta) / (e2 * e2) + weighted_quad / (e2 * e2) +
         2.0 * s_delta.dot(omega.gamma_tau()) / (e2 * eta) +
         w.sum() * omega.tau_tau() / (e2 * eta) + d.dot(omega.beta_beta() * d);
}

/// Dataset-level matrices entering the cross term.
struct CrossTermAggregates {
  VectorXd T1;
  MatrixXd T2;
  MatrixXd variance_gradient_gram;  // sum (sigma^2)' z z'
  double m = 0.0;
  double N = 0.0;
};

inline CrossTermAggregates cross_term_aggregates(const FitResult& fit,
                                                 const ClusteredDataset& data) {
  if (!fit.influence) {
    throw Error(ErrorKind::precondition, "fit was run without second-order quantities");
  }
  return {fit.influence->T1, fit.influence->T2, fit.variance_gradient_gram,
          static_cast<double>(data.m()), static_cast<double>(data.N())};
}

/// R_31: covariance between the BLUP error and the first-order estimation
/// error, driven by the excess kurtoses of v and eps.
inline double mse_cross_term(const ClusterGeometry& g, const KurtosisEstimates& kappa,
                             const Cluster& cluster, const CrossTermAggregates& agg,
                             BiasFormula formula = BiasFormula::rederived) {
  const double eta = g.eta;
  const double tau2 = g.tau2;
  const double n = static_cast<double>(cluster.size());
  const VectorXd w = g.sigma2.cwiseInverse();
  const MatrixXd gamma_map = formula == BiasFormula::published
                                 ? detail::checked_inverse(agg.variance_gradient_gram,
                                                           "variance-gradient Gram matrix")
                                 : MatrixXd(agg.N / agg.m * agg.T2);
  const VectorXd T1T2 = agg.T2.transpose() * agg.T1;

  // Summing (1{j=h} - 1/n)^2 z_ih over h gives z_ij (1 - 2/n) + zbar_i / n.
  // The published closed form keeps only the h = j term, (1 - 1/n)^2 z_ij.
  const MatrixXd zw = formula == BiasFormula::published
                          ? MatrixXd((n - 1.0) * (n - 1.0) / (n * n) * cluster.Z)
                          : detail::gamma_weights(cluster);
  const double scale = agg.m / agg.N * tau2 / eta;
  double first = 0.0;
  double second = 0.0;
  for (Eigen::Index j = 0; j < cluster.size(); ++j) {
    const double M1 =
        scale * (n * tau2 * (3.0 - kappa.kappa_v) + g.sigma2(j) * (kappa.kappa_eps - 3.0));
    const VectorXd M2 =
        scale * (kappa.kappa_eps - 3.0) * g.sigma2(j) * zw.row(j).transpose();
    first += w(j) * g.delta.row(j).dot(gamma_map * M2);
    second += w(j) * (M1 - T1T2.dot(M2));
  }
  return (first + second / agg.m) / (eta * eta);
}

/// Second-order bias of R_1(phi_hat).
inline double r1_bias_correction(const ClusterGeometry& g, const OmegaMatrix& omega,
                                 const BiasTerms& bias, const Cluster& cluster) {
  const double tau2 = g.tau2;
  if (!(tau2 > 0.0)) return 0.0;
  const double eta = g.eta;
  const VectorXd w = g.sigma2.cwiseInverse();
  const VectorXd w2 = w.cwiseProduct(w);
  const MatrixXd& Z = cluster.Z;

  const VectorXd eta1 = -tau2 * (Z.transpose() * w2.cwiseProduct(g.d1));
  const VectorXd h = (2.0 * w.cwiseProduct(g.d1.cwiseProduct(g.d1)) - g.d2).cwiseProduct(w2);
  const MatrixXd eta2 = tau2 * Z.transpose() * h.asDiagonal() * Z;
  const MatrixXd Ogg = omega.gamma_gamma();

  const double e2 = eta * eta;
  const double e3 = e2 * eta;
  return -tau2 / e2 * eta1.dot(bias.b_gamma) + bias.b_tau / e2 -
         2.0 / e3 * eta1.dot(omega.gamma_tau()) + (1.0 / e3 - 1.0 / e2) * omega.tau_tau() / tau2 +
         tau2 / e3 * (eta1.dot(Ogg * eta1) - 0.5 * eta * (eta2 * Ogg).trace());
}

struct MseRow {
  std::string cluster_id;
  Eigen::Index n = 0;
  double sample_mean = 0.0;
  double eblup = 0.0;
  double r1_plugin = 0.0;
  double r1_bias = 0.0;
  double r1_corrected = 0.0;
  double r2 = 0.0;
  double r31 = 0.0;
  double mse = 0.0;
  double naive_mse = 0.0;
  double dif = 0.0;
  bool tau2_degenerate = false;
  bool kurtosis_fallback = false;
  bool clipped = false;

  double smse() const { return std::sqrt(mse); }
  double naive_smse() const { return std::sqrt(naive_mse); }
};

struct MseReport {
  std::vector<MseRow> rows;
  KurtosisEstimates kurtosis_used;
  bool kurtosis_fallback = false;
  std::string kurtosis_note;
};

/// Second-order MSE estimate of the EBLUP of cluster i:
///   [R_1 - B] + R_2 + 2 R_31, clipped at zero.
inline MseRow mse_estimate(const FitResult& fit, const ClusteredDataset& data, std::size_t i,
                           const VectorXd& target) {
  if (!fit.omega || !fit.bias || !fit.influence) {
    throw Error(ErrorKind::precondition, "fit was run without second-order quantities");
  }
  const Cluster& c = data[i];
  const ClusterGeometry& g = fit.geometry[i];
  MseRow row;
  row.cluster_id = c.id;
  row.n = c.size();
  row.sample_mean = c.y_mean();
  row.eblup = eblup(fit, data, i, target);
  row.dif = std::abs(row.sample_mean - row.eblup);
  row.r1_plugin = mse_first_order(g);
  row.naive_mse = row.r1_plugin;
  row.tau2_degenerate = !(fit.params.tau2 > 0.0);
  row.r1_bias = r1_bias_correction(g, *fit.omega, *fit.bias, c);
  row.r1_corrected = row.r1_plugin - row.r1_bias;
  row.r2 = mse_second_order(g, *fit.omega, c, target);

  KurtosisEstimates kappa;
  if (fit.kurtosis) {
    kappa = *fit.kurtosis;
  } else {
    row.kurtosis_fallback = true;
  }
  row.r31 = mse_cross_term(g, kappa, c, cross_term_aggregates(fit, data),
                           fit.options.bias_formula);
  row.mse = row.r1_corrected + row.r2 + 2.0 * row.r31;
  if (row.mse < 0.0) {
    row.mse = 0.0;
    row.clipped = true;
  }
  return row;
}

/// MSE rows for every cluster. Targets default to the cluster covariate mean.
inline MseReport predict_all(const FitResult& fit, const ClusteredDataset& data,
                             const std::vector<VectorXd>& targets = {}) {
  if (!targets.empty() && targets.size() != data.m()) {
    throw Error(ErrorKind::shape, "one target vector per cluster is required");
  }
  MseReport report;
  report.kurtosis_fallback = !fit.kurtosis.has_value();
  report.kurtosis_note = fit.kurtosis_note;
  if (fit.kurtosis) report.kurtosis_used = *fit.kurtosis;
  report.rows.reserve(data.m());
  for (std::size_t i = 0; i < data.m(); ++i) {
    const VectorXd c = targets.empty() ? data[i].x_mean() : targets[i];
    report.rows.push_back(mse_estimate(fit, data, i, c));
  }
  return report;
}

}  // namespace hnervf
