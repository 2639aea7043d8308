#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hnervf/dataset.hpp"
#include "hnervf/errors.hpp"
#include "hnervf/geometry.hpp"
#include "hnervf/variance_function.hpp"

namespace hnervf {

// -------------------------------------------------------------------------
// Options and result types
// -------------------------------------------------------------------------

/// Which algebraic form of the second-order bias of (beta, gamma) and of the
/// gamma part of the cross term R_31 is evaluated.
///   rederived: the forms obtained by carrying the Taylor expansion through
///              with the N^{-1} normalisation of the estimating equation.
///   published: the closed forms exactly as printed with the method.
enum class BiasFormula { rederived, published };

/// Coefficient multiplying kappa_eps * sum_j sigma_ij^4 in the expected sum
/// of fourth powers of within-cluster residuals.
///   exact:     n^{-3}(n-1)(n^2-3n+3)
///   published: n^{-4}(n-1)(n-2)(n^2-n-1)
enum class KurtosisCoefficient { exact, published };

struct FitOptions {
  std::optional<VectorXd> gamma_init;  // empty means "auto"
  int max_newton_iters = 50;
  double newton_tol = 1e-10;
  bool tau2_truncation = true;
  BiasFormula bias_formula = BiasFormula::rederived;
  KurtosisCoefficient kurtosis_coefficient = KurtosisCoefficient::exact;
  /// Skip influence functions, bias terms and kurtosis (point estimates and
  /// EBLUPs only).
  bool point_estimates_only = false;

  void validate() const {
    if (max_newton_iters < 1) {
      throw Error(ErrorKind::schema, "max_newton_iters must be at least 1");
    }
    if (!(newton_tol > 0.0)) throw Error(ErrorKind::schema, "newton_tol must be positive");
  }
};

struct OlsFit {
  VectorXd beta;
  MatrixXd XtX_inv;
};

struct GammaSolve {
  VectorXd gamma;
  VectorXd gamma_init;
  int iterations = 0;
  double residual_norm = 0.0;
};

struct Tau2Estimate {
  double value = 0.0;
  double raw = 0.0;
  bool truncated = false;
};

/// Per-cluster influence vectors (one row per cluster) and the dataset
/// aggregates T_1, T_2 they are built from.
struct InfluenceSet {
  MatrixXd psi_beta;   // m x p
  MatrixXd psi_gamma;  // m x q
  VectorXd psi_tau;    // m
  VectorXd u1;         // m
  MatrixXd u2;         // m x q
  VectorXd T1;         // q
  MatrixXd T2;         // q x q
};

/// Estimated covariance of (beta, gamma, tau^2), ordered in that sequence.
struct OmegaMatrix {
  MatrixXd full;
  Eigen::Index p = 0;
  Eigen::Index q = 0;

  MatrixXd beta_beta() const { return full.topLeftCorner(p, p); }
  MatrixXd beta_gamma() const { return full.block(0, p, p, q); }
  VectorXd beta_tau() const { return full.block(0, p + q, p, 1); }
  MatrixXd gamma_gamma() const { return full.block(p, p, q, q); }
  VectorXd gamma_tau() const { return full.block(p, p + q, q, 1); }
  double tau_tau() const { return full(p + q, p + q); }
};

struct BiasTerms {
  VectorXd b_beta;
  VectorXd b_gamma;
  double b_tau = 0.0;
  MatrixXd omega_beta_star_gamma;  // p x q, column s pairs with gamma_s
  VectorXd omega_beta_star_tau;    // p
};

struct KurtosisEstimates {
  double kappa_v = 3.0;
  double kappa_eps = 3.0;
};

struct FitResult {
  ModelParams params;
  VectorXd beta_ols;
  MatrixXd XtX_inv;
  GammaSolve gamma_solve;
  Tau2Estimate tau2;
  bool variance_floored = false;
  double variance_floor = 0.0;
  std::vector<ClusterGeometry> geometry;  // at the fitted parameters
  FitOptions options;

  // Second-order quantities; empty when point_estimates_only is set.
  std::optional<InfluenceSet> influence;
  std::optional<OmegaMatrix> omega;
  std::optional<BiasTerms> bias;
  MatrixXd variance_gradient_gram;  // sum_kh (sigma^2)'_kh z_kh z_kh'
  std::optional<KurtosisEstimates> kurtosis;
  std::string kurtosis_note;  // reason kurtosis is missing, if it is
};

// -------------------------------------------------------------------------
// Small helpers
// -------------------------------------------------------------------------

namespace detail {

/// Within-cluster residuals y_ij - ybar_i - (x_ij - xbar_i)' beta.
inline VectorXd within_residuals(const Cluster& c, const VectorXd& beta) {
  const VectorXd e = c.y - c.X * beta;
  return e.array() - e.mean();
}

/// Weight vectors a_ij = (1 - 2/n_i) z_ij + zbar_i / n_i, one row per
/// observation.
inline MatrixXd gamma_weights(const Cluster& c) {
  const double n = static_cast<double>(c.size());
  MatrixXd a = (1.0 - 2.0 / n) * c.Z;
  a.rowwise() += (c.z_mean() / n).transpose();
  return a;
}

/// Inverse with an explicit invertibility check.
inline MatrixXd checked_inverse(const MatrixXd& A, const char* what) {
  Eigen::FullPivLU<MatrixXd> lu(A);
  if (!lu.isInvertible()) {
    throw Error(ErrorKind::rank, std::string(what) + " is singular");
  }
  return lu.inverse();
}

inline double max_abs(const VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace detail

// -------------------------------------------------------------------------
// Stage 0: OLS
// -------------------------------------------------------------------------

inline OlsFit ols_fit(const ClusteredDataset& data) {
  const MatrixXd X = data.stacked_X();
  const VectorXd y = data.stacked_y();
  Eigen::ColPivHouseholderQR<MatrixXd> qr(X);
  if (qr.rank() < X.cols()) {
    // Name the first column that adds nothing to the span of its predecessors.
    long offending = -1;
    for (Eigen::Index k = 1; k <= X.cols(); ++k) {
      Eigen::ColPivHouseholderQR<MatrixXd> partial(X.leftCols(k));
      if (partial.rank() < k) {
        offending = static_cast<long>(k - 1);
        break;
      }
    }
    throw SingularDesignError("stacked design is rank deficient at column x" +
                                  std::to_string(offending + 1),
                              offending);
  }
  OlsFit out;
  out.beta = qr.solve(y);
  const MatrixXd XtX = X.transpose() * X;
  out.XtX_inv = XtX.ldlt().solve(MatrixXd::Identity(X.cols(), X.cols()));
  return out;
}

// -------------------------------------------------------------------------
// Stage 1: gamma from the within-cluster estimating equation
// -------------------------------------------------------------------------

/// F(gamma) = N^{-1} sum_ij [ r_ij^2 z_ij - sigma^2(z_ij'gamma) a_ij ].
inline VectorXd gamma_estimating_function(const ClusteredDataset& data,
                                          const VectorXd& beta_ols,
                                          const VarianceFunction& vf,
                                          const VectorXd& gamma) {
  const DatasetVariances vars = dataset_variances(data, vf, gamma);
  VectorXd F = VectorXd::Zero(data.q());
  for (std::size_t i = 0; i < data.m(); ++i) {
    const Cluster& c = data[i];
    const VectorXd r = detail::within_residuals(c, beta_ols);
    const MatrixXd a = detail::gamma_weights(c);
    F += c.Z.transpose() * r.array().square().matrix() -
         a.transpose() * vars.clusters[i].sigma2;
  }
  return F / static_cast<double>(data.N());
}

/// dF/dgamma' = -N^{-1} sum_ij (sigma^2)'(z_ij'gamma) a_ij z_ij'.
inline MatrixXd gamma_jacobian(const ClusteredDataset& data, const VarianceFunction& vf,
                               const VectorXd& gamma) {
  const DatasetVariances vars = dataset_variances(data, vf, gamma);
  MatrixXd J = MatrixXd::Zero(data.q(), data.q());
  for (std::size_t i = 0; i < data.m(); ++i) {
    const Cluster& c = data[i];
    const MatrixXd a = detail::gamma_weights(c);
    J -= a.transpose() * vars.clusters[i].d1.asDiagonal() * c.Z;
  }
  return J / static_cast<double>(data.N());
}

/// Warm start for the Newton iteration. Exponential: OLS of log r^2 on z.
/// Quadratic: OLS of |r| on z, sign-flipped so gamma_1 > 0.
inline VectorXd gamma_auto_init(const ClusteredDataset& data, const VectorXd& beta_ols,
                                const VarianceFunction& vf) {
  const Eigen::Index q = data.q();
  if (vf.kind == VarianceKind::custom) {
    const VectorXd zero = VectorXd::Zero(q);
    if (vf.in_domain(0.0, zero)) return zero;
    throw Error(ErrorKind::precondition,
                "custom variance functions need an explicit gamma_init");
  }
  Eigen::Index rows = 0;
  for (const auto& c : data.clusters()) {
    if (c.size() >= 2) rows += c.size();
  }
  MatrixXd Zs(rows, q);
  VectorXd t(rows);
  Eigen::Index row = 0;
  for (const auto& c : data.clusters()) {
    if (c.size() < 2) continue;
    const VectorXd r = detail::within_residuals(c, beta_ols);
    for (Eigen::Index j = 0; j < c.size(); ++j) {
      Zs.row(row) = c.Z.row(j);
      t(row) = vf.kind == VarianceKind::exponential ? std::log(std::max(r(j) * r(j), 1e-8))
                                                    : std::abs(r(j));
      ++row;
    }
  }
  Eigen::ColPivHouseholderQR<MatrixXd> qr(Zs);
  if (qr.rank() < q) {
    throw Error(ErrorKind::rank, "variance covariates are rank deficient");
  }
  VectorXd g = qr.solve(t);
  if (vf.kind == VarianceKind::quadratic && g(0) < 0.0) g = -g;
  return g;
}

inline GammaSolve solve_gamma(const ClusteredDataset& data, const VectorXd& beta_ols,
                              const VarianceFunction& vf, const FitOptions& opts) {
  opts.validate();
  bool informative = false;
  for (const auto& c : data.clusters()) informative = informative || c.size() >= 2;
  if (!informative) {
    throw Error(ErrorKind::precondition,
                "gamma is not estimable: every cluster has a single observation");
  }

  GammaSolve out;
  out.gamma_init = opts.gamma_init ? *opts.gamma_init : gamma_auto_init(data, beta_ols, vf);
  if (out.gamma_init.size() != data.q()) {
    throw Error(ErrorKind::shape, "gamma_init has the wrong length");
  }

  auto evaluate = [&](const VectorXd& g) -> std::optional<VectorXd> {
    try {
      VectorXd F = gamma_estimating_function(data, beta_ols, vf, g);
      if (!F.allFinite()) return std::nullopt;
      return F;
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::constraint || e.kind() == ErrorKind::singular_variance) {
        return std::nullopt;
      }
      throw;
    }
  };

  // Magnitude of the terms entering F, used to recognise round-off stagnation.
  double scale = 0.0;
  for (const auto& c : data.clusters()) {
    const VectorXd r = detail::within_residuals(c, beta_ols);
    scale += r.squaredNorm() * c.Z.cwiseAbs().maxCoeff();
  }
  scale /= static_cast<double>(data.N());

  VectorXd gamma = out.gamma_init;
  std::optional<VectorXd> F = evaluate(gamma);
  if (!F) {
    throw Error(ErrorKind::constraint, "gamma_init lies outside the variance-function domain");
  }
  double norm = detail::max_abs(*F);

  for (int it = 0; it < opts.max_newton_iters; ++it) {
    if (norm <= opts.newton_tol) {
      // One polishing step: Newton converges quadratically, so this takes the
      // root to round-off at negligible cost.
      if (norm > 0.0) {
        const MatrixXd Jp = gamma_jacobian(data, vf, gamma);
        Eigen::FullPivLU<MatrixXd> lup(Jp);
        if (lup.isInvertible()) {
          const VectorXd candidate = gamma - lup.solve(*F);
          if (auto Fc = evaluate(candidate); Fc && detail::max_abs(*Fc) < norm) {
            gamma = candidate;
            norm = detail::max_abs(*Fc);
            F = std::move(Fc);
          }
        }
      }
      out.gamma = gamma;
      out.iterations = it;
      out.residual_norm = norm;
      return out;
    }
    const MatrixXd J = gamma_jacobian(data, vf, gamma);
    Eigen::FullPivLU<MatrixXd> lu(J);
    if (!lu.isInvertible()) {
      throw Error(ErrorKind::rank, "Jacobian of the gamma estimating equation is singular");
    }
    const VectorXd step = -lu.solve(*F);

    double t = 1.0;
    bool accepted = false;
    bool any_in_domain = false;
    for (int halving = 0; halving <= 30; ++halving, t *= 0.5) {
      const VectorXd candidate = gamma + t * step;
      std::optional<VectorXd> Fc = evaluate(candidate);
      if (!Fc) continue;
      any_in_domain = true;
      const double nc = detail::max_abs(*Fc);
      if (nc < norm) {
        gamma = candidate;
        F = std::move(Fc);
        norm = nc;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // No decrease possible: accept only if F already sits at round-off level.
      if (norm <= 1e4 * std::numeric_limits<double>::epsilon() * std::max(1.0, scale)) {
        out.gamma = gamma;
        out.iterations = it + 1;
        out.residual_norm = norm;
        return out;
      }
      if (!any_in_domain) {
        throw Error(ErrorKind::constraint,
                    "Newton backtracking could not stay inside the variance-function domain");
      }
      throw NonConvergenceError("Newton backtracking exhausted without decreasing |F|",
                                gamma, norm);
    }
  }
  if (norm <= opts.newton_tol) {
    out.gamma = gamma;
    out.iterations = opts.max_newton_iters;
    out.residual_norm = norm;
    return out;
  }
  throw NonConvergenceError("gamma Newton iteration hit the iteration cap (|F| = " +
                                std::to_string(norm) + ")",
                            gamma, norm);
}

// -------------------------------------------------------------------------
// Stage 2: tau^2 by moments
// -------------------------------------------------------------------------

inline Tau2Estimate estimate_tau2(const ClusteredDataset& data, const VectorXd& beta_ols,
                                  const VectorXd& gamma, const VarianceFunction& vf,
                                  const FitOptions& opts) {
  const DatasetVariances vars = dataset_variances(data, vf, gamma);
  double sum = 0.0;
  for (std::size_t i = 0; i < data.m(); ++i) {
    const Cluster& c = data[i];
    const VectorXd e = c.y - c.X * beta_ols;
    sum += e.squaredNorm() - vars.clusters[i].sigma2.sum();
  }
  Tau2Estimate out;
  out.raw = sum / static_cast<double>(data.N());
  out.value = out.raw;
  if (opts.tau2_truncation && out.raw < 0.0) {
    out.value = 0.0;
    out.truncated = true;
  }
  return out;
}

// -------------------------------------------------------------------------
// Stage 3: GLS for beta
// -------------------------------------------------------------------------

inline VectorXd gls_beta(const ClusteredDataset& data,
                         const std::vector<ClusterGeometry>& geometry) {
  const Eigen::Index p = data.p();
  MatrixXd A = MatrixXd::Zero(p, p);
  VectorXd b = VectorXd::Zero(p);
  for (std::size_t i = 0; i < data.m(); ++i) {
    const Cluster& c = data[i];
    const MatrixXd XtSi = c.X.transpose() * geometry[i].SigmaInv;
    A.noalias() += XtSi * c.X;
    b.noalias() += XtSi * c.y;
  }
  Eigen::LDLT<MatrixXd> ldlt(A);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      ldlt.vectorD().minCoeff() <= 1e-14 * ldlt.vectorD().maxCoeff()) {
    throw SingularDesignError("GLS normal equations are singular", -1);
  }
  return ldlt.solve(b);
}

inline VectorXd gls_beta(const ClusteredDataset& data, const VectorXd& gamma, double tau2,
                         const VarianceFunction& vf) {
  const DatasetVariances vars = dataset_variances(data, vf, gamma);
  return gls_beta(data, dataset_geometry(tau2, vars, data));
}

// -------------------------------------------------------------------------
// Influence functions and Omega
// -------------------------------------------------------------------------

namespace detail {

inline MatrixXd gls_information(const ClusteredDataset& data,
                                const std::vector<ClusterGeometry>& geometry) {
  MatrixXd A = MatrixXd::Zero(data.p(), data.p());
  for (std::size_t i = 0; i < data.m(); ++i) {
    A.noalias() += data[i].X.transpose() * geometry[i].SigmaInv * data[i].X;
  }
  return A;
}

}  // namespace detail

inline std::pair<InfluenceSet, OmegaMatrix> influence_and_omega(
    const ClusteredDataset& data, const ModelParams& params,
    const std::vector<ClusterGeometry>& geometry) {
  const auto m = static_cast<Eigen::Index>(data.m());
  const Eigen::Index p = data.p();
  const Eigen::Index q = data.q();
  const double md = static_cast<double>(m);
  const double N = static_cast<double>(data.N());

  InfluenceSet inf;
  inf.psi_beta.resize(m, p);
  inf.psi_gamma.resize(m, q);
  inf.psi_tau.resize(m);
  inf.u1.resize(m);
  inf.u2.resize(m, q);
  inf.T1 = VectorXd::Zero(q);

  MatrixXd T2_inv = MatrixXd::Zero(q, q);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Cluster& c = data[static_cast<std::size_t>(i)];
    const ClusterGeometry& g = geometry[static_cast<std::size_t>(i)];
    const MatrixXd a = detail::gamma_weights(c);
    inf.T1.noalias() += c.Z.transpose() * g.d1;
    T2_inv.noalias() += a.transpose() * g.d1.asDiagonal() * c.Z;

    const VectorXd e = c.y - c.X * params.beta;
    const VectorXd r = e.array() - e.mean();
    inf.u1(i) = md / N * (e.squaredNorm() - g.sigma2.sum() - params.tau2 * c.size());
    inf.u2.row(i) = (md / N *
                     (c.Z.transpose() * r.array().square().matrix() - a.transpose() * g.sigma2))
                        .transpose();
  }
  inf.T2 = detail::checked_inverse(T2_inv, "T_2 (variance-gradient normal matrix)");

  const MatrixXd A_inv = detail::checked_inverse(detail::gls_information(data, geometry),
                                                 "GLS information matrix");
  const VectorXd T1T2 = inf.T2.transpose() * inf.T1;  // so that T1'T2 u = T1T2' u
  for (Eigen::Index i = 0; i < m; ++i) {
    const Cluster& c = data[static_cast<std::size_t>(i)];
    const ClusterGeometry& g = geometry[static_cast<std::size_t>(i)];
    const VectorXd u2 = inf.u2.row(i).transpose();
    inf.psi_gamma.row(i) = (N * inf.T2 * u2).transpose();
    inf.psi_tau(i) = inf.u1(i) - T1T2.dot(u2);
    inf.psi_beta.row(i) =
        (md * A_inv * c.X.transpose() * g.SigmaInv * (c.y - c.X * params.beta)).transpose();
  }

  MatrixXd psi(m, p + q + 1);
  psi << inf.psi_beta, inf.psi_gamma, inf.psi_tau;
  OmegaMatrix omega;
  omega.p = p;
  omega.q = q;
  omega.full = psi.transpose() * psi / (md * md);
  omega.full = 0.5 * (omega.full + omega.full.transpose()).eval();
  return {std::move(inf), std::move(omega)};
}

// -------------------------------------------------------------------------
// Second-order bias of (beta, gamma, tau^2)
// -------------------------------------------------------------------------

inline BiasTerms bias_terms(const ClusteredDataset& data, const ModelParams& params,
                            const std::vector<ClusterGeometry>& geometry,
                            const OmegaMatrix& omega, const InfluenceSet& inf,
                            const MatrixXd& XtX_inv,
                            BiasFormula formula = BiasFormula::rederived) {
  const auto m = static_cast<Eigen::Index>(data.m());
  const Eigen::Index p = data.p();
  const Eigen::Index q = data.q();
  const double md = static_cast<double>(m);
  const double N = static_cast<double>(data.N());
  const MatrixXd Ogg = omega.gamma_gamma();

  // V_OLS = (X'X)^{-1} X' Sigma X (X'X)^{-1}
  MatrixXd XtSX = MatrixXd::Zero(p, p);
  MatrixXd XtX = MatrixXd::Zero(p, p);
  for (Eigen::Index k = 0; k < m; ++k) {
    const Cluster& c = data[static_cast<std::size_t>(k)];
    XtSX.noalias() += c.X.transpose() * geometry[static_cast<std::size_t>(k)].Sigma * c.X;
    XtX.noalias() += c.X.transpose() * c.X;
  }
  const MatrixXd V_ols = XtX_inv * XtSX * XtX_inv;

  // Trace sums over clusters for each variance covariate r:
  //   ols_quad(r)  = sum_k tr(E_k Z_kr E_k X_k V_OLS X_k')
  //   ols_cross(r) = sum_k tr(E_k Z_kr E_k X_k (X'X)^{-1} X_k' Sigma_k)
  // and the second-derivative sums
  //   hess_pub  = sum_kj z_kj (sigma^2)''_kj a_kj' Omega_gg z_kj
  //   hess_red  = sum_kj a_kj (sigma^2)''_kj z_kj' Omega_gg z_kj
  VectorXd ols_quad = VectorXd::Zero(q);
  VectorXd ols_cross = VectorXd::Zero(q);
  VectorXd hess_pub = VectorXd::Zero(q);
  VectorXd hess_red = VectorXd::Zero(q);
  double sum_d2_quad = 0.0;
  for (Eigen::Index k = 0; k < m; ++k) {
    const Cluster& c = data[static_cast<std::size_t>(k)];
    const ClusterGeometry& g = geometry[static_cast<std::size_t>(k)];
    const Eigen::Index n = c.size();
    const MatrixXd E =
        MatrixXd::Identity(n, n) - MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n));
    const MatrixXd XVXt = c.X * V_ols * c.X.transpose();
    const MatrixXd XPXtS = c.X * XtX_inv * c.X.transpose() * g.Sigma;
    const MatrixXd a = detail::gamma_weights(c);
    for (Eigen::Index r = 0; r < q; ++r) {
      const MatrixXd EZE = E * c.Z.col(r).asDiagonal() * E;
      ols_quad(r) += (EZE * XVXt).trace();
      ols_cross(r) += (EZE * XPXtS).trace();
    }
    for (Eigen::Index j = 0; j < n; ++j) {
      const VectorXd z = c.Z.row(j).transpose();
      const VectorXd aj = a.row(j).transpose();
      const double zOz = z.dot(Ogg * z);
      hess_pub += z * (g.d2(j) * aj.dot(Ogg * z));
      hess_red += aj * (g.d2(j) * zOz);
      sum_d2_quad += g.d2(j) * zOz;
    }
  }

  BiasTerms out;
  if (formula == BiasFormula::published) {
    out.b_gamma = inf.T2 * (2.0 * (ols_quad - ols_cross) - hess_pub);
  } else {
    out.b_gamma = inf.T2 * (ols_quad - 2.0 * ols_cross - 0.5 * hess_red);
  }

  out.b_tau = -inf.T1.dot(out.b_gamma) / N - 2.0 * (XtX_inv * XtSX).trace() / N -
              sum_d2_quad / (2.0 * N) + (XtX * V_ols).trace() / N;

  // beta: auxiliary GLS-type estimators weighted by dSigma/dgamma_s and
  // dSigma/dtau^2, their influence vectors, and the cross moments with the
  // gamma / tau influence.
  std::vector<MatrixXd> B(static_cast<std::size_t>(q), MatrixXd::Zero(p, p));
  MatrixXd C = MatrixXd::Zero(p, p);
  std::vector<MatrixXd> B_rows(static_cast<std::size_t>(q), MatrixXd(m, p));
  MatrixXd C_rows(m, p);
  for (Eigen::Index k = 0; k < m; ++k) {
    const Cluster& c = data[static_cast<std::size_t>(k)];
    const ClusterGeometry& g = geometry[static_cast<std::size_t>(k)];
    const MatrixXd SiX = g.SigmaInv * c.X;
    const VectorXd Si_res = g.SigmaInv * (c.y - c.X * params.beta);
    const VectorXd c1 = SiX.transpose() * VectorXd::Ones(c.size());
    C.noalias() += c1 * c1.transpose();
    C_rows.row(k) = (c1 * Si_res.sum()).transpose();
    for (Eigen::Index s = 0; s < q; ++s) {
      const VectorXd ws = g.d1.cwiseProduct(c.Z.col(s));
      B[static_cast<std::size_t>(s)].noalias() += SiX.transpose() * ws.asDiagonal() * SiX;
      B_rows[static_cast<std::size_t>(s)].row(k) =
          (SiX.transpose() * ws.cwiseProduct(Si_res)).transpose();
    }
  }
  const MatrixXd A = detail::gls_information(data, geometry);
  const MatrixXd A_inv = detail::checked_inverse(A, "GLS information matrix");
  const MatrixXd C_inv = detail::checked_inverse(C, "tau^2-weighted GLS matrix");

  out.omega_beta_star_tau =
      md * C_inv * C_rows.transpose() * inf.psi_tau / (md * md);
  out.omega_beta_star_gamma.resize(p, q);
  VectorXd inner = C * (out.omega_beta_star_tau - omega.beta_tau());
  const MatrixXd Obg = omega.beta_gamma();
  for (Eigen::Index s = 0; s < q; ++s) {
    const MatrixXd B_inv =
        detail::checked_inverse(B[static_cast<std::size_t>(s)], "gamma-weighted GLS matrix");
    out.omega_beta_star_gamma.col(s) = md * B_inv *
                                       B_rows[static_cast<std::size_t>(s)].transpose() *
                                       inf.psi_gamma.col(s) / (md * md);
    inner += B[static_cast<std::size_t>(s)] * (out.omega_beta_star_gamma.col(s) - Obg.col(s));
  }
  out.b_beta = A_inv * inner;
  // dSigma^{-1}/dphi carries a minus sign that the published display omits.
  if (formula == BiasFormula::rederived) out.b_beta = -out.b_beta;
  return out;
}

// -------------------------------------------------------------------------
// Kurtosis
// -------------------------------------------------------------------------

inline double kurtosis_coefficient(Eigen::Index n_i, KurtosisCoefficient form) {
  const double n = static_cast<double>(n_i);
  if (form == KurtosisCoefficient::published) {
    return (n - 1.0) * (n - 2.0) * (n * n - n - 1.0) / std::pow(n, 4);
  }
  return (n - 1.0) * (n * n - 3.0 * n + 3.0) / std::pow(n, 3);
}

/// kappa_eps from fourth powers of within residuals at the GLS beta; kappa_v
/// from fourth powers of OLS residuals.
inline KurtosisEstimates estimate_kurtosis(const ClusteredDataset& data,
                                           const ModelParams& params,
                                           const std::vector<ClusterGeometry>& geometry,
                                           const VectorXd& beta_ols,
                                           KurtosisCoefficient form = KurtosisCoefficient::exact) {
  double numer = 0.0;
  double n_star = 0.0;
  for (std::size_t i = 0; i < data.m(); ++i) {
    const Cluster& c = data[i];
    const ClusterGeometry& g = geometry[i];
    const double n = static_cast<double>(c.size());
    const VectorXd r = detail::within_residuals(c, params.beta);
    const double s2 = g.sigma2.sum();
    const double s4 = g.sigma2.squaredNorm();
    numer += r.array().pow(4).sum() - 3.0 * (2.0 * n - 3.0) / (n * n * n) * (s2 * s2 - s4);
    n_star += kurtosis_coefficient(c.size(), form) * s4;
  }
  if (!(n_star > 0.0)) {
    throw Error(ErrorKind::kurtosis_unidentified,
                "kappa_eps is not identified: no cluster carries a nonzero fourth-moment weight");
  }
  KurtosisEstimates out;
  out.kappa_eps = numer / n_star;

  const double tau2 = params.tau2;
  if (!(tau2 > 0.0)) {
    throw Error(ErrorKind::kurtosis_undefined, "kappa_v is undefined when tau^2 = 0");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < data.m(); ++i) {
    const Cluster& c = data[i];
    const ClusterGeometry& g = geometry[i];
    const VectorXd e = c.y - c.X * beta_ols;
    sum += e.array().pow(4).sum() - 6.0 * tau2 * g.sigma2.sum() -
           out.kappa_eps * g.sigma2.squaredNorm();
  }
  out.kappa_v = sum / (static_cast<double>(data.N()) * tau2 * tau2);
  return out;
}

// -------------------------------------------------------------------------
// Full pipeline
// -------------------------------------------------------------------------

namespace detail {

template <class F>
auto with_stage(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (Error& e) {
    if (e.stage().empty()) e.set_stage(stage);
    throw;
  }
}

}  // namespace detail

/// gamma -> tau^2 -> beta, then influence functions, Omega, bias terms and
/// kurtosis at the fitted parameters.
inline FitResult fit(const ClusteredDataset& data, const VarianceFunction& vf,
                     const FitOptions& opts = {}) {
  opts.validate();
  FitResult res;
  res.options = opts;

  const OlsFit ols = detail::with_stage("ols", [&] { return ols_fit(data); });
  res.beta_ols = ols.beta;
  res.XtX_inv = ols.XtX_inv;

  res.gamma_solve =
      detail::with_stage("gamma", [&] { return solve_gamma(data, ols.beta, vf, opts); });
  const VectorXd& gamma = res.gamma_solve.gamma;

  res.tau2 = detail::with_stage("tau2",
                                [&] { return estimate_tau2(data, ols.beta, gamma, vf, opts); });

  const DatasetVariances vars =
      detail::with_stage("variances", [&] { return dataset_variances(data, vf, gamma); });
  res.variance_floored = vars.floored;
  res.variance_floor = vars.floor;
  res.geometry = detail::with_stage(
      "geometry", [&] { return dataset_geometry(res.tau2.value, vars, data); });

  res.params.gamma = gamma;
  res.params.tau2 = res.tau2.value;
  res.params.beta = detail::with_stage("beta", [&] { return gls_beta(data, res.geometry); });

  if (opts.point_estimates_only) return res;

  auto [inf, omega] = detail::with_stage(
      "influence", [&] { return influence_and_omega(data, res.params, res.geometry); });
  res.bias = detail::with_stage("bias", [&] {
    return bias_terms(data, res.params, res.geometry, omega, inf, res.XtX_inv,
                      opts.bias_formula);
  });
  res.influence = std::move(inf);
  res.omega = std::move(omega);

  res.variance_gradient_gram = MatrixXd::Zero(data.q(), data.q());
  for (std::size_t i = 0; i < data.m(); ++i) {
    const Cluster& c = data[i];
    res.variance_gradient_gram.noalias() +=
        c.Z.transpose() * res.geometry[i].d1.asDiagonal() * c.Z;
  }

  try {
    res.kurtosis = estimate_kurtosis(data, res.params, res.geometry, res.beta_ols,
                                     opts.kurtosis_coefficient);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kurtosis_unidentified &&
        e.kind() != ErrorKind::kurtosis_undefined) {
      throw;
    }
    res.kurtosis_note = e.what();
  }
  return res;
}

}  // namespace hnervf
