#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace hnervf;
using hnervf::testing::params;
using hnervf::testing::random_dataset;

namespace {

/// Within-cluster residual sum of squares and sum of (n_i - 1), computed
/// directly from cluster means.
struct WithinSums {
  double ssw = 0.0;
  double dof = 0.0;
};

WithinSums within_sums(const ClusteredDataset& d, const VectorXd& beta) {
  WithinSums s;
  for (const auto& c : d.clusters()) {
    const double ybar = c.y.mean();
    const VectorXd xbar = c.X.colwise().mean();
    for (Eigen::Index j = 0; j < c.size(); ++j) {
      const double r = c.y(j) - ybar - (c.X.row(j).transpose() - xbar).dot(beta);
      s.ssw += r * r;
    }
    s.dof += static_cast<double>(c.size() - 1);
  }
  return s;
}

VectorXd normal_equations_beta(const ClusteredDataset& d) {
  const MatrixXd X = d.stacked_X();
  return (X.transpose() * X).inverse() * X.transpose() * d.stacked_y();
}

ClusteredDataset balanced_cluster_level(std::uint64_t seed, std::size_t m, Eigen::Index n) {
  RandomStream rs(seed, 5, 0);
  std::vector<Cluster> cs;
  for (std::size_t i = 0; i < m; ++i) {
    Cluster c;
    c.id = std::to_string(i);
    const double x = rs.uniform(0.0, 3.0);
    c.X.resize(n, 2);
    c.X.col(0).setOnes();
    c.X.col(1).setConstant(x);
    c.Z = MatrixXd::Ones(n, 1);
    const double v = sample_effect(EffectDistribution::M1, 0.8, rs);
    c.y.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      c.y(j) = 1.0 + 0.5 * x + v + sample_effect(EffectDistribution::M1, 1.3, rs);
    }
    cs.push_back(std::move(c));
  }
  return ClusteredDataset(std::move(cs), 2, 1);
}

}  // namespace

TEST(Ols, RankDeficientDesignNamesColumn) {
  auto d = random_dataset(1, 8, 3, 4, params({1, 2}, {0.0}, 1.0));
  std::vector<Cluster> cs = d.clusters();
  for (auto& c : cs) {
    MatrixXd X(c.size(), 3);
    X << c.X, 2.0 * c.X.col(1);
    c.X = X;
  }
  const ClusteredDataset bad(cs, 3, 1);
  try {
    ols_fit(bad);
    FAIL();
  } catch (const SingularDesignError& e) {
    EXPECT_EQ(e.column(), 2);
  }
  try {
    fit(bad, exponential_variance());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::singular_design);
    EXPECT_EQ(e.stage(), "ols");
  }
}

TEST(Gamma, HomoscedasticClosedForm) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto d = random_dataset(seed, 15, 1, 7, params({1, 0.5}, {0.3}, 0.7));
    const FitResult f = fit(d, exponential_variance());
    const VectorXd beta_ols = normal_equations_beta(d);
    const auto s = within_sums(d, beta_ols);
    const double gamma = std::log(s.ssw / s.dof);
    double raw = 0.0;
    for (const auto& c : d.clusters()) {
      raw += (c.y - c.X * beta_ols).squaredNorm() - std::exp(gamma) * c.size();
    }
    raw /= static_cast<double>(d.N());
    ASSERT_NEAR(f.params.gamma(0), gamma, 1e-10) << "seed " << seed;
    ASSERT_NEAR(f.params.tau2, std::max(raw, 0.0), 1e-10) << "seed " << seed;
    ASSERT_NEAR(f.tau2.raw, raw, 1e-10) << "seed " << seed;
  }
}

TEST(Gamma, EstimatingFunctionVanishesAndJacobianMatches) {
  const auto d = random_dataset(7, 30, 3, 8, params({1, 0.8}, {1.0, -0.4}, 1.44));
  const FitResult f = fit(d, exponential_variance());
  const auto vf = exponential_variance();
  const VectorXd F = gamma_estimating_function(d, f.beta_ols, vf, f.params.gamma);
  EXPECT_LE(F.cwiseAbs().maxCoeff(), 1e-10);
  const MatrixXd J = gamma_jacobian(d, vf, f.params.gamma);
  for (Eigen::Index r = 0; r < 2; ++r) {
    const auto Fr = [&](const VectorXd& g) {
      return gamma_estimating_function(d, f.beta_ols, vf, g)(r);
    };
    const VectorXd fd = hnervf::testing::numeric_gradient(Fr, f.params.gamma, 1e-6);
    EXPECT_LT((fd - J.row(r).transpose()).cwiseAbs().maxCoeff(), 1e-7);
  }
}

TEST(Gamma, PrasadRaoRelationOnBalancedData) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto d = balanced_cluster_level(seed, 12, 5);
    const FitResult f = fit(d, exponential_variance());
    const double N = static_cast<double>(d.N());
    const double m = static_cast<double>(d.m());
    const double p = 2.0;
    const MatrixXd X = d.stacked_X();
    const VectorXd b = normal_equations_beta(d);
    const double sse = (d.stacked_y() - X * b).squaredNorm();
    const double s2_pr = within_sums(d, b).ssw / (N - m);
    MatrixXd XJX = MatrixXd::Zero(2, 2);
    for (const auto& c : d.clusters()) {
      const VectorXd col = c.X.colwise().sum();
      XJX += col * col.transpose();
    }
    const double trace_term = ((X.transpose() * X).inverse() * XJX).trace();
    const double tau2_pr = (sse - (N - p) * s2_pr) / (N - trace_term);
    ASSERT_NEAR(std::exp(f.params.gamma(0)), s2_pr, 1e-10 * s2_pr);
    const double expected = ((N - trace_term) * tau2_pr + (N - p) * s2_pr) / N - s2_pr;
    ASSERT_NEAR(f.tau2.raw, expected, 1e-10);
  }
}

TEST(Gamma, QuadraticVarianceRecoversPositiveSlope) {
  RandomStream rs(21, 0, 0);
  std::vector<Cluster> cs;
  for (int i = 0; i < 300; ++i) {
    Cluster c;
    c.id = std::to_string(i);
    const Eigen::Index n = 6;
    c.X.resize(n, 2);
    c.Z.resize(n, 2);
    c.y.resize(n);
    const double v = sample_effect(EffectDistribution::M1, 0.5, rs);
    for (Eigen::Index j = 0; j < n; ++j) {
      c.X(j, 0) = 1.0;
      c.X(j, 1) = rs.uniform(0.0, 2.0);
      c.Z(j, 0) = 1.0;
      c.Z(j, 1) = rs.uniform(0.0, 2.0);
      const double sd = 0.5 + 0.4 * c.Z(j, 1);
      c.y(j) = 1.0 + c.X(j, 1) + v + sample_effect(EffectDistribution::M1, sd * sd, rs);
    }
    cs.push_back(std::move(c));
  }
  const ClusteredDataset d(cs, 2, 2);
  const FitResult f = fit(d, quadratic_variance());
  EXPECT_GT(f.params.gamma(0), 0.0);
  EXPECT_NEAR(f.params.gamma(0), 0.5, 0.1);
  EXPECT_NEAR(f.params.gamma(1), 0.4, 0.1);
  EXPECT_NEAR(f.params.tau2, 0.5, 0.2);
}

TEST(Gamma, SingletonClustersAreNotEstimable) {
  std::vector<Cluster> cs;
  for (int i = 0; i < 6; ++i) {
    cs.push_back({std::to_string(i), VectorXd::Constant(1, i * 0.3),
                  MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1)});
  }
  try {
    fit(ClusteredDataset(cs, 1, 1), exponential_variance());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::precondition);
    EXPECT_EQ(e.stage(), "gamma");
  }
}

TEST(Gamma, IterationCapReportsLastIterate) {
  const auto d = random_dataset(9, 20, 3, 6, params({1, 0.8}, {1.0, -0.4}, 1.0));
  FitOptions o;
  o.gamma_init = VectorXd::Constant(2, 4.0);
  o.max_newton_iters = 1;
  try {
    fit(d, exponential_variance(), o);
    FAIL();
  } catch (const NonConvergenceError& e) {
    EXPECT_EQ(e.last_iterate().size(), 2);
    EXPECT_GT(e.residual_norm(), o.newton_tol);
  }
}

TEST(Gamma, StartingPointDoesNotChangeTheRoot) {
  const auto d = random_dataset(10, 25, 3, 7, params({1, 0.8}, {1.0, -0.4}, 1.0));
  const FitResult a = fit(d, exponential_variance());
  FitOptions o;
  o.gamma_init = VectorXd::Zero(2);
  const FitResult b = fit(d, exponential_variance(), o);
  EXPECT_LT((a.params.gamma - b.params.gamma).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Tau2, TruncatedAtZeroWithFlag) {
  bool seen = false;
  for (std::uint64_t seed = 0; seed < 40 && !seen; ++seed) {
    const auto d = random_dataset(seed, 8, 3, 5, params({1, 0.5}, {0.0}, 0.0));
    const FitResult f = fit(d, exponential_variance());
    if (f.tau2.raw < 0.0) {
      seen = true;
      EXPECT_TRUE(f.tau2.truncated);
      EXPECT_EQ(f.params.tau2, 0.0);
      for (const auto& g : f.geometry) {
        EXPECT_EQ(g.eta, 1.0);
        EXPECT_TRUE(g.lambda.isZero());
      }
      FitOptions o;
      o.tau2_truncation = false;
      EXPECT_LT(estimate_tau2(d, f.beta_ols, f.params.gamma, exponential_variance(), o).value, 0.0);
    }
  }
  EXPECT_TRUE(seen);
}

TEST(Gls, BalancedInterceptOnlyGivesGrandMean) {
  std::vector<Cluster> cs;
  RandomStream rs(3, 0, 0);
  for (int i = 0; i < 10; ++i) {
    VectorXd y(4);
    for (int j = 0; j < 4; ++j) y(j) = rs.uniform(-1.0, 3.0) + i * 0.2;
    cs.push_back({std::to_string(i), y, MatrixXd::Ones(4, 1), MatrixXd::Ones(4, 1)});
  }
  const ClusteredDataset d(cs, 1, 1);
  const FitResult f = fit(d, exponential_variance());
  EXPECT_NEAR(f.params.beta(0), d.stacked_y().mean(), 1e-12);
}

TEST(Influence, OmegaIsSymmetricPsdAndBetaScoresSumToZero) {
  const auto d = random_dataset(12, 25, 3, 7, params({1, 0.8}, {1.0, -0.4}, 1.44));
  const FitResult f = fit(d, exponential_variance());
  const MatrixXd& O = f.omega->full;
  EXPECT_LT((O - O.transpose()).cwiseAbs().maxCoeff(), 1e-15);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(O);
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-12 * es.eigenvalues().maxCoeff());
  const VectorXd s = f.influence->psi_beta.colwise().sum();
  EXPECT_LT(s.cwiseAbs().maxCoeff(), 1e-8 * f.influence->psi_beta.cwiseAbs().maxCoeff());
}

TEST(Influence, OmegaTracksMonteCarloCovariance) {
  auto cfg = DgpConfig::constant_design(60, 6);
  const int R = 600;
  std::vector<VectorXd> th;
  VectorXd omega_diag = VectorXd::Zero(5);
  for (int r = 0; r < R; ++r) {
    const auto s = generate_dgp(cfg, static_cast<std::uint64_t>(r));
    const FitResult f = fit(s.data, exponential_variance());
    th.push_back(f.params.stacked());
    omega_diag += f.omega->full.diagonal();
  }
  omega_diag /= R;
  VectorXd mean = VectorXd::Zero(5);
  for (const auto& t : th) mean += t;
  mean /= R;
  VectorXd var = VectorXd::Zero(5);
  for (const auto& t : th) var += (t - mean).cwiseAbs2();
  var /= R - 1;
  for (int k = 0; k < 5; ++k) {
    EXPECT_NEAR(omega_diag(k) / var(k), 1.0, 0.25) << "component " << k;
  }
}

TEST(Bias, GammaAndTauBiasMatchMonteCarlo) {
  auto cfg = DgpConfig::constant_design(50, 5);
  const int R = 6000;
  VectorXd dev = VectorXd::Zero(3), b = VectorXd::Zero(3), sq = VectorXd::Zero(3);
  for (int r = 0; r < R; ++r) {
    const auto s = generate_dgp(cfg, static_cast<std::uint64_t>(r));
    const FitResult f = fit(s.data, exponential_variance());
    VectorXd e(3);
    e << f.params.gamma - s.theta.gamma, f.params.tau2 - s.theta.tau2;
    dev += e;
    sq += e.cwiseAbs2();
    b << f.bias->b_gamma, f.bias->b_tau;
  }
  dev /= R;
  const VectorXd se = ((sq / R - dev.cwiseAbs2()) / R).cwiseSqrt();
  // Average the bias formula over replications as well.
  VectorXd bsum = VectorXd::Zero(3);
  for (int r = 0; r < R; r += 10) {
    const auto s = generate_dgp(cfg, static_cast<std::uint64_t>(r));
    const FitResult f = fit(s.data, exponential_variance());
    VectorXd e(3);
    e << f.bias->b_gamma, f.bias->b_tau;
    bsum += e;
  }
  bsum /= R / 10;
  for (int k = 0; k < 3; ++k) {
    EXPECT_NEAR(bsum(k), dev(k), 4.0 * se(k) + 0.2 * std::abs(dev(k))) << "component " << k;
  }
}

TEST(Kurtosis, CoefficientMatchesExactEnumeration) {
  // eps_j = s_j * U_j with U symmetric on {-a, 0, a}: P(+-a) = p/2.
  const double p = 0.3;
  const double a = std::sqrt(1.0 / p);  // unit variance, kurtosis 1/p
  const double kappa = 1.0 / p;
  for (int n = 2; n <= 6; ++n) {
    VectorXd s2(n);
    for (int j = 0; j < n; ++j) s2(j) = 0.5 + 0.3 * j;
    const VectorXd s = s2.cwiseSqrt();
    double expect = 0.0;
    int states = 1;
    for (int j = 0; j < n; ++j) states *= 3;
    for (int code = 0; code < states; ++code) {
      int c = code;
      double prob = 1.0;
      VectorXd e(n);
      for (int j = 0; j < n; ++j) {
        const int k = c % 3;
        c /= 3;
        e(j) = (k - 1) * a * s(j);
        prob *= k == 1 ? 1.0 - p : p / 2.0;
      }
      const VectorXd r = e.array() - e.mean();
      expect += prob * r.array().pow(4).sum();
    }
    const double s4 = s2.squaredNorm();
    const double nn = n;
    const double pair = 3.0 * (2.0 * nn - 3.0) / (nn * nn * nn) * (s2.sum() * s2.sum() - s4);
    const double formula = kappa * kurtosis_coefficient(n, KurtosisCoefficient::exact) * s4 + pair;
    EXPECT_NEAR(formula, expect, 1e-12 * expect) << "n = " << n;
  }
}

TEST(Kurtosis, ConsistentUnderNormalAndT6) {
  auto normal = DgpConfig::constant_design(3000, 6);
  const auto sn = generate_dgp(normal, 0);
  const FitResult fn = fit(sn.data, exponential_variance());
  ASSERT_TRUE(fn.kurtosis);
  EXPECT_NEAR(fn.kurtosis->kappa_eps, 3.0, 0.25);
  EXPECT_NEAR(fn.kurtosis->kappa_v, 3.0, 0.4);

  auto t6 = DgpConfig::constant_design(200, 8);
  t6.distribution = EffectDistribution::M2;
  const int R = 200;
  double sum = 0.0, sum2 = 0.0;
  for (int r = 0; r < R; ++r) {
    const auto s = generate_dgp(t6, static_cast<std::uint64_t>(r));
    const FitResult f = fit(s.data, exponential_variance());
    ASSERT_TRUE(f.kurtosis);
    sum += f.kurtosis->kappa_eps;
    sum2 += f.kurtosis->kappa_eps * f.kurtosis->kappa_eps;
  }
  const double mean = sum / R;
  const double se = std::sqrt((sum2 / R - mean * mean) / R);
  EXPECT_NEAR(mean, 6.0, 3.0 * se);
}

TEST(Kurtosis, UnidentifiedAndUndefinedCases) {
  std::vector<Cluster> cs;
  RandomStream rs(4, 0, 0);
  for (int i = 0; i < 8; ++i) {
    VectorXd y(2);
    y << rs.uniform(0, 2), rs.uniform(0, 2);
    cs.push_back({std::to_string(i), y, MatrixXd::Ones(2, 1), MatrixXd::Ones(2, 1)});
  }
  const ClusteredDataset d(cs, 1, 1);
  const ModelParams th = params({1.0}, {0.0}, 0.5);
  std::vector<ClusterGeometry> geo;
  for (const auto& c : d.clusters()) geo.push_back(cluster_geometry(th, c, exponential_variance()));
  try {
    estimate_kurtosis(d, th, geo, th.beta, KurtosisCoefficient::published);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kurtosis_unidentified);
  }
  EXPECT_NO_THROW(estimate_kurtosis(d, th, geo, th.beta, KurtosisCoefficient::exact));

  ModelParams zero = th;
  zero.tau2 = 0.0;
  std::vector<ClusterGeometry> g0;
  for (const auto& c : d.clusters()) g0.push_back(cluster_geometry(zero, c, exponential_variance()));
  try {
    estimate_kurtosis(d, zero, g0, th.beta);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kurtosis_undefined);
  }
}

TEST(Fit, PointEstimatesOnlySkipsSecondOrderQuantities) {
  const auto d = random_dataset(13, 20, 3, 6, params({1, 0.8}, {1.0, -0.4}, 1.44));
  FitOptions o;
  o.point_estimates_only = true;
  const FitResult f = fit(d, exponential_variance(), o);
  EXPECT_FALSE(f.omega);
  EXPECT_FALSE(f.bias);
  const FitResult full = fit(d, exponential_variance());
  EXPECT_EQ(f.params.stacked(), full.params.stacked());
}
