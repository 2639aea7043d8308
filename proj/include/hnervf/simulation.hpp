#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <numbers>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "hnervf/dataset.hpp"
#include "hnervf/errors.hpp"
#include "hnervf/estimation.hpp"
#include "hnervf/prediction.hpp"
#include "hnervf/variance_function.hpp"

namespace hnervf {

// -------------------------------------------------------------------------
// Random streams
// -------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Engine whose state depends only on (seed, stage, index), so replications
/// can be generated in any order or in parallel.
class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::uint64_t stage, std::uint64_t index)
      : engine_(splitmix64(seed ^ splitmix64(stage ^ splitmix64(index)))) {}

  std::mt19937_64& engine() { return engine_; }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }

 private:
  std::mt19937_64 engine_;
};

// -------------------------------------------------------------------------
// Effect distributions
// -------------------------------------------------------------------------

enum class EffectDistribution { M1, M2, M3, M4, M5 };
enum class ChiVariant { chi_squared, chi };
enum class EffectRole { random_effect, error };

inline const char* to_string(EffectDistribution d) {
  switch (d) {
    case EffectDistribution::M1: return "M1";
    case EffectDistribution::M2: return "M2";
    case EffectDistribution::M3: return "M3";
    case EffectDistribution::M4: return "M4";
    case EffectDistribution::M5: return "M5";
  }
  return "unknown";
}

inline EffectDistribution distribution_by_name(const std::string& name) {
  for (auto d : {EffectDistribution::M1, EffectDistribution::M2, EffectDistribution::M3,
                 EffectDistribution::M4, EffectDistribution::M5}) {
    if (name == to_string(d)) return d;
  }
  throw Error(ErrorKind::registry, "unknown distribution kind '" + name + "'");
}

inline const std::vector<EffectDistribution>& all_distributions() {
  static const std::vector<EffectDistribution> kinds{
      EffectDistribution::M1, EffectDistribution::M2, EffectDistribution::M3,
      EffectDistribution::M4, EffectDistribution::M5};
  return kinds;
}

/// Mean-zero draw with variance `variance`.
///   M1 normal; M2 t_6; M3 located and scaled chi (squared) with 5 df;
///   M4 as M3 with error draws negated; M5 logistic.
inline double sample_effect(EffectDistribution kind, double variance, RandomStream& stream,
                            EffectRole role = EffectRole::random_effect,
                            ChiVariant chi = ChiVariant::chi_squared) {
  if (!(variance > 0.0)) throw Error(ErrorKind::precondition, "target variance must be positive");
  auto& eng = stream.engine();
  switch (kind) {
    case EffectDistribution::M1:
      return std::sqrt(variance) * std::normal_distribution<double>(0.0, 1.0)(eng);
    case EffectDistribution::M2:
      return std::sqrt(variance / 1.5) * std::student_t_distribution<double>(6.0)(eng);
    case EffectDistribution::M3:
    case EffectDistribution::M4: {
      const double c2 = std::chi_squared_distribution<double>(5.0)(eng);
      double centered = 0.0;
      double base_var = 0.0;
      if (chi == ChiVariant::chi_squared) {
        centered = c2 - 5.0;
        base_var = 10.0;
      } else {
        const double mean = std::sqrt(2.0) * std::exp(std::lgamma(3.0) - std::lgamma(2.5));
        centered = std::sqrt(c2) - mean;
        base_var = 5.0 - mean * mean;
      }
      double draw = std::sqrt(variance / base_var) * centered;
      if (kind == EffectDistribution::M4 && role == EffectRole::error) draw = -draw;
      return draw;
    }
    case EffectDistribution::M5: {
      const double s = std::sqrt(3.0 * variance) / std::numbers::pi;
      double u = stream.uniform();
      while (u <= 0.0) u = stream.uniform();
      return s * std::log(u / (1.0 - u));
    }
  }
  throw Error(ErrorKind::registry, "unknown distribution kind");
}

// -------------------------------------------------------------------------
// Data-generating process
// -------------------------------------------------------------------------

/// y_ij = beta0 + beta1 x_ij + v_i + eps_ij,
/// v_i ~ (0, tau^2), eps_ij ~ (0, exp(gamma0 + gamma1 z_ij)).
struct DgpConfig {
  std::vector<Eigen::Index> sizes;  // n_i per area
  std::vector<int> groups;          // group label per area, empty if ungrouped
  double beta0 = 1.0;
  double beta1 = 0.8;
  double tau = 1.2;
  double gamma0 = 1.0;
  double gamma1 = -0.4;
  double x_lo = 0.0, x_hi = 2.0;
  double z_lo = 0.0, z_hi = 5.0;
  EffectDistribution distribution = EffectDistribution::M1;
  ChiVariant chi = ChiVariant::chi_squared;
  std::uint64_t seed = 20240607;

  std::size_t m() const { return sizes.size(); }

  /// m areas of n observations each.
  static DgpConfig constant_design(std::size_t m = 20, Eigen::Index n = 8) {
    DgpConfig c;
    c.sizes.assign(m, n);
    return c;
  }

  /// `group_count` groups of `per_group` areas; group G has n = G + 3.
  static DgpConfig grouped_design(int group_count = 4, int per_group = 5) {
    DgpConfig c;
    for (int g = 1; g <= group_count; ++g) {
      for (int k = 0; k < per_group; ++k) {
        c.sizes.push_back(g + 3);
        c.groups.push_back(g);
      }
    }
    return c;
  }

  void validate() const {
    if (sizes.empty()) throw Error(ErrorKind::precondition, "design has no areas");
    for (auto n : sizes) {
      if (n < 1) throw Error(ErrorKind::precondition, "area sizes must be positive");
    }
    if (!groups.empty() && groups.size() != sizes.size()) {
      throw Error(ErrorKind::precondition, "one group label per area is required");
    }
    if (!(tau > 0.0)) throw Error(ErrorKind::precondition, "tau must be positive");
    if (!(x_hi > x_lo) || !(z_hi > z_lo)) {
      throw Error(ErrorKind::precondition, "covariate ranges must be nonempty");
    }
  }
};

struct SimulatedSample {
  ClusteredDataset data;
  VectorXd mu;
  ModelParams theta;
};

namespace stream_stage {
inline constexpr std::uint64_t covariates = 0;
inline constexpr std::uint64_t mse_study = 1;
inline constexpr std::uint64_t estimator_study = 2;
}  // namespace stream_stage

/// Covariates come from the master seed alone; v and eps from the stream
/// keyed by (seed, stage, replication).
inline SimulatedSample generate_dgp(const DgpConfig& cfg, std::uint64_t replication,
                                    std::uint64_t stage = stream_stage::mse_study) {
  cfg.validate();
  RandomStream cov(cfg.seed, stream_stage::covariates, 0);
  RandomStream draw(cfg.seed, stage + 1, replication);

  std::vector<Cluster> clusters;
  clusters.reserve(cfg.m());
  VectorXd mu(static_cast<Eigen::Index>(cfg.m()));
  const double tau2 = cfg.tau * cfg.tau;
  for (std::size_t i = 0; i < cfg.m(); ++i) {
    const Eigen::Index n = cfg.sizes[i];
    Cluster c;
    c.id = std::to_string(i + 1);
    c.X.resize(n, 2);
    c.Z.resize(n, 2);
    c.y.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      c.X(j, 0) = 1.0;
      c.X(j, 1) = cov.uniform(cfg.x_lo, cfg.x_hi);
      c.Z(j, 0) = 1.0;
      c.Z(j, 1) = cov.uniform(cfg.z_lo, cfg.z_hi);
    }
    const double v = sample_effect(cfg.distribution, tau2, draw, EffectRole::random_effect,
                                   cfg.chi);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double s2 = std::exp(cfg.gamma0 + cfg.gamma1 * c.Z(j, 1));
      const double eps = sample_effect(cfg.distribution, s2, draw, EffectRole::error, cfg.chi);
      c.y(j) = cfg.beta0 + cfg.beta1 * c.X(j, 1) + v + eps;
    }
    mu(static_cast<Eigen::Index>(i)) = cfg.beta0 + cfg.beta1 * c.X.col(1).mean() + v;
    clusters.push_back(std::move(c));
  }
  ModelParams theta;
  theta.beta = (VectorXd(2) << cfg.beta0, cfg.beta1).finished();
  theta.gamma = (VectorXd(2) << cfg.gamma0, cfg.gamma1).finished();
  theta.tau2 = tau2;
  return {ClusteredDataset(std::move(clusters), 2, 2), mu, theta};
}

// -------------------------------------------------------------------------
// Homoscedastic baseline
// -------------------------------------------------------------------------

struct NerFit {
  FitResult fit;
  VectorXd eblup;
  VectorXd naive_r1;
};

/// Fits the homoscedastic submodel (single constant variance covariate).
inline NerFit fit_ner_baseline(const ClusteredDataset& data, FitOptions opts = {}) {
  const ClusteredDataset homo = data.homoscedastic();
  opts.gamma_init.reset();
  NerFit out;
  out.fit = fit(homo, exponential_variance(), opts);
  const auto m = static_cast<Eigen::Index>(data.m());
  out.eblup.resize(m);
  out.naive_r1.resize(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto k = static_cast<std::size_t>(i);
    out.eblup(i) = eblup(out.fit, homo, k, homo[k].x_mean());
    out.naive_r1(i) = out.fit.geometry[k].r1();
  }
  return out;
}

// -------------------------------------------------------------------------
// Parallel replication driver
// -------------------------------------------------------------------------

/// Worker count: HNERVF_THREADS if set to a positive integer, otherwise the
/// hardware concurrency.
inline unsigned resolve_thread_count() {
  if (const char* env = std::getenv("HNERVF_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs body(r) for r in [0, count). Each index writes only its own slot, so
/// results do not depend on the worker count.
template <class Body>
void parallel_for(std::size_t count, unsigned threads, Body&& body) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(count)));
  if (threads <= 1) {
    for (std::size_t r = 0; r < count; ++r) body(r);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t r = t; r < count; r += threads) body(r);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct StudyOptions {
  FitOptions fit;
  double max_failure_rate = 0.01;
  unsigned threads = 0;  // 0: resolve_thread_count()
};

namespace detail {

inline void check_failure_rate(std::size_t failed, std::size_t total, double limit,
                               const char* stage) {
  if (total == 0) return;
  const double rate = static_cast<double>(failed) / static_cast<double>(total);
  if (rate > limit) {
    throw Error(ErrorKind::study_failure,
                std::string(stage) + ": " + std::to_string(failed) + " of " +
                    std::to_string(total) + " replications failed");
  }
}

inline unsigned worker_count(const StudyOptions& o) {
  return o.threads > 0 ? o.threads : resolve_thread_count();
}

}  // namespace detail

// -------------------------------------------------------------------------
// Simulated MSE of the EBLUP: heteroscedastic model vs homoscedastic baseline
// -------------------------------------------------------------------------

struct EblupStudyResult {
  DgpConfig config;
  std::size_t replications = 0;
  std::size_t failed = 0;
  VectorXd mse_hnervf;
  VectorXd mse_ner;
};

inline EblupStudyResult run_eblup_mse_study(const DgpConfig& cfg, std::size_t R,
                                            const StudyOptions& opts = {}) {
  cfg.validate();
  if (R < 1) throw Error(ErrorKind::precondition, "at least one replication is required");
  const auto m = static_cast<Eigen::Index>(cfg.m());

  struct Slot {
    bool ok = false;
    VectorXd sq_h;
    VectorXd sq_n;
  };
  std::vector<Slot> slots(R);
  FitOptions fo = opts.fit;
  fo.point_estimates_only = true;

  parallel_for(R, detail::worker_count(opts), [&](std::size_t r) {
    const SimulatedSample s = generate_dgp(cfg, r, stream_stage::mse_study);
    try {
      const FitResult h = fit(s.data, exponential_variance(), fo);
      const NerFit n = fit_ner_baseline(s.data, fo);
      Slot& slot = slots[r];
      slot.sq_h.resize(m);
      slot.sq_n.resize(m);
      for (Eigen::Index i = 0; i < m; ++i) {
        const auto k = static_cast<std::size_t>(i);
        slot.sq_h(i) = std::pow(eblup(h, s.data, k, s.data[k].x_mean()) - s.mu(i), 2);
        slot.sq_n(i) = std::pow(n.eblup(i) - s.mu(i), 2);
      }
      slot.ok = true;
    } catch (const Error&) {
    }
  });

  EblupStudyResult out;
  out.config = cfg;
  out.mse_hnervf = VectorXd::Zero(m);
  out.mse_ner = VectorXd::Zero(m);
  for (const Slot& s : slots) {
    if (!s.ok) {
      ++out.failed;
      continue;
    }
    out.mse_hnervf += s.sq_h;
    out.mse_ner += s.sq_n;
    ++out.replications;
  }
  detail::check_failure_rate(out.failed, R, opts.max_failure_rate, "EBLUP MSE study");
  out.mse_hnervf /= static_cast<double>(out.replications);
  out.mse_ner /= static_cast<double>(out.replications);
  return out;
}

// -------------------------------------------------------------------------
// Relative bias and CV of the MSE estimator
// -------------------------------------------------------------------------

struct GroupSummary {
  int group = 0;
  std::size_t areas = 0;
  // Percentages.
  double rb = 0.0;
  double cv = 0.0;
  double rbn = 0.0;
  double cvn = 0.0;
  double rb_median = 0.0;
  double rbn_median = 0.0;
};

struct MseEstimatorStudyResult {
  DgpConfig config;
  std::size_t mse_replications = 0;
  std::size_t estimator_replications = 0;
  std::size_t failed_mse_stage = 0;
  std::size_t failed_estimator_stage = 0;
  VectorXd true_mse;
  // Per-area fractions (not percentages).
  VectorXd rb;
  VectorXd cv;
  VectorXd rbn;
  VectorXd cvn;
  std::vector<GroupSummary> groups;
};

namespace detail {

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

inline MseEstimatorStudyResult run_mse_estimator_study(const DgpConfig& cfg, std::size_t R_mse,
                                                       std::size_t R_est,
                                                       const StudyOptions& opts = {}) {
  cfg.validate();
  if (R_mse < 1 || R_est < 1) {
    throw Error(ErrorKind::precondition, "at least one replication per stage is required");
  }
  const auto m = static_cast<Eigen::Index>(cfg.m());
  const unsigned workers = detail::worker_count(opts);

  // Stage 1: simulated MSE of the EBLUP.
  std::vector<VectorXd> sq(R_mse);
  {
    FitOptions fo = opts.fit;
    fo.point_estimates_only = true;
    parallel_for(R_mse, workers, [&](std::size_t r) {
      const SimulatedSample s = generate_dgp(cfg, r, stream_stage::mse_study);
      try {
        const FitResult h = fit(s.data, exponential_variance(), fo);
        VectorXd e(m);
        for (Eigen::Index i = 0; i < m; ++i) {
          const auto k = static_cast<std::size_t>(i);
          e(i) = std::pow(eblup(h, s.data, k, s.data[k].x_mean()) - s.mu(i), 2);
        }
        sq[r] = std::move(e);
      } catch (const Error&) {
      }
    });
  }
  MseEstimatorStudyResult out;
  out.config = cfg;
  out.true_mse = VectorXd::Zero(m);
  for (const auto& e : sq) {
    if (e.size() == 0) {
      ++out.failed_mse_stage;
      continue;
    }
    out.true_mse += e;
    ++out.mse_replications;
  }
  detail::check_failure_rate(out.failed_mse_stage, R_mse, opts.max_failure_rate,
                             "simulated MSE stage");
  out.true_mse /= static_cast<double>(out.mse_replications);

  // Stage 2: MSE estimates on fresh replications.
  std::vector<VectorXd> est(R_est);
  std::vector<VectorXd> naive(R_est);
  {
    FitOptions fo = opts.fit;
    fo.point_estimates_only = false;
    parallel_for(R_est, workers, [&](std::size_t r) {
      const SimulatedSample s = generate_dgp(cfg, r, stream_stage::estimator_study);
      try {
        const FitResult h = fit(s.data, exponential_variance(), fo);
        const MseReport rep = predict_all(h, s.data);
        VectorXd a(m), b(m);
        for (Eigen::Index i = 0; i < m; ++i) {
          a(i) = rep.rows[static_cast<std::size_t>(i)].mse;
          b(i) = rep.rows[static_cast<std::size_t>(i)].naive_mse;
        }
        est[r] = std::move(a);
        naive[r] = std::move(b);
      } catch (const Error&) {
      }
    });
  }
  out.rb = VectorXd::Zero(m);
  out.cv = VectorXd::Zero(m);
  out.rbn = VectorXd::Zero(m);
  out.cvn = VectorXd::Zero(m);
  for (std::size_t r = 0; r < R_est; ++r) {
    if (est[r].size() == 0) {
      ++out.failed_estimator_stage;
      continue;
    }
    const VectorXd d = (est[r] - out.true_mse).cwiseQuotient(out.true_mse);
    const VectorXd dn = (naive[r] - out.true_mse).cwiseQuotient(out.true_mse);
    out.rb += d;
    out.cv += d.cwiseProduct(d);
    out.rbn += dn;
    out.cvn += dn.cwiseProduct(dn);
    ++out.estimator_replications;
  }
  detail::check_failure_rate(out.failed_estimator_stage, R_est, opts.max_failure_rate,
                             "MSE estimator stage");
  const double R = static_cast<double>(out.estimator_replications);
  out.rb /= R;
  out.rbn /= R;
  out.cv = (out.cv / R).cwiseSqrt();
  out.cvn = (out.cvn / R).cwiseSqrt();

  std::vector<int> labels = cfg.groups;
  if (labels.empty()) labels.assign(cfg.m(), 1);
  std::vector<int> distinct = labels;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  for (int g : distinct) {
    GroupSummary gs;
    gs.group = g;
    std::vector<double> rb, rbn;
    for (Eigen::Index i = 0; i < m; ++i) {
      if (labels[static_cast<std::size_t>(i)] != g) continue;
      ++gs.areas;
      gs.rb += out.rb(i);
      gs.cv += out.cv(i);
      gs.rbn += out.rbn(i);
      gs.cvn += out.cvn(i);
      rb.push_back(out.rb(i));
      rbn.push_back(out.rbn(i));
    }
    const double k = static_cast<double>(gs.areas);
    gs.rb *= 100.0 / k;
    gs.cv *= 100.0 / k;
    gs.rbn *= 100.0 / k;
    gs.cvn *= 100.0 / k;
    gs.rb_median = 100.0 * detail::median_of(rb);
    gs.rbn_median = 100.0 * detail::median_of(rbn);
    out.groups.push_back(gs);
  }
  return out;
}

}  // namespace hnervf
