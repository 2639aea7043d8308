#pragma once

#include <cstdint>
#include <vector>

#include "hnervf/hnervf.hpp"

namespace hnervf::testing {

/// Synthetic stand-in for a land-price survey: 52 stations, a few spots per
/// station (some stations have one), regressors floor-area ratio, commuting
/// time (station level) and distance to the station. Error variance falls
/// with distance: sigma^2 = exp(gamma0 + gamma1 * distance).
struct PlpTruth {
  VectorXd beta = (VectorXd(4) << 42.31, 2.81, -3.56, -0.66).finished();
  VectorXd gamma = (VectorXd(2) << 4.91, -1.82).finished();
  double tau2 = 6.60;
};

inline ClusteredDataset plp_fixture(std::uint64_t seed, const PlpTruth& truth = {},
                                    std::size_t stations = 52) {
  RandomStream rs(seed, 31, 0);
  std::vector<Cluster> clusters;
  for (std::size_t i = 0; i < stations; ++i) {
    // Sizes 1..7 with mean near 4; roughly one station in ten has a single spot.
    const double u = rs.uniform();
    const Eigen::Index n = u < 0.1 ? 1 : 2 + static_cast<Eigen::Index>(rs.uniform(0.0, 5.0));
    const double time = rs.uniform(1.0, 7.0);
    Cluster c;
    c.id = "S" + std::to_string(i + 1);
    c.X.resize(n, 4);
    c.Z.resize(n, 2);
    c.y.resize(n);
    const double v = sample_effect(EffectDistribution::M1, truth.tau2, rs);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double far = rs.uniform(0.5, 4.0);
      const double dist = rs.uniform(0.0, 2.5);
      c.X.row(j) << 1.0, far, time, dist;
      c.Z.row(j) << 1.0, dist;
      const double s2 = std::exp(truth.gamma(0) + truth.gamma(1) * dist);
      c.y(j) = c.X.row(j).dot(truth.beta) + v +
               sample_effect(EffectDistribution::M1, s2, rs, EffectRole::error);
    }
    clusters.push_back(std::move(c));
  }
  return ClusteredDataset(std::move(clusters), 4, 2);
}

}  // namespace hnervf::testing
