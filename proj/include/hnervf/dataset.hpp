#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hnervf/errors.hpp"

namespace hnervf {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Observations of one cluster (small area): response, regression covariates
/// (n x p) and variance covariates (n x q).
struct Cluster {
  std::string id;
  VectorXd y;
  MatrixXd X;
  MatrixXd Z;

  Eigen::Index size() const { return y.size(); }
  VectorXd x_mean() const { return X.colwise().mean().transpose(); }
  VectorXd z_mean() const { return Z.colwise().mean().transpose(); }
  double y_mean() const { return y.mean(); }
};

class ClusteredDataset {
 public:
  ClusteredDataset() = default;
  ClusteredDataset(std::vector<Cluster> clusters, Eigen::Index p, Eigen::Index q)
      : clusters_(std::move(clusters)), p_(p), q_(q) {
    validate();
  }

  const std::vector<Cluster>& clusters() const { return clusters_; }
  const Cluster& operator[](std::size_t i) const { return clusters_[i]; }
  std::size_t m() const { return clusters_.size(); }
  Eigen::Index p() const { return p_; }
  Eigen::Index q() const { return q_; }
  Eigen::Index N() const { return n_total_; }

  /// Stacked n x p design over all clusters, in cluster order.
  MatrixXd stacked_X() const {
    MatrixXd X(n_total_, p_);
    Eigen::Index row = 0;
    for (const auto& c : clusters_) {
      X.middleRows(row, c.size()) = c.X;
      row += c.size();
    }
    return X;
  }

  VectorXd stacked_y() const {
    VectorXd y(n_total_);
    Eigen::Index row = 0;
    for (const auto& c : clusters_) {
      y.segment(row, c.size()) = c.y;
      row += c.size();
    }
    return y;
  }

  /// Copy of the dataset with every cluster's response replaced.
  ClusteredDataset with_responses(const std::vector<VectorXd>& ys) const {
    ClusteredDataset out = *this;
    for (std::size_t i = 0; i < out.clusters_.size(); ++i) {
      if (ys[i].size() != out.clusters_[i].size()) {
        throw Error(ErrorKind::shape, "response length mismatch for cluster " +
                                          out.clusters_[i].id);
      }
      out.clusters_[i].y = ys[i];
    }
    return out;
  }

  /// Copy of the dataset with the variance covariates replaced by a single
  /// column of ones (homoscedastic submodel).
  ClusteredDataset homoscedastic() const {
    ClusteredDataset out = *this;
    for (auto& c : out.clusters_) c.Z = MatrixXd::Ones(c.size(), 1);
    out.q_ = 1;
    return out;
  }

 private:
  void validate() {
    if (clusters_.empty()) throw Error(ErrorKind::shape, "dataset has no clusters");
    n_total_ = 0;
    for (const auto& c : clusters_) {
      if (c.size() < 1) throw Error(ErrorKind::shape, "cluster '" + c.id + "' is empty");
      if (c.X.rows() != c.size() || c.Z.rows() != c.size()) {
        throw Error(ErrorKind::shape, "row counts of y, X, Z disagree in cluster '" +
                                          c.id + "'");
      }
      if (c.X.cols() != p_) {
        throw Error(ErrorKind::shape, "cluster '" + c.id + "' has " +
                                          std::to_string(c.X.cols()) +
                                          " covariate columns, expected " +
                                          std::to_string(p_));
      }
      if (c.Z.cols() != q_) {
        throw Error(ErrorKind::shape, "cluster '" + c.id + "' has " +
                                          std::to_string(c.Z.cols()) +
                                          " variance-covariate columns, expected " +
                                          std::to_string(q_));
      }
      n_total_ += c.size();
    }
    const auto m = static_cast<Eigen::Index>(clusters_.size());
    if (m < p_ || m < q_) {
      throw Error(ErrorKind::shape, "number of clusters must be at least p and q");
    }
  }

  std::vector<Cluster> clusters_;
  Eigen::Index p_ = 0;
  Eigen::Index q_ = 0;
  Eigen::Index n_total_ = 0;
};

/// theta = (beta, gamma, tau^2).
struct ModelParams {
  VectorXd beta;
  VectorXd gamma;
  double tau2 = 0.0;

  /// Stacked parameter vector in (beta, gamma, tau^2) order.
  VectorXd stacked() const {
    VectorXd out(beta.size() + gamma.size() + 1);
    out << beta, gamma, tau2;
    return out;
  }
};

}  // namespace hnervf
