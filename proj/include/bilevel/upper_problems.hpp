#pragma once

// Upper-level problems accepted by run_solver.

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "bilevel/problems.hpp"

namespace bilevel {

/// Elastic-net logistic regression tuned on smoothed test accuracy:
///   F(theta) = sum_j |sigm(X~_j w_j) - p~_j|^2 + alpha1 (L/mu)^2 + alpha2 10^{-theta2}.
/// L in the regularizer is the largest L_j over tasks.
class ElasticNetBilevel {
 public:
  ElasticNetBilevel(std::vector<BinaryTask> tasks, double alpha1, double alpha2)
      : tasks_(std::move(tasks)), alpha1_(alpha1), alpha2_(alpha2) {
    if (tasks_.empty()) throw ConfigError("ElasticNetBilevel: need at least one task");
    spectral_sq_.reserve(tasks_.size());
    for (const auto& t : tasks_) {
      t.validate();
      spectral_sq_.push_back(spectral_norm_sq(t.features));
      residual_lipschitz_.push_back(0.25 * std::sqrt(spectral_norm_sq(t.test_features)));
    }
  }

  std::size_t num_tasks() const { return tasks_.size(); }
  ElasticNetLogistic lower_problem(std::size_t j, const HyperPoint& p) const {
    return elastic_net_problem(tasks_.at(j), p, spectral_sq_.at(j));
  }
  Vector initial_weights(std::size_t j) const { return Vector::Zero(tasks_.at(j).dim()); }
  Vector task_residuals(std::size_t j, const Vector& w) const {
    return test_residuals(w, tasks_.at(j));
  }
  /// The Jacobian of sigm(X~ w) - p~ is diag(sigm') X~ with sigm' <= 1/4.
  double residual_lipschitz(std::size_t j) const { return residual_lipschitz_.at(j); }
  Vector regularizer_residuals(const HyperPoint& p) const {
    double mu = 0.0;
    double lipschitz = 0.0;
    for (std::size_t j = 0; j < tasks_.size(); ++j) {
      const auto prob = lower_problem(j, p);
      mu = prob.mu();
      lipschitz = std::max(lipschitz, prob.lipschitz());
    }
    return bilevel::regularizer_residuals(p, mu, lipschitz, alpha1_, alpha2_);
  }

  const std::vector<BinaryTask>& tasks() const { return tasks_; }
  double spectral_sq(std::size_t j) const { return spectral_sq_.at(j); }

 private:
  std::vector<BinaryTask> tasks_;
  std::vector<double> spectral_sq_;
  std::vector<double> residual_lipschitz_;
  double alpha1_;
  double alpha2_;
};

/// Bilevel problem with a closed-form lower level, for testing the upper
/// solver. The lower level is the quadratic 0.5 (w - P theta)' H (w - P theta)
/// with P (d x m) having orthonormal columns, so w_hat(theta) = P theta and the
/// residual P'w - theta_star makes F(theta) = |theta - theta_star|^2 exactly at
/// w_hat. H = I gives a lower level that FISTA solves in one step.
class SyntheticBilevel {
 public:
  SyntheticBilevel(Vector theta_star, Eigen::Index lower_dim, double condition,
                   std::uint64_t seed)
      : theta_star_(std::move(theta_star)) {
    const Eigen::Index m = theta_star_.size();
    if (lower_dim < m) throw SizeError("SyntheticBilevel: lower_dim must be >= dim(theta)");
    if (!(condition >= 1.0)) throw ConfigError("SyntheticBilevel: condition must be >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix g(lower_dim, lower_dim);
    for (Eigen::Index i = 0; i < lower_dim; ++i)
      for (Eigen::Index j = 0; j < lower_dim; ++j) g(i, j) = normal(rng);
    const Matrix u = Eigen::HouseholderQR<Matrix>(g).householderQ();
    Vector eig(lower_dim);
    for (Eigen::Index i = 0; i < lower_dim; ++i) {
      const double frac = lower_dim == 1 ? 0.0 : static_cast<double>(i) / (lower_dim - 1);
      eig(i) = std::pow(condition, frac);
    }
    h_ = condition == 1.0 ? Matrix(Matrix::Identity(lower_dim, lower_dim))
                          : Matrix(u * eig.asDiagonal() * u.transpose());
    h_ = 0.5 * (h_ + h_.transpose());
    // P: first m columns of a second random orthogonal matrix.
    for (Eigen::Index i = 0; i < lower_dim; ++i)
      for (Eigen::Index j = 0; j < lower_dim; ++j) g(i, j) = normal(rng);
    const Matrix v = Eigen::HouseholderQR<Matrix>(g).householderQ();
    p_ = v.leftCols(m);
  }

  std::size_t num_tasks() const { return 1; }
  QuadraticProblem lower_problem(std::size_t, const HyperPoint& p) const {
    return QuadraticProblem(h_, h_ * (p_ * p.theta));
  }
  Vector initial_weights(std::size_t) const { return Vector::Zero(h_.rows()); }
  Vector task_residuals(std::size_t, const Vector& w) const {
    return p_.transpose() * w - theta_star_;
  }
  double residual_lipschitz(std::size_t) const { return 1.0; }
  Vector regularizer_residuals(const HyperPoint&) const { return Vector(0); }

  Vector exact_weights(const Vector& theta) const { return p_ * theta; }
  double true_objective(const Vector& theta) const { return (theta - theta_star_).squaredNorm(); }
  const Vector& theta_star() const { return theta_star_; }

 private:
  Vector theta_star_;
  Matrix h_;
  Matrix p_;
};

}  // namespace bilevel
