#pragma once

// Concrete lower-level problems (elastic-net logistic regression, LASSO,
// generic quadratics) and the pieces of the upper-level objective.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bilevel/composite.hpp"
#include "bilevel/errors.hpp"

namespace bilevel {

/// Upper-level parameter vector with its box. For the elastic-net problem
/// theta(0) is the log10 weight of the l2 term and theta(1) the log10 weight
/// of the l1 term.
struct HyperPoint {
  Vector theta;
  Vector lower;
  Vector upper;

  HyperPoint() = default;
  HyperPoint(Vector t, Vector lo, Vector hi)
      : theta(std::move(t)), lower(std::move(lo)), upper(std::move(hi)) {
    validate();
  }
  /// A point with an unbounded box.
  static HyperPoint unbounded(const Vector& t) {
    const double inf = std::numeric_limits<double>::infinity();
    return HyperPoint(t, Vector::Constant(t.size(), -inf), Vector::Constant(t.size(), inf));
  }

  Eigen::Index size() const { return theta.size(); }
  void validate() const {
    if (lower.size() != theta.size() || upper.size() != theta.size()) {
      throw ConfigError("HyperPoint: bound dimensions do not match theta");
    }
    if (!theta.allFinite()) throw ConfigError("HyperPoint: theta must be finite");
    if ((theta.array() < lower.array()).any() || (theta.array() > upper.array()).any()) {
      throw ConfigError("HyperPoint: theta lies outside its bounds");
    }
  }
  HyperPoint with_theta(const Vector& t) const { return HyperPoint(t, lower, upper); }
};

/// One binary classification task: label +1 means "is digit `digit`".
struct BinaryTask {
  Matrix features;             // N x d, rows are samples
  Eigen::VectorXi labels;      // N entries in {-1, +1}
  Matrix test_features;        // N~ x d
  Eigen::VectorXi test_labels;  // N~ entries in {-1, +1}
  int digit = -1;

  Eigen::Index dim() const { return features.cols(); }

  void validate() const {
    if (features.rows() < 1 || test_features.rows() < 1) {
      throw SizeError("BinaryTask: need at least one training and one test sample");
    }
    if (labels.size() != features.rows() || test_labels.size() != test_features.rows()) {
      throw SizeError("BinaryTask: label count does not match sample count");
    }
    if (test_features.cols() != features.cols()) {
      throw SizeError("BinaryTask: train and test feature dimensions differ");
    }
    auto pm_one = [](const Eigen::VectorXi& y) {
      return ((y.array() == 1) || (y.array() == -1)).all();
    };
    if (!pm_one(labels) || !pm_one(test_labels)) {
      throw ConfigError("BinaryTask: labels must be exactly -1 or +1");
    }
    if (!features.allFinite() || !test_features.allFinite()) {
      throw ConfigError("BinaryTask: features must be finite");
    }
  }
};

/// Logistic function, evaluated without overflow for either sign of t.
inline double sigmoid(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

/// log(1 + exp(t)) without overflow.
inline double log1p_exp(double t) {
  return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
}

/// f(w) = (1/N) sum_i log(1 + exp(-y_i w'x_i)) + (l2/2)|w|^2 and its gradient.
inline double logistic_smooth_part(const BinaryTask& task, double l2_weight, const Vector& w,
                                   Vector& grad) {
  const auto n = static_cast<double>(task.features.rows());
  const Vector y = task.labels.cast<double>();
  const Vector margins = y.cwiseProduct(task.features * w);
  double loss = 0.0;
  Vector coeff(margins.size());
  for (Eigen::Index i = 0; i < margins.size(); ++i) {
    loss += log1p_exp(-margins(i));
    coeff(i) = -y(i) * sigmoid(-margins(i));
  }
  grad.noalias() = task.features.transpose() * coeff;
  grad /= n;
  grad += l2_weight * w;
  return loss / n + 0.5 * l2_weight * w.squaredNorm();
}

/// |X|_2^2 by power iteration on X'X. Stops when the Rayleigh quotient changes
/// by less than `rel_tol` (relative) or after `max_iterations`, then inflates the
/// quotient by (1 + 1e-8) so the estimate does not sit below the true value.
inline double spectral_norm_sq(const Matrix& x, double rel_tol = 1e-10,
                               std::size_t max_iterations = 10'000) {
  if (x.size() == 0 || x.cwiseAbs().maxCoeff() == 0.0) {
    throw ZeroMatrix("spectral_norm_sq: matrix is zero");
  }
  // Deterministic start with no exact symmetry, so it is unlikely to be
  // orthogonal to the top singular vector.
  Vector v(x.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = 1.0 + 0.1 * std::sin(1.0 + 7.0 * i);
  v.normalize();
  double rayleigh = 0.0;
  for (std::size_t k = 0; k < max_iterations; ++k) {
    const Vector u = x * v;
    const double next = u.squaredNorm();
    Vector g = x.transpose() * u;
    const double g_norm = g.norm();
    if (g_norm == 0.0) {
      // Start vector was in the null space; perturb deterministically.
      v = Vector::LinSpaced(v.size(), 1.0, 2.0).normalized();
      continue;
    }
    v = g / g_norm;
    const bool converged = k > 0 && std::abs(next - rayleigh) <= rel_tol * next;
    rayleigh = next;
    if (converged) break;
  }
  return rayleigh * (1.0 + 1e-8);
}

/// Elastic-net logistic regression for one task:
///   f(w) = logistic loss + (10^theta1 / 2)|w|^2,   g(w) = 10^theta2 |w|_1
/// with mu = 10^theta1 and L = |X|^2/(4N) + 10^theta1.
class ElasticNetLogistic {
 public:
  ElasticNetLogistic(const BinaryTask& task, const Vector& theta, double spectral_sq)
      : task_(&task),
        l2_(std::pow(10.0, theta(0))),
        l1_(std::pow(10.0, theta(1))),
        lipschitz_(spectral_sq / (4.0 * static_cast<double>(task.features.rows())) + l2_) {}

  Eigen::Index dim() const { return task_->dim(); }
  double smooth(const Vector& w, Vector& grad) const {
    return logistic_smooth_part(*task_, l2_, w, grad);
  }
  Vector prox(const Vector& v, double step) const { return prox_l1(v, step * l1_); }
  double nonsmooth(const Vector& w) const { return l1_ * w.lpNorm<1>(); }
  double mu() const { return l2_; }
  double lipschitz() const { return lipschitz_; }
  double l1_weight() const { return l1_; }

 private:
  const BinaryTask* task_;
  double l2_;
  double l1_;
  double lipschitz_;
};

inline ElasticNetLogistic elastic_net_problem(const BinaryTask& task, const HyperPoint& point,
                                              double spectral_sq) {
  if (point.size() != 2) throw ConfigError("elastic_net_problem: theta must have 2 entries");
  return ElasticNetLogistic(task, point.theta, spectral_sq);
}

/// 0.5|Aw - b|^2 + (l2/2)|w|^2 + l1|w|_1 with the weights used as given (not
/// as exponents). mu = l2, L = |A|^2 + l2.
class LassoProblem {
 public:
  LassoProblem(Matrix a, Vector b, double l2, double l1, double a_spectral_sq)
      : a_(std::move(a)), b_(std::move(b)), l2_(l2), l1_(l1), lipschitz_(a_spectral_sq + l2) {}

  Eigen::Index dim() const { return a_.cols(); }
  double smooth(const Vector& w, Vector& grad) const {
    const Vector r = a_ * w - b_;
    grad.noalias() = a_.transpose() * r;
    grad += l2_ * w;
    return 0.5 * r.squaredNorm() + 0.5 * l2_ * w.squaredNorm();
  }
  Vector prox(const Vector& v, double step) const { return prox_l1(v, step * l1_); }
  double nonsmooth(const Vector& w) const { return l1_ * w.lpNorm<1>(); }
  double mu() const { return l2_; }
  double lipschitz() const { return lipschitz_; }

  const Matrix& a() const { return a_; }
  const Vector& b() const { return b_; }
  double l2_weight() const { return l2_; }
  double l1_weight() const { return l1_; }

 private:
  Matrix a_;
  Vector b_;
  double l2_;
  double l1_;
  double lipschitz_;
};

inline LassoProblem lasso_problem(const Matrix& a, const Vector& b, const HyperPoint& point) {
  if (point.size() != 2) throw ConfigError("lasso_problem: theta must have 2 entries");
  if (a.rows() != b.size()) throw SizeError("lasso_problem: A and b have inconsistent sizes");
  if (!(point.theta(0) > 0.0)) {
    throw NotStronglyConvex("lasso_problem: the l2 weight must be positive");
  }
  if (point.theta(1) < 0.0) throw ConfigError("lasso_problem: the l1 weight must be nonnegative");
  return LassoProblem(a, b, point.theta(0), point.theta(1), spectral_norm_sq(a));
}

/// 0.5 w'Qw - c'w + l1|w|_1 for symmetric positive definite Q; mu and L are
/// the extreme eigenvalues of Q.
class QuadraticProblem {
 public:
  QuadraticProblem(Matrix q, Vector c, double l1 = 0.0) : q_(std::move(q)), c_(std::move(c)), l1_(l1) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(q_, Eigen::EigenvaluesOnly);
    mu_ = eig.eigenvalues().minCoeff();
    lipschitz_ = eig.eigenvalues().maxCoeff();
    if (!(mu_ > 0.0)) throw NotStronglyConvex("QuadraticProblem: Q must be positive definite");
  }

  Eigen::Index dim() const { return q_.cols(); }
  double smooth(const Vector& w, Vector& grad) const {
    grad.noalias() = q_ * w;
    const double value = 0.5 * w.dot(grad) - c_.dot(w);
    grad -= c_;
    return value;
  }
  Vector prox(const Vector& v, double step) const {
    return l1_ == 0.0 ? v : prox_l1(v, step * l1_);
  }
  double nonsmooth(const Vector& w) const { return l1_ * w.lpNorm<1>(); }
  double mu() const { return mu_; }
  double lipschitz() const { return lipschitz_; }

  const Matrix& q() const { return q_; }
  const Vector& c() const { return c_; }

 private:
  Matrix q_;
  Vector c_;
  double l1_;
  double mu_ = 0.0;
  double lipschitz_ = 0.0;
};

struct LassoInstance {
  Matrix a;
  Vector w0;
  Vector b;
};

/// Standard normal A (rows x cols), w0 (cols) and b (rows), drawn in that
/// order (A row by row) from std::mt19937_64(seed) through
/// std::normal_distribution<double>(0, 1).
inline LassoInstance generate_lasso_instance(std::uint64_t seed, Eigen::Index rows,
                                             Eigen::Index cols) {
  if (rows < 1 || cols < 1) throw SizeError("generate_lasso_instance: need rows, cols >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  LassoInstance inst{Matrix(rows, cols), Vector(cols), Vector(rows)};
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) inst.a(i, j) = normal(rng);
  for (Eigen::Index j = 0; j < cols; ++j) inst.w0(j) = normal(rng);
  for (Eigen::Index i = 0; i < rows; ++i) inst.b(i) = normal(rng);
  return inst;
}

/// Rescale A so that |A|_2^2 equals `a_spectral_sq`; w0 and b are unchanged.
inline void rescale_to_spectral_sq(LassoInstance& inst, double a_spectral_sq) {
  const double current = spectral_norm_sq(inst.a) / (1.0 + 1e-8);
  inst.a *= std::sqrt(a_spectral_sq / current);
}

/// sigm(w'x~_i) - p~_i with p~_i = 1 for positive test labels and 0 otherwise.
inline Vector test_residuals(const Vector& w, const BinaryTask& task) {
  const Vector scores = task.test_features * w;
  Vector r(scores.size());
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    r(i) = sigmoid(scores(i)) - (task.test_labels(i) == 1 ? 1.0 : 0.0);
  }
  return r;
}

/// [sqrt(alpha1) L/mu, sqrt(alpha2) 10^{-theta2/2}]; squares sum to
/// alpha1 (L/mu)^2 + alpha2 10^{-theta2}.
inline Vector regularizer_residuals(const HyperPoint& point, double mu, double lipschitz,
                                    double alpha1, double alpha2) {
  if (!(mu > 0.0) || !(lipschitz > 0.0)) {
    throw ConfigError("regularizer_residuals: mu and lipschitz must be positive");
  }
  Vector r(2);
  r(0) = std::sqrt(alpha1) * (lipschitz / mu);
  r(1) = std::sqrt(alpha2) * std::pow(10.0, -0.5 * point.theta(1));
  return r;
}

/// 1 iff sigm(w'x) >= 0.5, i.e. w'x >= 0.
inline int predict(const Vector& w, const Vector& x) { return w.dot(x) >= 0.0 ? 1 : 0; }

/// Fraction of test samples whose predicted label matches.
inline double test_accuracy(const Vector& w, const BinaryTask& task) {
  const Vector scores = task.test_features * w;
  Eigen::Index correct = 0;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    const int predicted = scores(i) >= 0.0 ? 1 : -1;
    if (predicted == task.test_labels(i)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

/// Upper-level residual vector: per-task test residuals followed by the
/// regularizer residuals. objective = sum of squares, accumulated task by task
/// in index order, then the regularizer.
struct UpperResiduals {
  std::vector<Vector> per_task;
  Vector reg;
  double objective = 0.0;

  static UpperResiduals assemble(std::vector<Vector> per_task, Vector reg) {
    UpperResiduals out{std::move(per_task), std::move(reg), 0.0};
    for (const Vector& r : out.per_task) out.objective += r.squaredNorm();
    out.objective += out.reg.squaredNorm();
    return out;
  }

  Eigen::Index total_size() const {
    Eigen::Index n = reg.size();
    for (const Vector& r : per_task) n += r.size();
    return n;
  }

  Vector flatten() const {
    Vector out(total_size());
    Eigen::Index pos = 0;
    for (const Vector& r : per_task) {
      out.segment(pos, r.size()) = r;
      pos += r.size();
    }
    out.segment(pos, reg.size()) = reg;
    return out;
  }
};

}  // namespace bilevel
