#pragma once

// Dynamic-accuracy model-based trust-region DFO for bilevel problems.
//
// Each residual of the upper-level objective F(theta) = |r(theta)|^2 is
// interpolated linearly through m+1 points; the trust-region model is the
// Gauss-Newton quadratic 0.5|r + J s|^2. Lower-level solves are cached per
// (task, theta) and warm started when a tighter accuracy is demanded.

#include <algorithm>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "bilevel/composite.hpp"
#include "bilevel/errors.hpp"
#include "bilevel/problems.hpp"

namespace bilevel {

/// An upper-level problem made of `num_tasks()` lower-level problems that
/// share the parameters theta.
template <class U>
concept UpperLevelProblem =
    requires(const U& u, std::size_t j, const HyperPoint& p, const Vector& w) {
      { u.num_tasks() } -> std::convertible_to<std::size_t>;
      { u.lower_problem(j, p) } -> CompositeProblem;
      { u.initial_weights(j) } -> std::convertible_to<Vector>;
      { u.task_residuals(j, w) } -> std::convertible_to<Vector>;
      { u.regularizer_residuals(p) } -> std::convertible_to<Vector>;
    };

/// Upper-level problems that also bound how fast each task's residual vector
/// moves with the weights: |r_j(w) - r_j(v)| <= residual_lipschitz(j) |w - v|.
template <class U>
concept ResidualLipschitz = requires(const U& u, std::size_t j) {
  { u.residual_lipschitz(j) } -> std::convertible_to<double>;
};

/// Bound on |F(evaluated) - F(exact)| implied by the per-task certificates:
/// with e = L_j sqrt(certificate_j), |r|^2 changes by at most 2|r| e + e^2.
/// Infinite when a certificate is missing.
template <UpperLevelProblem U>
  requires ResidualLipschitz<U>
double objective_error_bound(const U& upper, const std::vector<std::optional<double>>& certificates,
                             const UpperResiduals& residuals) {
  double bound = 0.0;
  for (std::size_t j = 0; j < certificates.size(); ++j) {
    if (!certificates[j]) return std::numeric_limits<double>::infinity();
    const double e = upper.residual_lipschitz(j) * std::sqrt(*certificates[j]);
    bound += 2.0 * residuals.per_task[j].norm() * e + e * e;
  }
  return bound;
}

/// Lower-level accuracy demanded by the upper level.
struct Certified {
  double epsilon;  // bound on |w - w_hat|^2
};
struct Fixed {
  std::size_t iterations;
  bool certify = false;
};
using Accuracy = std::variant<Certified, Fixed>;

/// Squared-norm FISTA target for the rule |w - w_hat| <= c * radius^2,
/// capped at eps_max.
inline double required_accuracy(double radius, double c,
                                double eps_max = std::numeric_limits<double>::infinity()) {
  if (!(radius > 0.0) || !(c > 0.0)) {
    throw ConfigError("required_accuracy: radius and c must be positive");
  }
  const double bound = c * radius * radius;
  return std::min(bound * bound, eps_max);
}

// ---------------------------------------------------------------------------
// Evaluation cache

struct CacheEntry {
  Vector w;
  std::optional<double> certificate;
  /// FISTA state after the last solve; a tighter demand resumes from it.
  std::optional<MomentumState> state;
  std::size_t fista_iterations = 0;  // total spent on this (task, theta)
  std::optional<std::size_t> fixed_iterations;
};

/// Lower-level results keyed by task index and the exact bit pattern of theta.
class EvalCache {
 public:
  using Key = std::pair<std::size_t, std::vector<std::uint64_t>>;

  static Key key(std::size_t task, const Vector& theta) {
    std::vector<std::uint64_t> bits(static_cast<std::size_t>(theta.size()));
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      bits[static_cast<std::size_t>(i)] = std::bit_cast<std::uint64_t>(theta(i));
    }
    return {task, std::move(bits)};
  }

  const CacheEntry* find(std::size_t task, const Vector& theta) const {
    auto it = entries_.find(key(task, theta));
    return it == entries_.end() ? nullptr : &it->second;
  }
  CacheEntry& at(std::size_t task, const Vector& theta) { return entries_[key(task, theta)]; }

  std::size_t size() const { return entries_.size(); }
  std::size_t total_fista_iterations() const {
    std::size_t n = 0;
    for (const auto& [k, e] : entries_) n += e.fista_iterations;
    return n;
  }
  const std::map<Key, CacheEntry>& entries() const { return entries_; }

 private:
  std::map<Key, CacheEntry> entries_;
};

/// One upper-level evaluation at a point.
struct PointEvaluation {
  HyperPoint point;
  UpperResiduals residuals;
  std::vector<std::optional<double>> certificates;  // per task
  std::vector<Vector> weights;                       // per task
  std::size_t fista_iterations = 0;                  // spent by this call

  double objective() const { return residuals.objective; }
  /// True when every task carries a certificate no larger than `epsilon`.
  bool meets(double epsilon) const {
    return std::all_of(certificates.begin(), certificates.end(),
                       [&](const auto& c) { return c && *c <= epsilon; });
  }
};

/// Solve every lower-level problem at `point` to the requested accuracy and
/// assemble the residuals. A tighter demand at a cached point resumes the
/// cached FISTA run (iterate and momentum); a solve is skipped when the cached
/// certificate already meets the demand. Fixed mode always starts cold.
template <UpperLevelProblem U>
PointEvaluation evaluate_point(const U& upper, const HyperPoint& point, const Accuracy& accuracy,
                               EvalCache& cache, std::size_t max_fista_iterations = 1'000'000) {
  point.validate();
  const std::size_t n = upper.num_tasks();
  PointEvaluation out;
  out.point = point;
  out.certificates.resize(n);
  out.weights.resize(n);
  std::vector<Vector> per_task(n);

  for (std::size_t j = 0; j < n; ++j) {
    CacheEntry& entry = cache.at(j, point.theta);
    const bool fresh = entry.w.size() == 0;
    if (const auto* cert = std::get_if<Certified>(&accuracy)) {
      const bool hit = !fresh && entry.certificate && *entry.certificate <= cert->epsilon;
      if (!hit) {
        const auto problem = upper.lower_problem(j, point);
        MomentumState state =
            entry.state ? *entry.state
                        : MomentumState::init(fresh ? Vector(upper.initial_weights(j)) : entry.w,
                                              problem.mu(), problem.lipschitz());
        LowerSolution sol;
        try {
          sol = fista_continue(problem, state,
                               Termination::target(cert->epsilon, max_fista_iterations));
        } catch (const AccuracyUnreachable& e) {
          throw AccuracyUnreachable(std::string(e.what()) + " (task " + std::to_string(j) + ")",
                                    e.best_certificate(), j);
        }
        entry.w = std::move(sol.w);
        entry.certificate = sol.certificate;
        entry.state = std::move(state);
        entry.fista_iterations += sol.iterations;
        entry.fixed_iterations.reset();
        out.fista_iterations += sol.iterations;
      }
    } else {
      const auto& fixed = std::get<Fixed>(accuracy);
      const bool hit = !fresh && entry.fixed_iterations == fixed.iterations &&
                       (!fixed.certify || entry.certificate.has_value());
      if (!hit) {
        const auto problem = upper.lower_problem(j, point);
        MomentumState state = MomentumState::init(Vector(upper.initial_weights(j)), problem.mu(),
                                                  problem.lipschitz());
        LowerSolution sol =
            fista_continue(problem, state, Termination::fixed(fixed.iterations, fixed.certify));
        entry.w = std::move(sol.w);
        entry.certificate = sol.certificate;
        entry.state = std::move(state);
        entry.fista_iterations += sol.iterations;
        entry.fixed_iterations = fixed.iterations;
        out.fista_iterations += sol.iterations;
      }
    }
    out.certificates[j] = entry.certificate;
    out.weights[j] = entry.w;
    per_task[j] = upper.task_residuals(j, entry.w);
  }
  out.residuals = UpperResiduals::assemble(std::move(per_task), upper.regularizer_residuals(point));
  return out;
}

// ---------------------------------------------------------------------------
// Interpolation set and model

struct InterpolationSet {
  std::vector<PointEvaluation> points;  // m + 1 evaluated points
  std::size_t base_index = 0;           // current iterate

  const PointEvaluation& base() const { return points.at(base_index); }
  Eigen::Index dimension() const { return base().point.size(); }

  /// Rows are y_i - y_base for the non-base points, in index order.
  Matrix directions() const {
    const Eigen::Index m = dimension();
    Matrix d(static_cast<Eigen::Index>(points.size()) - 1, m);
    Eigen::Index row = 0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (i == base_index) continue;
      d.row(row++) = (points[i].point.theta - base().point.theta).transpose();
    }
    return d;
  }

  /// Condition number of the direction matrix (infinity when singular).
  double condition_number() const {
    const Matrix d = directions();
    if (d.rows() != d.cols()) return std::numeric_limits<double>::infinity();
    Eigen::JacobiSVD<Matrix> svd(d);
    const auto& s = svd.singularValues();
    if (s.size() == 0) return 1.0;
    const double smallest = s(s.size() - 1);
    if (!(smallest > 0.0)) return std::numeric_limits<double>::infinity();
    return s(0) / smallest;
  }

  bool degenerate(double max_condition) const { return !(condition_number() <= max_condition); }
};

/// Gauss-Newton model 0.5 |r + J s|^2 around the base point.
struct GNModel {
  Vector residual_values;  // r at the base point
  Matrix jacobian;         // R x m
  Vector gradient;         // J' r
  Matrix hessian;          // J' J

  /// 0.5|r + Js|^2 - 0.5|r|^2 in expanded form.
  double change(const Vector& s) const { return gradient.dot(s) + 0.5 * s.dot(hessian * s); }
  /// Predicted decrease of F = |r|^2, i.e. twice the decrease of the model.
  double predicted_decrease(const Vector& s) const { return -2.0 * change(s); }
  /// Model prediction of the full residual vector at base + s.
  Vector predict(const Vector& s) const { return residual_values + jacobian * s; }
};

/// Linear interpolation of every residual through the set. Throws
/// DegenerateGeometry when the direction matrix is singular or has condition
/// number above `max_condition`.
inline GNModel build_model(const InterpolationSet& set, double max_condition = 1e8) {
  const Eigen::Index m = set.dimension();
  if (set.points.size() != static_cast<std::size_t>(m) + 1) {
    throw DegenerateGeometry("build_model: need exactly m+1 interpolation points");
  }
  if (set.degenerate(max_condition)) {
    throw DegenerateGeometry("build_model: interpolation directions are (nearly) dependent");
  }
  const Matrix d = set.directions();
  const Vector r0 = set.base().residuals.flatten();
  Matrix rhs(m, r0.size());
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < set.points.size(); ++i) {
    if (i == set.base_index) continue;
    rhs.row(row++) = (set.points[i].residuals.flatten() - r0).transpose();
  }
  const Eigen::ColPivHouseholderQR<Matrix> qr(d);
  Matrix slopes = qr.solve(rhs);  // m x R, slopes = J'
  slopes += qr.solve(rhs - d * slopes);  // one refinement step

  GNModel model;
  model.residual_values = r0;
  model.jacobian = slopes.transpose();
  model.gradient = model.jacobian.transpose() * r0;
  model.hessian = model.jacobian.transpose() * model.jacobian;
  return model;
}

/// Largest relative mismatch between model predictions and stored residual
/// vectors over the interpolation points.
inline double interpolation_error(const GNModel& model, const InterpolationSet& set) {
  double worst = 0.0;
  for (const auto& p : set.points) {
    const Vector actual = p.residuals.flatten();
    const Vector predicted = model.predict(p.point.theta - set.base().point.theta);
    const double scale =
        std::max({actual.lpNorm<Eigen::Infinity>(),
                  model.residual_values.lpNorm<Eigen::Infinity>(),
                  std::numeric_limits<double>::min()});
    worst = std::max(worst, (predicted - actual).lpNorm<Eigen::Infinity>() / scale);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Trust-region subproblem

namespace detail {

/// min g's + 0.5 s'Hs subject to |s| <= radius, H symmetric.
inline Vector trust_region_ball(const Vector& g, const Matrix& h, double radius) {
  const Eigen::Index m = g.size();
  if (m == 0) return Vector(0);
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(h);
  const Vector lam = eig.eigenvalues();  // ascending
  const Matrix& q = eig.eigenvectors();
  const Vector gq = q.transpose() * g;
  const double g_norm = g.norm();
  const double lam_min = lam(0);
  const double scale = std::max(lam.cwiseAbs().maxCoeff(), 1.0);
  const double tiny = 1e-14 * scale;

  if (g_norm == 0.0) {
    if (lam_min >= -tiny) return Vector::Zero(m);
    return radius * q.col(0);  // pure negative curvature
  }

  auto step_for = [&](double shift, bool& dropped_gradient) {
    Vector sq = Vector::Zero(m);
    dropped_gradient = false;
    for (Eigen::Index i = 0; i < m; ++i) {
      const double denom = lam(i) + shift;
      if (denom > tiny) {
        sq(i) = -gq(i) / denom;
      } else if (std::abs(gq(i)) > 1e-12 * g_norm) {
        dropped_gradient = true;
      }
    }
    return sq;
  };

  const double lo = std::max(0.0, -lam_min);
  bool dropped = false;
  Vector sq = step_for(lo, dropped);
  if (!dropped && sq.norm() <= radius) {
    if (lam_min >= -tiny) return q * sq;  // interior (pseudo-)Newton step
    // Hard case: move along the most negative curvature direction to the boundary.
    const double rem = std::sqrt(std::max(0.0, radius * radius - sq.squaredNorm()));
    sq(0) += rem;
    return q * sq;
  }

  // Boundary solution: find shift > lo with |s(shift)| = radius.
  double a = lo;
  double b = lo + g_norm / radius;
  for (int it = 0; it < 300 && b - a > 1e-15 * std::max(b, 1e-300); ++it) {
    const double mid = 0.5 * (a + b);
    Vector s_mid = step_for(mid, dropped);
    if (dropped || s_mid.norm() > radius) {
      a = mid;
    } else {
      b = mid;
    }
  }
  sq = step_for(b, dropped);
  const double norm = sq.norm();
  if (norm > radius) sq *= radius / norm;
  return q * sq;
}

inline Vector clamp_box(const Vector& s, const Vector& lo, const Vector& hi) {
  return s.cwiseMax(lo).cwiseMin(hi);
}

/// Ball solutions restricted to every face of the box: each coordinate is
/// either free or fixed at one of its finite bounds (3^m faces). For a positive
/// semidefinite H the best feasible candidate is a global minimizer over the
/// intersection of ball and box.
inline std::vector<Vector> face_candidates(const Vector& g, const Matrix& h, double radius,
                                           const Vector& lo, const Vector& hi) {
  const Eigen::Index m = g.size();
  std::vector<Vector> out;
  std::size_t faces = 1;
  for (Eigen::Index i = 0; i < m; ++i) faces *= 3;
  for (std::size_t code = 0; code < faces; ++code) {
    Vector fixed_part = Vector::Zero(m);
    std::vector<Eigen::Index> free_idx;
    bool valid = true;
    std::size_t rest = code;
    for (Eigen::Index i = 0; i < m && valid; ++i) {
      const std::size_t choice = rest % 3;
      rest /= 3;
      if (choice == 0) {
        free_idx.push_back(i);
      } else {
        const double bound = choice == 1 ? lo(i) : hi(i);
        valid = std::isfinite(bound);
        fixed_part(i) = bound;
      }
    }
    if (!valid) continue;
    const double rem2 = radius * radius - fixed_part.squaredNorm();
    if (rem2 < 0.0) continue;
    Vector s = fixed_part;
    if (!free_idx.empty() && rem2 > 0.0) {
      const auto nf = static_cast<Eigen::Index>(free_idx.size());
      const Vector g_full = g + h * fixed_part;
      Vector gf(nf);
      Matrix hf(nf, nf);
      for (Eigen::Index a = 0; a < nf; ++a) {
        gf(a) = g_full(free_idx[static_cast<std::size_t>(a)]);
        for (Eigen::Index b = 0; b < nf; ++b) {
          hf(a, b) = h(free_idx[static_cast<std::size_t>(a)], free_idx[static_cast<std::size_t>(b)]);
        }
      }
      const Vector sf = trust_region_ball(gf, hf, std::sqrt(rem2));
      for (Eigen::Index a = 0; a < nf; ++a) s(free_idx[static_cast<std::size_t>(a)]) = sf(a);
    }
    out.push_back(clamp_box(s, lo, hi));
  }
  return out;
}

}  // namespace detail

/// Largest dimension for which solve_tr_subproblem enumerates box faces.
inline constexpr Eigen::Index kMaxFaceEnumerationDim = 6;

/// Approximate minimizer of the model within |s| <= radius and
/// lower_rel <= s <= upper_rel (bounds relative to the base point, so they
/// contain 0). Without active bounds the ball problem is solved exactly.
inline Vector solve_tr_subproblem(const GNModel& model, double radius, const Vector& lower_rel,
                                  const Vector& upper_rel) {
  if (!(radius > 0.0)) throw ConfigError("solve_tr_subproblem: radius must be positive");
  const Vector& g = model.gradient;
  const Matrix& h = model.hessian;
  const Eigen::Index m = g.size();

  const Vector exact = detail::trust_region_ball(g, h, radius);
  const Vector clamped = detail::clamp_box(exact, lower_rel, upper_rel);
  if ((clamped - exact).norm() == 0.0) return exact;

  // Active-set refinement: freeze coordinates that violate their bounds at
  // the bound and re-solve the ball problem over the free ones with the
  // radius that is left.
  std::vector<Vector> candidates{clamped};
  std::vector<bool> active(static_cast<std::size_t>(m), false);
  Vector s = exact;
  for (Eigen::Index round = 0; round < m; ++round) {
    bool changed = false;
    for (Eigen::Index i = 0; i < m; ++i) {
      if (!active[static_cast<std::size_t>(i)] && (s(i) < lower_rel(i) || s(i) > upper_rel(i))) {
        active[static_cast<std::size_t>(i)] = true;
        changed = true;
      }
    }
    if (!changed) break;
    s = detail::clamp_box(s, lower_rel, upper_rel);
    Vector fixed_part = Vector::Zero(m);
    std::vector<Eigen::Index> free_idx;
    for (Eigen::Index i = 0; i < m; ++i) {
      if (active[static_cast<std::size_t>(i)]) {
        fixed_part(i) = s(i);
      } else {
        free_idx.push_back(i);
      }
    }
    const double rem2 = radius * radius - fixed_part.squaredNorm();
    if (free_idx.empty() || rem2 <= 0.0) {
      s = fixed_part;
      break;
    }
    const auto nf = static_cast<Eigen::Index>(free_idx.size());
    const Vector g_full = g + h * fixed_part;
    Vector gf(nf);
    Matrix hf(nf, nf);
    for (Eigen::Index a = 0; a < nf; ++a) {
      const auto ia = free_idx[static_cast<std::size_t>(a)];
      gf(a) = g_full(ia);
      for (Eigen::Index b = 0; b < nf; ++b) hf(a, b) = h(ia, free_idx[static_cast<std::size_t>(b)]);
    }
    const Vector sf = detail::trust_region_ball(gf, hf, std::sqrt(rem2));
    s = fixed_part;
    for (Eigen::Index a = 0; a < nf; ++a) s(free_idx[static_cast<std::size_t>(a)]) = sf(a);
    candidates.push_back(detail::clamp_box(s, lower_rel, upper_rel));
  }
  candidates.push_back(detail::clamp_box(s, lower_rel, upper_rel));
  if (m <= kMaxFaceEnumerationDim) {
    for (const Vector& c : detail::face_candidates(g, h, radius, lower_rel, upper_rel)) {
      candidates.push_back(c);
    }
  }
  // Backtracking along the projected arc of the exact ball step.
  for (double alpha = 0.5; alpha > 1e-9; alpha *= 0.5) {
    candidates.push_back(detail::clamp_box(alpha * exact, lower_rel, upper_rel));
  }
  // Projected Cauchy step.
  const double g_norm = g.norm();
  if (g_norm > 0.0) {
    const double curv = g.dot(h * g);
    double t = radius / g_norm;
    if (curv > 0.0) t = std::min(t, g_norm * g_norm / curv);
    candidates.push_back(detail::clamp_box(-t * g, lower_rel, upper_rel));
  }

  Vector best = Vector::Zero(m);
  double best_change = 0.0;
  for (const Vector& c : candidates) {
    if (c.norm() > radius * (1.0 + 1e-12)) continue;
    const double ch = model.change(c);
    if (ch < best_change) {
      best_change = ch;
      best = c;
    }
  }
  return best;
}

inline Vector solve_tr_subproblem(const GNModel& model, double radius) {
  const double inf = std::numeric_limits<double>::infinity();
  const Eigen::Index m = model.gradient.size();
  return solve_tr_subproblem(model, radius, Vector::Constant(m, -inf), Vector::Constant(m, inf));
}

// ---------------------------------------------------------------------------
// Acceptance and set update

struct TrustRegionParams {
  double eta1 = 0.1;
  double eta2 = 0.7;
  double gamma_dec = 0.5;
  double gamma_inc = 2.0;
  double delta_max = 1e3;
};

struct TrustRegionState {
  HyperPoint iterate;
  double radius = 0.1;
  double radius_min = 1e-5;
  std::size_t eval_budget = 80;
  std::size_t eval_count = 0;
  double c_accuracy = 100.0;
  TrustRegionParams params;
};

struct AcceptanceResult {
  double rho;
  bool accepted;
  double new_radius;
};

inline AcceptanceResult acceptance_step(const TrustRegionState& state, double f_base,
                                        double f_trial, double model_decrease) {
  if (!(model_decrease > 0.0)) {
    throw InvalidStep("acceptance_step: model decrease must be positive");
  }
  const auto& p = state.params;
  const double rho = (f_base - f_trial) / model_decrease;
  double radius = state.radius;
  if (rho >= p.eta2) {
    radius = std::min(p.gamma_inc * state.radius, p.delta_max);
  } else if (rho < p.eta1) {
    radius = p.gamma_dec * state.radius;
  }
  return {rho, rho >= p.eta1, radius};
}

/// Replace the point farthest from the new iterate (lowest index on ties) by
/// `evaluation`. The new iterate is `evaluation` when accepted, otherwise the
/// current base, which is never replaced.
inline std::size_t replace_farthest(InterpolationSet& set, PointEvaluation evaluation,
                                    bool accepted) {
  const Vector& center = accepted ? evaluation.point.theta : set.base().point.theta;
  std::size_t target = set.points.size();
  double farthest = -1.0;
  for (std::size_t i = 0; i < set.points.size(); ++i) {
    if (!accepted && i == set.base_index) continue;
    const double dist = (set.points[i].point.theta - center).norm();
    if (dist > farthest) {
      farthest = dist;
      target = i;
    }
  }
  set.points[target] = std::move(evaluation);
  if (accepted) set.base_index = target;
  return target;
}

struct SetUpdate {
  InterpolationSet set;
  std::size_t replaced_index;
  bool degenerate;
};

inline SetUpdate update_interpolation_set(InterpolationSet set, PointEvaluation evaluation,
                                          bool accepted, double max_condition = 1e8) {
  const std::size_t idx = replace_farthest(set, std::move(evaluation), accepted);
  const bool degenerate = set.degenerate(max_condition);
  return {std::move(set), idx, degenerate};
}

/// Points start and start + radius*e_i; an offset that leaves the box is
/// flipped to -radius.
inline std::vector<HyperPoint> initial_points(const HyperPoint& start, double radius) {
  start.validate();
  std::vector<HyperPoint> pts{start};
  for (Eigen::Index i = 0; i < start.size(); ++i) {
    Vector t = start.theta;
    t(i) += radius;
    if (t(i) > start.upper(i)) {
      t(i) = start.theta(i) - radius;
      if (t(i) < start.lower(i)) {
        throw InfeasibleGeometry("initial_points: box is narrower than the radius in coordinate " +
                                 std::to_string(i));
      }
    }
    pts.push_back(start.with_theta(t));
  }
  return pts;
}

template <UpperLevelProblem U>
InterpolationSet init_interpolation_set(const U& upper, const HyperPoint& start, double radius,
                                        const Accuracy& accuracy, EvalCache& cache) {
  InterpolationSet set;
  for (const HyperPoint& p : initial_points(start, radius)) {
    set.points.push_back(evaluate_point(upper, p, accuracy, cache));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Run log

enum class StepType { initial, trial_accepted, trial_rejected, geometry, re_evaluation };

inline const char* to_string(StepType t) {
  switch (t) {
    case StepType::initial: return "initial";
    case StepType::trial_accepted: return "trial_accepted";
    case StepType::trial_rejected: return "trial_rejected";
    case StepType::geometry: return "geometry";
    case StepType::re_evaluation: return "re_evaluation";
  }
  return "unknown";
}

inline StepType step_type_from_string(const std::string& s) {
  for (StepType t : {StepType::initial, StepType::trial_accepted, StepType::trial_rejected,
                     StepType::geometry, StepType::re_evaluation}) {
    if (s == to_string(t)) return t;
  }
  throw ConfigError("unknown step type '" + s + "'");
}

struct RunLogRecord {
  std::size_t eval_index;
  Vector theta;
  double objective;
  bool certified;
  std::size_t cum_fista_iters;
  double delta;
  StepType step_type;
};

struct RunLog {
  std::vector<RunLogRecord> records;
};

/// Role of an evaluation when the solver consumed it.
enum class ConsumeRole { model, acceptance_base, acceptance_trial };

/// Audit record: an evaluation used by the model or the acceptance test,
/// together with the radius and accuracy demand in force at that moment.
struct ConsumedEvaluation {
  std::size_t iteration;
  ConsumeRole role;
  Vector theta;
  double radius;
  double demanded_epsilon;  // infinity in fixed-accuracy mode
  std::vector<std::optional<double>> certificates;
  std::vector<Vector> weights;  // filled only when recording weights
  double objective = 0.0;       // F value the solver used
  bool accepted = false;        // acceptance roles: the trial was accepted
};

// ---------------------------------------------------------------------------
// Solver

enum class AccuracyMode { dynamic, fixed };

struct SolverConfig {
  double delta0 = 0.1;
  double delta_min = 1e-5;
  TrustRegionParams params;
  double c = 100.0;
  double eps_max = 1e2;
  std::size_t eval_budget = 80;
  AccuracyMode mode = AccuracyMode::dynamic;
  std::size_t fixed_K = 200;
  Vector theta0 = Vector::Constant(2, 1.0);
  Vector bounds_lo = Vector::Constant(2, -8.0);
  Vector bounds_hi = Vector::Constant(2, 8.0);
  std::uint64_t seed = 0;

  /// When positive (dynamic mode), the base and trial evaluations of the
  /// acceptance test are tightened until their certified objective errors sum
  /// to at most this fraction of the predicted decrease. 0 applies only the
  /// radius rule. Requires a problem that models ResidualLipschitz.
  double acceptance_fraction = 0.0;
  /// Number of 100-fold tightenings tried for the acceptance rule.
  std::size_t acceptance_max_tightenings = 8;

  double max_condition = 1e8;
  std::size_t fista_max_iterations = 1'000'000;
  bool certify_fixed = false;    // compute certificates in fixed mode (analysis only)
  bool audit_model = false;      // throw when interpolation is not exact to 1e-9
  bool record_consumption = true;
  bool record_weights = false;

  void validate() const {
    const auto m = theta0.size();
    if (m < 1 || bounds_lo.size() != m || bounds_hi.size() != m) {
      throw ConfigError("solver config: theta0 and bounds must have the same positive length");
    }
    if ((bounds_lo.array() > bounds_hi.array()).any()) {
      throw ConfigError("solver config: bounds_lo exceeds bounds_hi");
    }
    if ((theta0.array() < bounds_lo.array()).any() || (theta0.array() > bounds_hi.array()).any()) {
      throw ConfigError("solver config: theta0 lies outside the bounds");
    }
    if (!(delta_min > 0.0) || !(delta0 >= delta_min) || !(params.delta_max >= delta0)) {
      throw ConfigError("solver config: need 0 < delta_min <= delta0 <= delta_max");
    }
    if (!(params.eta1 > 0.0) || !(params.eta2 >= params.eta1) || !(params.eta2 < 1.0)) {
      throw ConfigError("solver config: need 0 < eta1 <= eta2 < 1");
    }
    if (!(params.gamma_dec > 0.0 && params.gamma_dec < 1.0) || !(params.gamma_inc > 1.0)) {
      throw ConfigError("solver config: need 0 < gamma_dec < 1 < gamma_inc");
    }
    if (!(c > 0.0) || !(eps_max > 0.0)) throw ConfigError("solver config: c and eps_max must be positive");
    if (!(acceptance_fraction >= 0.0 && acceptance_fraction < 1.0)) {
      throw ConfigError("solver config: acceptance_fraction must lie in [0, 1)");
    }
    if (eval_budget < static_cast<std::size_t>(m) + 1) {
      throw ConfigError("solver config: eval_budget must cover the initial m+1 points");
    }
    if (mode == AccuracyMode::fixed && fixed_K == 0) {
      throw ConfigError("solver config: fixed_K must be positive");
    }
  }
};

enum class StopReason { budget, radius };

struct SolverResult {
  HyperPoint final_point;
  double final_objective = 0.0;
  RunLog log;
  std::vector<ConsumedEvaluation> consumed;
  std::size_t eval_count = 0;
  std::size_t cum_fista_iters = 0;
  std::size_t iterations = 0;
  double max_interpolation_error = 0.0;
  StopReason reason = StopReason::budget;
  EvalCache cache;
};

/// A solver failure with the run log collected up to that point.
class SolverFailure : public SolverError {
 public:
  SolverFailure(const std::string& what, RunLog log)
      : SolverError(what), log_(std::move(log)) {}
  const RunLog& log() const noexcept { return log_; }

 private:
  RunLog log_;
};

namespace detail {

template <UpperLevelProblem U>
class TrustRegionRun {
 public:
  TrustRegionRun(const U& upper, const SolverConfig& cfg) : upper_(upper), cfg_(cfg) {}

  SolverResult run() {
    const HyperPoint start(cfg_.theta0, cfg_.bounds_lo, cfg_.bounds_hi);
    radius_ = cfg_.delta0;
    for (const HyperPoint& p : initial_points(start, radius_)) {
      set_.points.push_back(evaluate(p, StepType::initial));
    }
    set_.base_index = 0;

    while (true) {
      if (radius_ <= cfg_.delta_min) {
        result_.reason = StopReason::radius;
        break;
      }
      if (result_.eval_count >= cfg_.eval_budget) {
        result_.reason = StopReason::budget;
        break;
      }
      if (set_.degenerate(cfg_.max_condition)) {
        if (!repair_geometry()) break;
        if (set_.degenerate(cfg_.max_condition)) {
          throw DegenerateGeometry("geometry repair failed to restore an affinely independent set");
        }
        continue;
      }
      refresh_stale();
      ++result_.iterations;

      const GNModel model = build_model(set_, cfg_.max_condition);
      const double interp_err = interpolation_error(model, set_);
      result_.max_interpolation_error = std::max(result_.max_interpolation_error, interp_err);
      if (cfg_.audit_model && !(interp_err <= 1e-9)) {
        throw SolverError("model audit: interpolation mismatch " + std::to_string(interp_err));
      }
      for (const auto& p : set_.points) consume(p, ConsumeRole::model);

      const HyperPoint& base = set_.base().point;
      const Vector step = solve_tr_subproblem(model, radius_, base.lower - base.theta,
                                              base.upper - base.theta);
      const double predicted = model.predicted_decrease(step);
      if (step.norm() == 0.0 || !(predicted > 0.0)) {
        // Model is stationary at this radius.
        radius_ *= cfg_.params.gamma_dec;
        continue;
      }

      Vector trial_theta = (base.theta + step).cwiseMax(base.lower).cwiseMin(base.upper);
      PointEvaluation trial = evaluate(base.with_theta(trial_theta), StepType::trial_rejected);
      const std::size_t trial_record = result_.log.records.size() - 1;
      tighten_for_acceptance(trial, predicted);
      consume(set_.base(), ConsumeRole::acceptance_base);
      consume(trial, ConsumeRole::acceptance_trial);

      TrustRegionState state;
      state.radius = radius_;
      state.params = cfg_.params;
      const AcceptanceResult acc =
          acceptance_step(state, set_.base().objective(), trial.objective(), predicted);
      if (acc.accepted) {
        result_.log.records[trial_record].step_type = StepType::trial_accepted;
        if (cfg_.record_consumption) {
          const std::size_t n = result_.consumed.size();
          result_.consumed[n - 2].accepted = true;
          result_.consumed[n - 1].accepted = true;
        }
      }
      radius_ = acc.new_radius;

      replace_farthest(set_, std::move(trial), acc.accepted);
    }

    result_.final_point = set_.base().point;
    result_.final_objective = set_.base().objective();
    result_.cache = std::move(cache_);
    return std::move(result_);
  }

  const RunLog& log() const { return result_.log; }

 private:
  Accuracy demand() const {
    if (cfg_.mode == AccuracyMode::fixed) return Fixed{cfg_.fixed_K, cfg_.certify_fixed};
    return Certified{required_accuracy(radius_, cfg_.c, cfg_.eps_max)};
  }

  double demanded_epsilon() const {
    if (cfg_.mode == AccuracyMode::fixed) return std::numeric_limits<double>::infinity();
    return required_accuracy(radius_, cfg_.c, cfg_.eps_max);
  }

  PointEvaluation evaluate(const HyperPoint& point, StepType type) {
    return evaluate(point, type, demand());
  }

  PointEvaluation evaluate(const HyperPoint& point, StepType type, const Accuracy& accuracy) {
    PointEvaluation ev = evaluate_point(upper_, point, accuracy, cache_, cfg_.fista_max_iterations);
    if (type != StepType::re_evaluation) ++result_.eval_count;
    result_.cum_fista_iters += ev.fista_iterations;
    const bool certified = cfg_.mode == AccuracyMode::dynamic && ev.meets(demanded_epsilon());
    result_.log.records.push_back(RunLogRecord{result_.eval_count, point.theta, ev.objective(),
                                               certified, result_.cum_fista_iters, radius_, type});
    return ev;
  }

  void consume(const PointEvaluation& ev, ConsumeRole role) {
    if (!cfg_.record_consumption) return;
    ConsumedEvaluation c{result_.iterations, role, ev.point.theta, radius_, demanded_epsilon(),
                         ev.certificates, {}, ev.objective()};
    if (cfg_.record_weights) c.weights = ev.weights;
    result_.consumed.push_back(std::move(c));
  }

  /// Optional stricter accuracy for the acceptance test: re-solve base and
  /// trial (warm) with 100-fold tighter targets until their certified
  /// objective errors are small against the predicted decrease.
  void tighten_for_acceptance(PointEvaluation& trial, double predicted) {
    if (cfg_.mode != AccuracyMode::dynamic || cfg_.acceptance_fraction <= 0.0) return;
    if constexpr (ResidualLipschitz<U>) {
      const double allowed = cfg_.acceptance_fraction * predicted;
      auto error = [&](const PointEvaluation& ev) {
        return objective_error_bound(upper_, ev.certificates, ev.residuals);
      };
      double eps = demanded_epsilon();
      for (std::size_t round = 0; round < cfg_.acceptance_max_tightenings; ++round) {
        PointEvaluation& base = set_.points[set_.base_index];
        if (error(base) + error(trial) <= allowed) return;
        eps /= 100.0;
        if (!base.meets(eps)) base = evaluate(base.point, StepType::re_evaluation, Certified{eps});
        if (!trial.meets(eps)) trial = evaluate(trial.point, StepType::re_evaluation, Certified{eps});
      }
    } else {
      throw ConfigError("acceptance_fraction needs a problem with residual_lipschitz()");
    }
  }

  /// Re-solve interpolation points whose certificates are looser than the
  /// current demand (dynamic mode only). Warm started from the cache.
  void refresh_stale() {
    if (cfg_.mode != AccuracyMode::dynamic) return;
    const double eps = demanded_epsilon();
    for (auto& p : set_.points) {
      if (!p.meets(eps)) p = evaluate(p.point, StepType::re_evaluation);
    }
  }

  /// Move points until the direction matrix is well conditioned. Returns
  /// false when the budget ran out first.
  bool repair_geometry() {
    const Eigen::Index m = set_.dimension();
    std::vector<bool> repaired(set_.points.size(), false);
    repaired[set_.base_index] = true;
    for (Eigen::Index round = 0; round < m; ++round) {
      if (!set_.degenerate(cfg_.max_condition)) return true;
      if (result_.eval_count >= cfg_.eval_budget) {
        result_.reason = StopReason::budget;
        return false;
      }
      const Vector& base = set_.base().point.theta;
      std::size_t target = set_.points.size();
      double farthest = -1.0;
      for (std::size_t i = 0; i < set_.points.size(); ++i) {
        if (repaired[i]) continue;
        const double dist = (set_.points[i].point.theta - base).norm();
        if (dist > farthest) {
          farthest = dist;
          target = i;
        }
      }
      if (target == set_.points.size()) break;

      // Unit vector orthogonal to the remaining directions.
      Matrix others(m, 0);
      for (std::size_t i = 0; i < set_.points.size(); ++i) {
        if (i == set_.base_index || i == target) continue;
        others.conservativeResize(m, others.cols() + 1);
        others.col(others.cols() - 1) = set_.points[i].point.theta - base;
      }
      Vector v = Vector::Unit(m, 0);
      if (others.cols() > 0) {
        Eigen::JacobiSVD<Matrix> svd(others, Eigen::ComputeFullU);
        // Last left singular vector: orthogonal to the span, or to its
        // dominant part when the directions are dependent.
        v = svd.matrixU().col(m - 1);
      }
      const HyperPoint& bp = set_.base().point;
      Vector candidate = base + radius_ * v;
      if ((candidate.array() > bp.upper.array()).any() ||
          (candidate.array() < bp.lower.array()).any()) {
        candidate = base - radius_ * v;
      }
      candidate = candidate.cwiseMax(bp.lower).cwiseMin(bp.upper);
      if ((candidate - base).norm() == 0.0) {
        throw InfeasibleGeometry("geometry repair: box leaves no room around the iterate");
      }
      set_.points[target] = evaluate(bp.with_theta(candidate), StepType::geometry);
      repaired[target] = true;
    }
    return true;
  }

  const U& upper_;
  const SolverConfig& cfg_;
  double radius_ = 0.0;
  InterpolationSet set_;
  EvalCache cache_;
  SolverResult result_;
};

}  // namespace detail

/// Run the trust-region loop until the evaluation budget is spent or the
/// radius falls to delta_min. Any solver error is rethrown as SolverFailure
/// carrying the log collected so far.
template <UpperLevelProblem U>
SolverResult run_solver(const U& upper, const SolverConfig& cfg) {
  cfg.validate();
  detail::TrustRegionRun<U> run(upper, cfg);
  try {
    return run.run();
  } catch (const SolverFailure&) {
    throw;
  } catch (const SolverError& e) {
    throw SolverFailure(e.what(), run.log());
  }
}

}  // namespace bilevel
