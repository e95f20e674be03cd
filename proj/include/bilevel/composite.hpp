#pragma once

// Strongly convex FISTA for composite problems min_w f(w) + g(w), with
// a posteriori accuracy certificates from a subgradient of the objective.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <variant>

#include <Eigen/Dense>

#include "bilevel/errors.hpp"

namespace bilevel {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// A lower-level problem: f smooth, mu-strongly convex with L-Lipschitz
/// gradient; g convex with a computable proximal map.
///
///   dim()            number of weights d
///   smooth(w, grad)  returns f(w) and writes grad f(w)
///   prox(v, step)    argmin_u step*g(u) + 0.5*|u - v|^2
///   nonsmooth(w)     g(w)
///   mu(), lipschitz()
template <class P>
concept CompositeProblem = requires(const P& p, const Vector& w, Vector& grad, double step) {
  { p.dim() } -> std::convertible_to<Eigen::Index>;
  { p.smooth(w, grad) } -> std::convertible_to<double>;
  { p.prox(w, step) } -> std::convertible_to<Vector>;
  { p.nonsmooth(w) } -> std::convertible_to<double>;
  { p.mu() } -> std::convertible_to<double>;
  { p.lipschitz() } -> std::convertible_to<double>;
};

/// Soft thresholding, the proximal map of threshold*|.|_1.
inline Vector prox_l1(const Vector& v, double threshold) {
  if (!(threshold >= 0.0)) throw ConfigError("prox_l1: threshold must be nonnegative");
  return v.array().sign() * (v.array().abs() - threshold).max(0.0);
}

/// Largest q accepted by the momentum recursion; q = 1 (mu = L) would divide by zero.
inline constexpr double kMaxMomentumQ = 1.0 - 1e-12;

struct MomentumState {
  double t = 0.0;
  double q = 0.0;
  double tau = 0.0;
  Vector w_prev;
  Vector w_curr;

  /// t_0 = 0, w^{-1} = w^0, tau = 1/L, q = min(tau*mu, 1 - 1e-12).
  static MomentumState init(const Vector& w0, double mu, double lipschitz) {
    MomentumState s;
    s.tau = 1.0 / lipschitz;
    s.q = std::min(s.tau * mu, kMaxMomentumQ);
    s.w_prev = w0;
    s.w_curr = w0;
    return s;
  }
};

/// One step of the strongly convex momentum recursion. Returns (t_{k+1}, beta_{k+1}).
inline std::pair<double, double> momentum_step(const MomentumState& state) {
  const double q = state.q;
  const double t = state.t;
  if (!(q >= 0.0) || q >= 1.0) {
    throw InvalidConditioning("momentum_step: q = tau*mu must lie in [0, 1), got " +
                              std::to_string(q));
  }
  const double a = 1.0 - q * t * t;
  const double root = std::sqrt(a * a + 4.0 * t * t);
  // Positive root of x^2 - a x - t^2 = 0; the second form avoids cancellation for a < 0.
  const double t_next = a >= 0.0 ? 0.5 * (a + root) : (2.0 * t * t) / (root - a);
  const double beta_next = ((t - 1.0) * (1.0 - t_next * q)) / (t_next * (1.0 - q));
  return {t_next, beta_next};
}

struct TargetAccuracy {
  double epsilon;
};

struct FixedIterations {
  std::size_t count;
};

/// When to stop FISTA. Certificates are computed every `certificate_interval`
/// iterations and always at the last iteration; in FixedIterations mode only
/// when `certify` is set.
struct Termination {
  std::variant<TargetAccuracy, FixedIterations> mode;
  std::size_t max_iterations = 1'000'000;
  std::size_t certificate_interval = 1;
  bool certify = true;

  static Termination target(double epsilon, std::size_t max_iterations = 1'000'000) {
    return Termination{TargetAccuracy{epsilon}, max_iterations, 1, true};
  }
  static Termination fixed(std::size_t count, bool certify = false) {
    return Termination{FixedIterations{count}, count, 1, certify};
  }
};

struct LowerSolution {
  Vector w;
  /// Certified upper bound on |w - w_hat|^2; present when computed for the returned w.
  std::optional<double> certificate;
  std::size_t iterations = 0;
  std::optional<double> subgradient_norm;
  double objective = 0.0;
};

struct Certificate {
  Vector d;      // element of the subdifferential at w_next
  double bound;  // |d|^2 / mu^2
};

/// Subgradient of f + g at w_next = prox(z_next - tau*grad_at_z, tau):
///   d = grad f(w_next) - grad_at_z + (z_next - w_next)/tau.
/// Strong convexity then gives |w_next - w_hat|^2 <= |d|^2/mu^2.
template <CompositeProblem P>
Certificate subgradient_certificate(const P& problem, const Vector& w_next, const Vector& z_next,
                                    const Vector& grad_at_z) {
  Vector grad_w(problem.dim());
  problem.smooth(w_next, grad_w);
  const double tau = 1.0 / problem.lipschitz();
  Certificate c;
  c.d = grad_w - grad_at_z + (z_next - w_next) / tau;
  const double mu = problem.mu();
  c.bound = c.d.squaredNorm() / (mu * mu);
  return c;
}

template <CompositeProblem P>
double composite_objective(const P& problem, const Vector& w) {
  Vector grad(problem.dim());
  return problem.smooth(w, grad) + problem.nonsmooth(w);
}

/// Per-iteration view handed to a FISTA observer. `w` is the new iterate w^k.
struct IterationInfo {
  std::size_t iteration;
  const Vector& w;
  std::optional<double> certificate;
};

using FistaObserver = std::function<void(const IterationInfo&)>;

/// Observer writing `iter,objective,certificate` rows (17 significant digits;
/// empty certificate field when none was computed). Writes the header at once.
template <CompositeProblem P>
FistaObserver csv_trace(const P& problem, std::ostream& out) {
  out << "iter,objective,certificate\n";
  return [&problem, &out](const IterationInfo& info) {
    out << info.iteration << ',' << std::setprecision(17) << composite_objective(problem, info.w)
        << ',';
    if (info.certificate) out << *info.certificate;
    out << '\n';
  };
}

/// Continue strongly convex FISTA from `state` (step 1/L), updating it in
/// place, so that a later call resumes the identical iteration sequence.
/// Iterations are counted from 1 within this call.
///
/// TargetAccuracy stops at the first certificate <= epsilon and throws
/// AccuracyUnreachable when max_iterations is reached first. FixedIterations
/// runs exactly `count` iterations.
template <CompositeProblem P>
LowerSolution fista_continue(const P& problem, MomentumState& state,
                             const Termination& termination, const FistaObserver& observer = {}) {
  const double mu = problem.mu();
  const double lipschitz = problem.lipschitz();
  if (!(mu > 0.0) || !(lipschitz >= mu)) {
    throw InvalidConditioning("fista_solve: need lipschitz >= mu > 0");
  }
  if (state.w_curr.size() != problem.dim() || state.w_prev.size() != problem.dim()) {
    throw SizeError("fista_solve: starting point has the wrong dimension");
  }
  if (state.tau != 1.0 / lipschitz) {
    throw ConfigError("fista_solve: momentum state belongs to a different problem");
  }
  if (!state.w_curr.allFinite() || !state.w_prev.allFinite()) {
    throw Divergence("fista_solve: non-finite starting point", 0);
  }
  if (termination.certificate_interval == 0) {
    throw ConfigError("fista_solve: certificate_interval must be positive");
  }

  const auto* target = std::get_if<TargetAccuracy>(&termination.mode);
  const auto* fixed = std::get_if<FixedIterations>(&termination.mode);
  const std::size_t last = target ? termination.max_iterations : fixed->count;
  const bool certify = target != nullptr || termination.certify;
  if (target && !(target->epsilon > 0.0)) {
    throw ConfigError("fista_solve: target accuracy must be positive");
  }

  const double tau = state.tau;
  Vector z(problem.dim());
  Vector grad_z(problem.dim());
  Vector w_next;

  LowerSolution out;
  double best_certificate = std::numeric_limits<double>::infinity();

  for (std::size_t k = 0; k < last; ++k) {
    const auto [t_next, beta] = momentum_step(state);
    z = state.w_curr + beta * (state.w_curr - state.w_prev);
    problem.smooth(z, grad_z);
    w_next = problem.prox(z - tau * grad_z, tau);
    const std::size_t iteration = k + 1;
    if (!w_next.allFinite()) {
      throw Divergence("fista_solve: non-finite iterate at iteration " +
                       std::to_string(iteration), iteration);
    }

    std::optional<double> certificate;
    std::optional<double> d_norm;
    if (certify && (iteration % termination.certificate_interval == 0 || iteration == last)) {
      const Certificate c = subgradient_certificate(problem, w_next, z, grad_z);
      certificate = c.bound;
      d_norm = c.d.norm();
      best_certificate = std::min(best_certificate, c.bound);
    }

    state.t = t_next;
    state.w_prev.swap(state.w_curr);
    state.w_curr.swap(w_next);
    if (observer) observer(IterationInfo{iteration, state.w_curr, certificate});

    if (target && certificate && *certificate <= target->epsilon) {
      out.w = state.w_curr;
      out.certificate = certificate;
      out.subgradient_norm = d_norm;
      out.iterations = iteration;
      out.objective = composite_objective(problem, out.w);
      return out;
    }
    if (iteration == last) {
      out.certificate = certificate;
      out.subgradient_norm = d_norm;
    }
  }

  if (target) {
    throw AccuracyUnreachable("fista_solve: iteration cap " + std::to_string(last) +
                                  " reached before the certificate met the target",
                              best_certificate);
  }
  out.w = state.w_curr;
  out.iterations = last;
  out.objective = composite_objective(problem, out.w);
  return out;
}

/// Strongly convex FISTA with step 1/L, t_0 = 0 and w^{-1} = w^0.
template <CompositeProblem P>
LowerSolution fista_solve(const P& problem, const Vector& w0, const Termination& termination,
                          const FistaObserver& observer = {}) {
  if (w0.size() != problem.dim()) throw SizeError("fista_solve: w0 has the wrong dimension");
  MomentumState state = MomentumState::init(w0, problem.mu(), problem.lipschitz());
  return fista_continue(problem, state, termination, observer);
}

/// Right-hand side of the linear-rate estimate
///   |w^k - w_hat|^2 <= (1 - kappa^{-1/2})^k * kappa * (1 + kappa^{-1/2}) * |w^0 - w_hat|^2.
inline double apriori_bound(double kappa, double init_dist_sq, std::size_t k) {
  const double r = 1.0 / std::sqrt(kappa);
  return std::pow(1.0 - r, static_cast<double>(k)) * kappa * (1.0 + r) * init_dist_sq;
}

/// Smallest k at which apriori_bound(kappa, init_dist_sq, k) <= epsilon.
inline std::size_t apriori_iterations(double kappa, double init_dist_sq, double epsilon) {
  if (!(kappa > 1.0)) {
    throw DegenerateRate("apriori_iterations: kappa must exceed 1, got " + std::to_string(kappa));
  }
  if (!(epsilon > 0.0) || !(init_dist_sq >= 0.0)) {
    throw ConfigError("apriori_iterations: need epsilon > 0 and init_dist_sq >= 0");
  }
  if (apriori_bound(kappa, init_dist_sq, 0) <= epsilon) return 0;
  const double r = 1.0 / std::sqrt(kappa);
  const double head = kappa * (1.0 + r) * init_dist_sq;
  auto k = static_cast<std::size_t>(
      std::max(0.0, std::ceil(std::log(epsilon / head) / std::log1p(-r))));
  while (apriori_bound(kappa, init_dist_sq, k) > epsilon) ++k;
  while (k > 0 && apriori_bound(kappa, init_dist_sq, k - 1) <= epsilon) --k;
  return k;
}

/// Plain proximal gradient (ISTA) with step 1/L, used as a high-accuracy
/// reference solve.
template <CompositeProblem P>
Vector proximal_gradient_solve(const P& problem, const Vector& w0, std::size_t iterations) {
  const double tau = 1.0 / problem.lipschitz();
  Vector w = w0;
  Vector grad(problem.dim());
  for (std::size_t k = 0; k < iterations; ++k) {
    problem.smooth(w, grad);
    w = problem.prox(w - tau * grad, tau);
  }
  if (!w.allFinite()) throw Divergence("proximal_gradient_solve: non-finite iterate", iterations);
  return w;
}

}  // namespace bilevel
