#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "bilevel/composite.hpp"
#include "bilevel/problems.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace bilevel;
using testutil::to_eigen;
using testutil::to_std;

namespace {

MomentumState state_with(double t, double q) {
  MomentumState s;
  s.t = t;
  s.q = q;
  s.tau = 1.0;
  return s;
}

LassoProblem small_lasso(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double l2,
                         double l1) {
  Matrix a = testutil::random_matrix(rng, rows, cols);
  Vector b = testutil::random_vector(rng, rows);
  return lasso_problem(a, b, HyperPoint::unbounded(Vector{{l2, l1}}));
}

Vector oracle_solution(const LassoProblem& p, std::size_t iterations) {
  return to_eigen(oracle::lasso_ista(to_std(p.a()), to_std(p.b()), p.l2_weight(), p.l1_weight(),
                                     p.lipschitz(), oracle::Vec(p.dim(), 0.0), iterations));
}

}  // namespace

TEST(MomentumStep, FirstStepFromZero) {
  const auto [t, beta] = momentum_step(state_with(0.0, 0.5));
  EXPECT_DOUBLE_EQ(t, 1.0);
  EXPECT_DOUBLE_EQ(beta, -1.0);
}

TEST(MomentumStep, ClassicalRuleWhenQIsZero) {
  const auto [t, beta] = momentum_step(state_with(1.0, 0.0));
  EXPECT_NEAR(t, (1.0 + std::sqrt(5.0)) / 2.0, 1e-15);
  EXPECT_EQ(beta, 0.0);
}

TEST(MomentumStep, MatchesLongDoubleOracle) {
  long double t_ref = 0;
  long double beta_ref = 0;
  oracle::momentum(1.0L, 0.25L, t_ref, beta_ref);
  const auto [t, beta] = momentum_step(state_with(1.0, 0.25));
  EXPECT_NEAR(t, static_cast<double>(t_ref), 1e-15);
  EXPECT_NEAR(t, (0.75 + std::sqrt(0.5625 + 4.0)) / 2.0, 1e-15);
  EXPECT_NEAR(beta, static_cast<double>(beta_ref), 1e-15);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ut(0.0, 50.0);
  std::uniform_real_distribution<double> uq(0.0, 0.999);
  for (int i = 0; i < 200; ++i) {
    const double tt = ut(rng);
    const double qq = uq(rng);
    oracle::momentum(tt, qq, t_ref, beta_ref);
    const auto [tn, bn] = momentum_step(state_with(tt, qq));
    EXPECT_GT(tn, 0.0);
    EXPECT_NEAR(tn, static_cast<double>(t_ref), 1e-12 * std::max(1.0, tn));
    EXPECT_NEAR(bn, static_cast<double>(beta_ref), 1e-10);
  }
}

TEST(MomentumStep, RejectsQAtLeastOne) {
  EXPECT_THROW(momentum_step(state_with(0.0, 1.0)), InvalidConditioning);
  EXPECT_THROW(momentum_step(state_with(0.0, 1.5)), InvalidConditioning);
}

TEST(MomentumState, InitClampsQ) {
  const Vector w0 = Vector::Ones(3);
  const MomentumState s = MomentumState::init(w0, 2.0, 2.0);
  EXPECT_EQ(s.t, 0.0);
  EXPECT_EQ(s.w_prev, s.w_curr);
  EXPECT_LT(s.q, 1.0);
  EXPECT_DOUBLE_EQ(s.tau, 0.5);
  const MomentumState s2 = MomentumState::init(w0, 1.0, 4.0);
  EXPECT_DOUBLE_EQ(s2.q, 0.25);
}

TEST(ProxL1, Examples) {
  const Vector v{{3.0, -1.0, 0.5}};
  EXPECT_EQ(prox_l1(v, 0.0), v);
  EXPECT_EQ(prox_l1(v, 1.0), (Vector{{2.0, 0.0, 0.0}}));
  const double grid = oracle::grid_argmin(
      [](double u) { return 0.2 * std::abs(u) + 0.5 * (u - 0.7) * (u - 0.7); }, -1.0, 1.0, 1e-6);
  EXPECT_NEAR(prox_l1(Vector{{0.7}}, 0.2)(0), 0.5, 1e-15);
  EXPECT_NEAR(grid, 0.5, 2e-6);
  EXPECT_THROW(prox_l1(v, -1.0), ConfigError);
}

TEST(ProxL1, BeatsGridPerturbations) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nv(0.0, 3.0);
  std::uniform_real_distribution<double> ut(0.0, 3.0);
  for (int i = 0; i < 1000; ++i) {
    const double v = nv(rng);
    const double t = ut(rng);
    const double u = prox_l1(Vector{{v}}, t)(0);
    auto obj = [&](double x) { return t * std::abs(x) + 0.5 * (x - v) * (x - v); };
    for (int k = -10; k <= 10; ++k) EXPECT_LE(obj(u), obj(u + 1e-3 * k) + 1e-15);
  }
}

TEST(SubgradientCertificate, ZeroAtExactMinimizer) {
  // f = 0.5|w - a|^2, g = 0: minimizer a.
  const Vector a{{1.0, -2.0, 0.5}};
  const QuadraticProblem p(Matrix::Identity(3, 3), a);
  Vector grad(3);
  p.smooth(a, grad);
  const Certificate c = subgradient_certificate(p, a, a, grad);
  EXPECT_EQ(c.d.norm(), 0.0);
  EXPECT_EQ(c.bound, 0.0);
}

TEST(SubgradientCertificate, OneExactStepOnQuadratic) {
  // f = 0.5|w|^2, tau = 1: w_next = z - z = 0, d = 0 - z + (z - 0) = 0.
  const QuadraticProblem p(Matrix::Identity(2, 2), Vector::Zero(2));
  const Vector z{{0.3, -4.0}};
  Vector gz(2);
  p.smooth(z, gz);
  const Vector w_next = p.prox(z - gz, 1.0);
  EXPECT_EQ(w_next.norm(), 0.0);
  const Certificate c = subgradient_certificate(p, w_next, z, gz);
  EXPECT_EQ(c.bound, 0.0);
}

TEST(SubgradientCertificate, BoundsErrorOnRandomLassoIterates) {
  std::mt19937_64 rng(5);
  const LassoProblem p = small_lasso(rng, 8, 6, 0.5, 0.3);
  const Vector w_hat = oracle_solution(p, 200000);
  std::vector<double> certificates;
  std::vector<double> errors;
  fista_solve(p, Vector::Zero(p.dim()), Termination::fixed(60, true), [&](const IterationInfo& it) {
    ASSERT_TRUE(it.certificate.has_value());
    certificates.push_back(*it.certificate);
    errors.push_back((it.w - w_hat).squaredNorm());
  });
  ASSERT_EQ(certificates.size(), 60u);
  for (std::size_t k = 0; k < certificates.size(); ++k) EXPECT_GE(certificates[k], errors[k]);
}

TEST(FistaSolve, QuadraticWithMuEqualL) {
  const Vector a{{1.0, 2.0, -3.0, 0.25}};
  const QuadraticProblem p(Matrix::Identity(4, 4), a);
  const LowerSolution sol = fista_solve(p, Vector::Constant(4, 10.0), Termination::target(1e-16));
  EXPECT_LE((sol.w - a).norm(), 1e-8);
  ASSERT_TRUE(sol.certificate.has_value());
  EXPECT_LE(*sol.certificate, 1e-16);
}

TEST(FistaSolve, SmallLassoMatchesOracle) {
  std::mt19937_64 rng(7);
  const LassoProblem p = small_lasso(rng, 12, 5, 0.2, 0.4);
  const Vector w_hat = oracle_solution(p, 1'000'000);
  const LowerSolution sol = fista_solve(p, Vector::Zero(5), Termination::target(1e-12));
  EXPECT_LE((sol.w - w_hat).norm(), 1e-5);
  ASSERT_TRUE(sol.certificate.has_value());
  EXPECT_LE(*sol.certificate, 1e-12);
  EXPECT_NEAR(*sol.certificate, std::pow(*sol.subgradient_norm / p.mu(), 2), 1e-15);
  EXPECT_NEAR(sol.objective, composite_objective(p, sol.w), 1e-14);
}

TEST(FistaSolve, FixedIterationsRunsExactlyK) {
  std::mt19937_64 rng(8);
  const LassoProblem p = small_lasso(rng, 10, 4, 0.1, 0.1);
  std::size_t calls = 0;
  const LowerSolution sol =
      fista_solve(p, Vector::Zero(4), Termination::fixed(37), [&](const IterationInfo& it) {
        ++calls;
        EXPECT_FALSE(it.certificate.has_value());
      });
  EXPECT_EQ(sol.iterations, 37u);
  EXPECT_EQ(calls, 37u);
  EXPECT_FALSE(sol.certificate.has_value());
  const LowerSolution certified = fista_solve(p, Vector::Zero(4), Termination::fixed(37, true));
  ASSERT_TRUE(certified.certificate.has_value());
  EXPECT_EQ(certified.w, sol.w);
}

TEST(FistaSolve, CapReachedIsAnError) {
  std::mt19937_64 rng(9);
  const LassoProblem p = small_lasso(rng, 10, 4, 1e-3, 0.1);
  try {
    fista_solve(p, Vector::Zero(4), Termination::target(1e-30, 5));
    FAIL() << "expected AccuracyUnreachable";
  } catch (const AccuracyUnreachable& e) {
    EXPECT_GT(e.best_certificate(), 1e-30);
    EXPECT_TRUE(std::isfinite(e.best_certificate()));
  }
}

TEST(FistaSolve, NonFiniteStartIsDivergence) {
  const QuadraticProblem p(Matrix::Identity(2, 2), Vector::Zero(2));
  Vector w0{{1.0, std::nan("")}};
  EXPECT_THROW(fista_solve(p, w0, Termination::fixed(3)), Divergence);
}

TEST(FistaSolve, CertificateIntervalSkipsIterations) {
  std::mt19937_64 rng(10);
  const LassoProblem p = small_lasso(rng, 10, 4, 0.5, 0.1);
  Termination term = Termination::fixed(25, true);
  term.certificate_interval = 10;
  std::vector<std::size_t> certified_at;
  fista_solve(p, Vector::Zero(4), term, [&](const IterationInfo& it) {
    if (it.certificate) certified_at.push_back(it.iteration);
  });
  EXPECT_EQ(certified_at, (std::vector<std::size_t>{10, 20, 25}));
}

TEST(FistaSolve, Deterministic) {
  std::mt19937_64 rng(12);
  const LassoProblem p = small_lasso(rng, 15, 7, 0.3, 0.2);
  const LowerSolution a = fista_solve(p, Vector::Zero(7), Termination::target(1e-10));
  const LowerSolution b = fista_solve(p, Vector::Zero(7), Termination::target(1e-10));
  EXPECT_EQ(a.w, b.w);
  EXPECT_EQ(a.iterations, b.iterations);
  EXPECT_EQ(*a.certificate, *b.certificate);
  EXPECT_EQ(a.objective, b.objective);
}

TEST(FistaSolve, StrongConvexityGap) {
  std::mt19937_64 rng(13);
  const LassoProblem p = small_lasso(rng, 9, 6, 0.7, 0.25);
  const Vector w_hat = oracle_solution(p, 300000);
  const double phi_hat = composite_objective(p, w_hat);
  fista_solve(p, Vector::Constant(6, 1.0), Termination::fixed(80), [&](const IterationInfo& it) {
    const double gap = composite_objective(p, it.w) - phi_hat;
    EXPECT_GE(gap + 1e-12, 0.5 * p.mu() * (it.w - w_hat).squaredNorm());
  });
}

TEST(FistaSolve, CsvTrace) {
  std::mt19937_64 rng(14);
  const LassoProblem p = small_lasso(rng, 6, 3, 0.5, 0.1);
  std::ostringstream out;
  Termination term = Termination::fixed(4, true);
  term.certificate_interval = 2;
  fista_solve(p, Vector::Zero(3), term, csv_trace(p, out));
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "iter,objective,certificate");
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    const bool has_cert = line.back() != ',';
    EXPECT_EQ(has_cert, rows % 2 == 0) << line;
  }
  EXPECT_EQ(rows, 4);
}

TEST(AprioriIterations, Examples) {
  EXPECT_EQ(apriori_iterations(5.0, 0.0, 1e-3), 0u);
  EXPECT_EQ(apriori_iterations(4.0, 1.0, 6.0), 0u);
  EXPECT_EQ(apriori_iterations(4.0, 1.0, 5.99), 1u);
  EXPECT_THROW(apriori_iterations(1.0, 1.0, 1.0), DegenerateRate);
}

TEST(AprioriIterations, SmallestSatisfyingK) {
  for (double kappa : {1.5, 10.0, 1960.0}) {
    for (double eps : {1e-2, 1e-6, 1e-12}) {
      const std::size_t k = apriori_iterations(kappa, 3.0, eps);
      EXPECT_LE(apriori_bound(kappa, 3.0, k), eps);
      if (k > 0) EXPECT_GT(apriori_bound(kappa, 3.0, k - 1), eps);
    }
  }
}

TEST(AprioriIterations, PaperRegimeCrossCheck) {
  // kappa = 1960: mu = 10 and |A|^2 + 10 = 1.96e4.
  LassoInstance inst = generate_lasso_instance(0, 100, 200);
  rescale_to_spectral_sq(inst, 1.96e4 - 10.0);
  const LassoProblem p = lasso_problem(inst.a, inst.b, HyperPoint::unbounded(Vector{{10.0, 10.0}}));
  const double kappa = p.lipschitz() / p.mu();
  EXPECT_NEAR(kappa, 1960.0, 1e-3);
  const Vector w_hat = to_eigen(oracle::lasso_ista(to_std(p.a()), to_std(p.b()), 10.0, 10.0,
                                                   p.lipschitz(), to_std(inst.w0), 30000));
  const double d0 = (inst.w0 - w_hat).squaredNorm();
  const std::size_t k = apriori_iterations(kappa, d0, 1e-6);
  EXPECT_GT(k, 0u);
  const LowerSolution sol = fista_solve(p, inst.w0, Termination::fixed(k));
  EXPECT_LE((sol.w - w_hat).squaredNorm(), 1e-6);
}

TEST(ProximalGradient, AgreesWithFista) {
  std::mt19937_64 rng(15);
  const LassoProblem p = small_lasso(rng, 10, 5, 0.5, 0.2);
  const Vector ref = proximal_gradient_solve(p, Vector::Zero(5), 100000);
  const LowerSolution sol = fista_solve(p, Vector::Zero(5), Termination::target(1e-20));
  EXPECT_LE((ref - sol.w).norm(), 1e-9);
}

TEST(FistaContinue, ResumingMatchesSingleSolve) {
  std::mt19937_64 rng(16);
  const LassoProblem p = small_lasso(rng, 12, 6, 0.05, 0.2);
  MomentumState state = MomentumState::init(Vector::Zero(6), p.mu(), p.lipschitz());
  const LowerSolution loose = fista_continue(p, state, Termination::target(1e-4));
  const LowerSolution tight = fista_continue(p, state, Termination::target(1e-12));
  const LowerSolution cold = fista_solve(p, Vector::Zero(6), Termination::target(1e-12));
  EXPECT_EQ(loose.iterations + tight.iterations, cold.iterations);
  EXPECT_EQ(tight.w, cold.w);
  EXPECT_EQ(*tight.certificate, *cold.certificate);
  MomentumState other = MomentumState::init(Vector::Zero(6), 1.0, 2.0 * p.lipschitz());
  EXPECT_THROW(fista_continue(p, other, Termination::fixed(1)), ConfigError);
}
