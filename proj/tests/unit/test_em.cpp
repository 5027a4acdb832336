#include "oslsel/em.hpp"
#include "oslsel/errors.hpp"
#include "oslsel/simulation.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace oslsel {
namespace {

EmConfig quick_config(int starts = 2) {
  EmConfig c;
  c.n_starts = starts;
  return c;
}

Matrix scalar_test_design(std::initializer_list<double> xs) {
  Matrix phi(static_cast<Eigen::Index>(xs.size()), 2);
  Eigen::Index i = 0;
  for (double x : xs) phi.row(i++) << 1.0, x;
  return phi;
}

TEST(EStep, ZeroTiltGivesProportions) {
  Vector pi(2);
  pi << 0.3, 0.5;
  const Theta t{Matrix::Zero(2, 2), pi};
  const Matrix w = e_step(t, scalar_test_design({-1, 0, 4}));
  for (Eigen::Index j = 0; j < 3; ++j) {
    EXPECT_NEAR(w(j, 0), 0.2, 1e-15);
    EXPECT_NEAR(w(j, 1), 0.3, 1e-15);
    EXPECT_NEAR(w(j, 2), 0.5, 1e-15);
  }
}

TEST(EStep, SingleComponent) {
  Vector pi(2);
  pi << 0.0, 1.0;
  Matrix g(2, 2);
  g << 0.5, 1.0, -1.0, 2.0;
  const Matrix w = e_step(Theta{g, pi}, scalar_test_design({-1, 0.3}));
  EXPECT_DOUBLE_EQ(w(0, 2), 1.0);
  EXPECT_DOUBLE_EQ(w(1, 2), 1.0);
}

TEST(EStep, HandArithmetic) {
  Matrix g(1, 2);
  g << std::log(3.0), 0.0;
  const Matrix w = e_step(Theta{g, Vector::Constant(1, 0.5)}, scalar_test_design({1.7}));
  EXPECT_NEAR(w(0, 1), 0.75, 1e-15);
  EXPECT_NEAR(w(0, 0), 0.25, 1e-15);
}

TEST(MStepPi, ColumnMeans) {
  Matrix w(4, 3);
  w.rowwise() = Eigen::RowVector3d(0.2, 0.3, 0.5);
  const Vector pi = m_step_pi(w);
  EXPECT_NEAR(pi(0), 0.3, 1e-15);
  EXPECT_NEAR(pi(1), 0.5, 1e-15);

  Matrix v(2, 3);
  v << 1, 0, 0,
       0, 0, 1;
  const Vector pv = m_step_pi(v);
  EXPECT_DOUBLE_EQ(pv(0), 0.0);
  EXPECT_DOUBLE_EQ(pv(1), 0.5);
}

TEST(MStepPi, SumNeverExceedsOne) {
  RandomStream rng(17, 0);
  for (int rep = 0; rep < 50; ++rep) {
    Matrix w(7, 4);
    for (Eigen::Index j = 0; j < w.rows(); ++j) {
      for (Eigen::Index k = 0; k < w.cols(); ++k) w(j, k) = rng.uniform();
      w.row(j) /= w.row(j).sum();
    }
    EXPECT_LE(m_step_pi(w).sum(), 1.0 + 1e-15);
  }
}

TEST(MStepPiFixed, ProportionalAllocation) {
  Matrix w(3, 4);
  w << 0.1, 0.2, 0.3, 0.4,
       0.5, 0.1, 0.1, 0.3,
       0.2, 0.2, 0.2, 0.4;
  const Vector s = w.colwise().sum().transpose();
  const Vector pi = m_step_pi_fixed(w, 1, 0.3);
  ASSERT_EQ(pi.size(), 3);
  EXPECT_NEAR(pi(0), 0.3, 1e-15);
  const double rest = s(0) + s(2) + s(3);
  EXPECT_NEAR(pi(1), 0.7 * s(2) / rest, 1e-14);
  EXPECT_NEAR(pi(2), 0.7 * s(3) / rest, 1e-14);
  EXPECT_NEAR(1.0 - pi.sum(), 0.7 * s(0) / rest, 1e-14);
}

TEST(MStepPiFixed, MatchesGenericOptimizer) {
  RandomStream rng(23, 0);
  for (int k = 0; k <= 3; ++k) {
    Matrix w(10, 4);
    for (Eigen::Index j = 0; j < w.rows(); ++j) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(j, c) = rng.uniform();
      w.row(j) /= w.row(j).sum();
    }
    const double value = 0.15 + 0.1 * k;
    const Vector s = w.colwise().sum().transpose();
    // Free classes get softmax(u) * (1 - value).
    auto unpack = [&](const Vector& u) {
      Vector full(4);
      double z = 0.0;
      int a = 0;
      for (int c = 0; c < 4; ++c) {
        if (c == k) continue;
        full(c) = std::exp(u(a++));
        z += full(c);
      }
      for (int c = 0; c < 4; ++c) full(c) = c == k ? value : full(c) / z * (1.0 - value);
      return full;
    };
    auto objective = [&](const Vector& u) { return -(s.array() * unpack(u).array().log()).sum(); };
    const Vector oracle = unpack(test::nelder_mead(objective, Vector::Zero(3), 0.5));
    const Vector pi = m_step_pi_fixed(w, k, value);
    EXPECT_NEAR(1.0 - pi.sum(), oracle(0), 1e-6);
    for (int c = 1; c <= 3; ++c) EXPECT_NEAR(pi(c - 1), oracle(c), 1e-6);
  }
}

TEST(MStepPiFixed, RejectsInfeasibleValue) {
  const Matrix w = Matrix::Constant(2, 3, 1.0 / 3.0);
  EXPECT_THROW(m_step_pi_fixed(w, 1, 1.5), ValidationError);
  EXPECT_THROW(m_step_pi_fixed(w, 1, -0.1), ValidationError);
  EXPECT_THROW(m_step_pi_fixed(w, 3, 0.2), ValidationError);
}

TEST(LogitMasses, LiteralFormula) {
  const Matrix phi = scalar_test_design({0.1, 0.2, 0.3, 0.4});
  const Vector u = logit_masses(Matrix::Zero(1, 2), phi);
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(u(i), 1.0 / 8.0);
  const Vector v = logit_masses(Matrix::Zero(2, 2), phi);
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(v(i), 1.0 / 12.0);
  const ElWeights p = m_step_p(Matrix::Zero(2, 2), phi);
  EXPECT_NEAR(p.total(), 1.0, 1e-15);
}

TEST(MStepGamma, MatchesGenericOptimizer) {
  RandomStream rng(31, 0);
  Matrix train(6, 1), test(6, 1);
  std::vector<int> y = {0, 1, 0, 1, 0, 1};
  for (int i = 0; i < 6; ++i) train(i, 0) = rng.normal() + 0.8 * y[static_cast<std::size_t>(i)];
  for (int j = 0; j < 6; ++j) test(j, 0) = rng.normal() - 0.5;
  const ElProblem problem(OslsDataset(train, y, test, 2), BasisSpec::identity(1));
  Matrix w(6, 3);
  for (Eigen::Index j = 0; j < 6; ++j) {
    for (Eigen::Index k = 0; k < 3; ++k) w(j, k) = 0.2 + rng.uniform();
    w.row(j) /= w.row(j).sum();
  }
  const GammaStep step = m_step_gamma(w, problem, Matrix::Zero(2, 2));

  // Weighted log-likelihood of the (K+1)-class logit, written out directly.
  const Matrix& phi = problem.phi_e();
  auto negative = [&](const Vector& b) {
    double total = 0.0;
    for (int i = 0; i < problem.total(); ++i) {
      const double e1 = b(0) + b(1) * phi(i, 1);
      const double e2 = b(2) + b(3) * phi(i, 1);
      const double lse = std::log(1.0 + std::exp(e1) + std::exp(e2));
      Vector t = Vector::Zero(3);
      if (i < problem.n()) {
        t(y[static_cast<std::size_t>(i)]) = 1.0;
      } else {
        t = w.row(i - problem.n()).transpose();
      }
      total += t(1) * e1 + t(2) * e2 - t.sum() * lse;
    }
    return -total;
  };
  const Vector b = test::nelder_mead(negative, Vector::Zero(4), 0.5, 6);
  EXPECT_NEAR(step.coef(0, 0), b(0), 1e-5);
  EXPECT_NEAR(step.coef(0, 1), b(1), 1e-5);
  EXPECT_NEAR(step.coef(1, 0), b(2), 1e-5);
  EXPECT_NEAR(step.coef(1, 1), b(3), 1e-5);

  const Vector sums = w.colwise().sum().transpose();
  const double c0 = 3 + sums(0), c1 = 3 + sums(1), c2 = sums(2);
  EXPECT_NEAR(step.gamma(0, 0), step.coef(0, 0) - std::log(c1 / c0), 1e-12);
  EXPECT_NEAR(step.gamma(1, 0), step.coef(1, 0) - std::log(c2 / c0), 1e-12);
  EXPECT_DOUBLE_EQ(step.gamma(1, 1), step.coef(1, 1));
}

TEST(MStepGamma, ExchangeableClassesGiveZeroDiscriminant) {
  Matrix train(6, 1), test(4, 1);
  train << -1, 0.5, 2, -1, 0.5, 2;
  std::vector<int> y = {0, 0, 0, 1, 1, 1};
  test << -0.3, 0.4, 1.1, 2.5;
  const ElProblem problem(OslsDataset(train, y, test, 2), BasisSpec::identity(1));
  Matrix w(4, 3);
  w.rowwise() = Eigen::RowVector3d(0.4, 0.4, 0.2);
  const GammaStep step = m_step_gamma(w, problem, Matrix::Zero(2, 2));
  EXPECT_NEAR(step.coef(0, 0), 0.0, 1e-9);
  EXPECT_NEAR(step.coef(0, 1), 0.0, 1e-9);
  EXPECT_NEAR(step.gamma(0, 1), 0.0, 1e-9);
}

TEST(MStepGamma, NovelClassHasNoTrainingRows) {
  const ElProblem problem(test::random_dataset(2, 2, 2, 40, 30), BasisSpec::identity(2));
  EXPECT_EQ(problem.class_count(2), 0);
  Matrix w = Matrix::Zero(30, 3);
  w.col(0).setConstant(0.5);
  w.col(1).setConstant(0.5);
  const GammaStep step = m_step_gamma(w, problem, Matrix::Zero(2, 3));
  EXPECT_DOUBLE_EQ(step.class_weights(2), 0.0);
  EXPECT_TRUE(step.excluded[1]);
}

class FitProperties : public ::testing::TestWithParam<int> {};

TEST_P(FitProperties, Invariants) {
  const int seed = GetParam();
  const int k_known = 1 + seed % 3;
  const int d = seed % 2 == 0 ? 2 : 3;
  const ElProblem problem(test::random_dataset(static_cast<std::uint64_t>(seed), k_known, d, 200 + 20 * seed, 300),
                          BasisSpec::identity(d));
  const ElSolution s = fit(problem, quick_config());
  EXPECT_TRUE(s.converged);
  EXPECT_TRUE(s.trace.monotone(1e-10)) << "max decrease " << s.trace.max_decrease();

  const SolutionDiagnostics diag = check_solution(s, problem);
  EXPECT_LT(diag.weight_sum_error, 1e-10);
  EXPECT_LT(diag.ratio_constraint_error, 1e-8);
  EXPECT_LT(diag.lambda_residual, 1e-10);
  EXPECT_LT(diag.lambda_identity_error, 1e-6);
  EXPECT_LT(diag.pi_fixed_point_error, 1e-8);

  RandomStream rng(static_cast<std::uint64_t>(seed), 9);
  for (int rep = 0; rep < 100; ++rep) {
    Theta t = s.theta;
    for (Eigen::Index a = 0; a < t.gamma.size(); ++a) t.gamma.data()[a] += 0.05 * rng.normal();
    for (Eigen::Index k = 0; k < t.pi.size(); ++k) t.pi(k) = std::clamp(t.pi(k) + 0.02 * rng.normal(), 1e-6, 1.0);
    if (t.pi.sum() >= 1.0) t.pi /= t.pi.sum() / 0.99;
    double value;
    try {
      value = profile_log_el(t, problem);
    } catch (const SolverError&) {
      continue;
    }
    EXPECT_LE(value, s.log_el + 1e-8);
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, FitProperties, ::testing::Range(1, 7));

TEST(Fit, PermutingTestRowsLeavesEstimateUnchanged) {
  const OslsDataset data = test::random_dataset(41, 2, 2, 100, 100);
  std::vector<int> order(100);
  std::iota(order.begin(), order.end(), 0);
  std::reverse(order.begin(), order.end());
  std::rotate(order.begin(), order.begin() + 37, order.end());
  Matrix shuffled(100, 2);
  for (int j = 0; j < 100; ++j) shuffled.row(j) = data.test_x().row(order[static_cast<std::size_t>(j)]);
  const OslsDataset permuted(data.train_x(), data.train_y(), shuffled, 2);
  const ElSolution a = fit(ElProblem(data, BasisSpec::identity(2)), quick_config());
  const ElSolution b = fit(ElProblem(permuted, BasisSpec::identity(2)), quick_config());
  EXPECT_LT((a.theta.gamma - b.theta.gamma).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((a.theta.pi - b.theta.pi).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Fit, SingleReplicateNearTruth) {
  ScenarioSpec spec = ScenarioSpec::section51(1.0 / 3.0);
  const Replicate rep = generate_replicate(spec, 0);
  const ElSolution s = fit(ElProblem(rep.data, BasisSpec::identity(6)), quick_config());
  EXPECT_NEAR(s.theta.pi(0), 0.2, 0.1);
  EXPECT_NEAR(s.theta.pi(1), 0.2, 0.1);
  EXPECT_NEAR(s.theta.pi(2), 0.4, 0.1);
}

TEST(Fit, IdenticalClassesTerminateWithWarning) {
  RandomStream rng(5, 0);
  Matrix train(200, 2), test(200, 2);
  std::vector<int> y(200);
  for (int i = 0; i < 200; ++i) {
    y[static_cast<std::size_t>(i)] = i % 2;
    train.row(i) = rng.normal_vector(2).transpose();
    test.row(i) = rng.normal_vector(2).transpose();
  }
  const ElSolution s = fit(OslsDataset(train, y, test, 2), BasisSpec::identity(2), quick_config());
  EXPECT_TRUE(s.theta.gamma.allFinite());
  const bool flagged = std::any_of(s.warnings.begin(), s.warnings.end(),
                                   [](const std::string& w) { return w.rfind("degenerate fit", 0) == 0; });
  EXPECT_TRUE(flagged);
}

TEST(Fit, MatchesGridSearchOnTinyInstances) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const ElProblem problem(test::bounded_scalar_instance(seed, 8, 8), BasisSpec::identity(1));
    EmConfig config = quick_config(5);
    const ElSolution s = fit(problem, config);
    const test::GridOptimum g = test::grid_search(problem);
    EXPECT_NEAR(s.log_el, g.value, 1e-3) << "seed " << seed;
    EXPECT_GE(s.log_el, g.value - 1e-9) << "seed " << seed;
    EXPECT_NEAR(s.theta.gamma(0, 0), g.alpha, 2e-2) << "seed " << seed;
    EXPECT_NEAR(s.theta.gamma(0, 1), g.beta, 2e-2) << "seed " << seed;
    EXPECT_NEAR(s.theta.pi(0), g.pi, 2e-2) << "seed " << seed;
  }
}

TEST(FitWithFixedPi, NonBindingConstraint) {
  const ElProblem problem(test::random_dataset(12, 2, 2, 120, 150), BasisSpec::identity(2));
  const ElSolution s = fit(problem, quick_config());
  for (int k = 0; k <= 2; ++k) {
    const ElSolution c = fit_with_fixed_pi(problem, quick_config(), k, s.theta.proportion(k), s.theta);
    EXPECT_NEAR(c.log_el, s.log_el, 1e-6) << "k " << k;
  }
}

TEST(FitWithFixedPi, BindingConstraintLowersLikelihood) {
  const ElProblem problem(test::random_dataset(13, 2, 2, 150, 150, 0.4), BasisSpec::identity(2));
  const ElSolution s = fit(problem, quick_config());
  const ElSolution c = fit_with_fixed_pi(problem, quick_config(), 2, 0.0);
  EXPECT_LT(c.log_el, s.log_el - 1.0);
  EXPECT_NEAR(c.theta.pi(1), 0.0, 1e-12);
  for (double v : {0.05, 0.2, 0.6}) {
    const ElSolution cv = fit_with_fixed_pi(problem, quick_config(), 1, v, s.theta);
    EXPECT_LE(cv.log_el, s.log_el + 1e-8);
    EXPECT_NEAR(cv.theta.pi(0), v, 1e-12);
  }
}

TEST(FitWithFixedPi, PinnedBaseline) {
  const ElProblem problem(test::random_dataset(14, 2, 2, 100, 100), BasisSpec::identity(2));
  const ElSolution s = fit(problem, quick_config());
  const ElSolution c = fit_with_fixed_pi(problem, quick_config(), 0, 0.5, s.theta);
  EXPECT_NEAR(c.theta.pi0(), 0.5, 1e-12);
  EXPECT_LE(c.log_el, s.log_el + 1e-8);
  EXPECT_TRUE(c.trace.monotone(1e-10));
}

TEST(Fit, RejectsBadConfig) {
  const ElProblem problem(test::random_dataset(15, 1, 1, 20, 20), BasisSpec::identity(1));
  EmConfig c;
  c.tol = -1.0;
  EXPECT_THROW(fit(problem, c), ValidationError);
  c = EmConfig{};
  c.n_starts = 0;
  EXPECT_THROW(fit(problem, c), ValidationError);
}

TEST(Fit, StartsAreReproducible) {
  const ElProblem problem(test::random_dataset(16, 3, 2, 80, 80), BasisSpec::identity(2));
  EmConfig c = quick_config(3);
  c.threads = 3;
  const ElSolution a = fit(problem, c);
  c.threads = 1;
  const ElSolution b = fit(problem, c);
  EXPECT_EQ(a.log_el, b.log_el);
  EXPECT_TRUE(a.theta.gamma == b.theta.gamma);
}

}  // namespace
}  // namespace oslsel
