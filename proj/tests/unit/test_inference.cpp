#include "oslsel/em.hpp"
#include "oslsel/errors.hpp"
#include "oslsel/inference.hpp"
#include "oslsel/simulation.hpp"

#include "support.hpp"

#include <unsupported/Eigen/KroneckerProduct>

#include <gtest/gtest.h>

#include <cmath>

namespace oslsel {
namespace {

struct Fitted {
  ElProblem problem;
  ElSolution solution;
};

Fitted fit_section51(int r, int n = 1200, int starts = 2) {
  ScenarioSpec spec = ScenarioSpec::section51(1.0 / 3.0);
  spec.n = n;
  spec.m = n;
  spec.m_star = 1;
  Replicate rep = generate_replicate(spec, r);
  ElProblem problem(std::move(rep.data), BasisSpec::identity(6));
  EmConfig config;
  config.n_starts = starts;
  ElSolution s = fit(problem, config);
  return {std::move(problem), std::move(s)};
}

TEST(Chi2Quantile, TableValues) {
  EXPECT_NEAR(chi2_quantile(0.95), 3.8415, 5e-5);
  EXPECT_NEAR(chi2_quantile(0.99), 6.6349, 5e-5);
  EXPECT_NEAR(chi2_quantile(0.95), 3.84, 5e-3);
  EXPECT_DOUBLE_EQ(chi2_quantile(0.0), 0.0);
  EXPECT_LT(chi2_quantile(1e-9), 1e-15);
  // chi2_1 quantile at p equals the squared normal quantile at (1 + p) / 2.
  EXPECT_NEAR(chi2_quantile(0.6826894921370859), 1.0, 1e-12);
}

TEST(Chi2Quantile, RejectsOutOfRange) {
  EXPECT_THROW(chi2_quantile(1.0), ValidationError);
  EXPECT_THROW(chi2_quantile(-0.1), ValidationError);
  EXPECT_THROW(chi2_quantile(std::nan("")), ValidationError);
}

class ProfilerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { fitted_ = new Fitted(fit_section51(3)); }
  static void TearDownTestSuite() {
    delete fitted_;
    fitted_ = nullptr;
  }
  static Fitted* fitted_;
};

Fitted* ProfilerTest::fitted_ = nullptr;

TEST_F(ProfilerTest, ZeroAtEstimate) {
  ElrProfiler profiler(fitted_->problem, fitted_->solution);
  for (int k = 0; k <= 3; ++k) EXPECT_NEAR(profiler.statistic(k, profiler.estimate(k)), 0.0, 1e-6) << "k " << k;
}

TEST_F(ProfilerTest, CurveIsNonnegative) {
  ElrProfiler profiler(fitted_->problem, fitted_->solution);
  const double centre = profiler.estimate(3);
  std::vector<double> grid;
  for (int i = 0; i < 21; ++i) grid.push_back(centre - 0.1 + 0.01 * i);
  const ElrCurve curve = profiler.curve(3, grid);
  ASSERT_EQ(curve.points.size(), 21u);
  int non_monotone = 0;
  for (std::size_t i = 0; i < curve.points.size(); ++i) {
    EXPECT_GE(curve.points[i].second, -1e-8);
    if (i > 0) {
      const bool right = curve.points[i].first > centre;
      const double change = curve.points[i].second - curve.points[i - 1].second;
      if ((right && change < -1e-8) || (!right && curve.points[i - 1].first < centre && change > 1e-8)) ++non_monotone;
    }
  }
  RecordProperty("non_monotone_steps", non_monotone);
  EXPECT_GT(curve.points.front().second, 1.0);
  EXPECT_GT(curve.points.back().second, 1.0);
}

TEST_F(ProfilerTest, IntervalsNest) {
  ElrProfiler profiler(fitted_->problem, fitted_->solution);
  for (int k = 1; k <= 3; ++k) {
    const ConfidenceInterval a = profiler.interval(k, 0.5);
    const ConfidenceInterval b = profiler.interval(k, 0.9);
    const ConfidenceInterval c = profiler.interval(k, 0.95);
    EXPECT_LE(a.lower, a.estimate);
    EXPECT_GE(a.upper, a.estimate);
    EXPECT_LE(b.lower, a.lower);
    EXPECT_GE(b.upper, a.upper);
    EXPECT_LE(c.lower, b.lower);
    EXPECT_GE(c.upper, b.upper);
    EXPECT_GE(c.lower, 0.0);
    EXPECT_LE(c.upper, 1.0);
    EXPECT_NEAR(profiler.statistic(k, c.lower), chi2_quantile(0.95), 1e-6);
    EXPECT_NEAR(profiler.statistic(k, c.upper), chi2_quantile(0.95), 1e-6);
  }
  EXPECT_GE(profiler.min_statistic(), -1e-8);
}

TEST_F(ProfilerTest, ProfileDominance) {
  ElrProfiler profiler(fitted_->problem, fitted_->solution);
  for (double v : {0.0, 0.1, 0.3, 0.5, 0.7}) EXPECT_GE(profiler.statistic(2, v), -1e-8) << v;
}

/// W blocks assembled term by term with Kronecker products.
struct NaiveBlocks {
  Matrix w11, w12, w13, w22, w33;
};

NaiveBlocks naive_blocks(const ElSolution& s, const ElProblem& problem) {
  const int kk = problem.classes();
  const int q1 = problem.basis_size();
  const double c = static_cast<double>(problem.m()) / problem.total();
  const Vector& lambda = s.lambda;
  const Vector& pi = s.theta.pi;
  NaiveBlocks b{Matrix::Zero(kk * q1, kk * q1), Matrix::Zero(kk * q1, kk), Matrix::Zero(kk * q1, kk),
                Matrix::Zero(kk, kk), Matrix::Zero(kk, kk)};
  for (int i = 0; i < problem.total(); ++i) {
    const Vector phi = problem.phi_e().row(i).transpose();
    const Vector sv = (s.theta.gamma * phi).array().exp();
    const Vector qv = sv.array() - 1.0;
    const double a = 1.0 + lambda.dot(qv);
    const double bb = 1.0 + pi.dot(qv);
    const Vector ls = lambda.cwiseProduct(sv);
    const Vector ps = pi.cwiseProduct(sv);
    const Matrix pp = phi * phi.transpose();
    const Matrix pq = phi * qv.transpose();
    const Matrix diag_s = sv.asDiagonal();
    const Matrix diag_d = (lambda - c * pi).cwiseProduct(sv).asDiagonal();
    const double w = s.p.p(i);
    b.w11 += w * (Eigen::kroneckerProduct(Matrix(ls * ls.transpose()), pp) / a -
                  c * Eigen::kroneckerProduct(Matrix(ps * ps.transpose()), pp) / bb -
                  Eigen::kroneckerProduct(diag_d, pp))
                     .eval();
    b.w12 += w * (c * Eigen::kroneckerProduct(diag_s, phi) - c * Eigen::kroneckerProduct(ps, pq) / bb).eval();
    b.w13 += w * (Eigen::kroneckerProduct(ls, pq) / a - Eigen::kroneckerProduct(diag_s, phi)).eval();
    b.w22 += -c * w * qv * qv.transpose() / bb;
    b.w33 += w * qv * qv.transpose() / a;
  }
  return b;
}

TEST_F(ProfilerTest, CovarianceMatchesKroneckerAssembly) {
  const CovarianceEstimate cov = plugin_covariance(fitted_->solution, fitted_->problem);
  const NaiveBlocks b = naive_blocks(fitted_->solution, fitted_->problem);
  auto close = [](const Matrix& x, const Matrix& y) {
    return (x - y).cwiseAbs().maxCoeff() <= 1e-10 * (1.0 + y.cwiseAbs().maxCoeff());
  };
  EXPECT_TRUE(close(cov.w11, b.w11));
  EXPECT_TRUE(close(cov.w12, b.w12));
  EXPECT_TRUE(close(cov.w13, b.w13));
  EXPECT_TRUE(close(cov.w22, b.w22));
  EXPECT_TRUE(close(cov.w33, b.w33));
  EXPECT_TRUE(cov.w23.isZero(0.0));

  const Eigen::Index dim = b.w11.rows() + b.w22.rows();
  Matrix naive_star(dim, dim);
  naive_star << b.w11 - b.w13 * b.w33.inverse() * b.w13.transpose(), b.w12,
                b.w12.transpose(), b.w22;
  naive_star = -naive_star;
  EXPECT_TRUE(close(cov.w_star, naive_star));
}

TEST_F(ProfilerTest, CovarianceProperties) {
  const CovarianceEstimate cov = plugin_covariance(fitted_->solution, fitted_->problem);
  EXPECT_LT((cov.w_star - cov.w_star.transpose()).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((cov.sigma - cov.sigma.transpose()).cwiseAbs().maxCoeff(), 1e-8);
  const Matrix product = cov.variance() * cov.w_star * cov.total;
  EXPECT_LT((product - Matrix::Identity(product.rows(), product.cols())).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_GT(cov.sigma.diagonal().minCoeff(), 0.0);
  EXPECT_GT(cov.condition_number, 1.0);
  for (int k = 0; k <= 3; ++k) EXPECT_GT(cov.pi_standard_error(k), 0.0);
}

TEST_F(ProfilerTest, CovarianceAgreesWithProfileHessian) {
  const CovarianceEstimate cov = plugin_covariance(fitted_->solution, fitted_->problem);
  const ProfileDerivatives d = profile_derivatives(fitted_->solution.theta, fitted_->problem);
  const Matrix scaled = -d.hessian / static_cast<double>(fitted_->problem.total());
  EXPECT_LT((cov.w_star - scaled).cwiseAbs().maxCoeff(), 0.05 * cov.w_star.cwiseAbs().maxCoeff());
}

TEST_F(ProfilerTest, WaldIntervalCentredOnEstimate) {
  const CovarianceEstimate cov = plugin_covariance(fitted_->solution, fitted_->problem);
  const ConfidenceInterval w = wald_interval(cov, fitted_->solution, 3, 0.95);
  EXPECT_NEAR(0.5 * (w.lower + w.upper), fitted_->solution.theta.pi(2), 1e-12);
  EXPECT_NEAR(w.upper - w.lower, 2 * 1.959963984540054 * cov.pi_standard_error(3), 1e-12);
}

TEST(AssumptionDiagnostics, ConstantColumnIsRankDeficient) {
  const OslsDataset base = test::random_dataset(4, 2, 1, 40, 40);
  Matrix train(40, 2), test(40, 2);
  train << base.train_x(), Matrix::Constant(40, 1, 3.0);
  test << base.test_x(), Matrix::Constant(40, 1, 3.0);
  const ElProblem problem(OslsDataset(train, base.train_y(), test, 2), BasisSpec::identity(2));
  const AssumptionReport r = assumption_diagnostics(problem);
  EXPECT_TRUE(r.rank_deficient);
  EXPECT_NEAR(r.min_eigenvalue, 0.0, 1e-10);
  EXPECT_FALSE(r.flags.empty());
}

TEST(AssumptionDiagnostics, DesignIsFullRank) {
  ScenarioSpec spec = ScenarioSpec::section51(1.0 / 3.0);
  const Replicate rep = generate_replicate(spec, 0);
  const AssumptionReport r = assumption_diagnostics(ElProblem(rep.data, BasisSpec::identity(6)));
  EXPECT_GT(r.min_eigenvalue, 0.0);
  EXPECT_FALSE(r.rank_deficient);
}

TEST(AssumptionDiagnostics, IdenticalClassesFlagged) {
  RandomStream rng(77, 0);
  Matrix train(300, 2), test(300, 2);
  std::vector<int> y(300);
  for (int i = 0; i < 300; ++i) {
    y[static_cast<std::size_t>(i)] = i % 3;
    train.row(i) = rng.normal_vector(2).transpose();
    test.row(i) = rng.normal_vector(2).transpose();
  }
  const ElProblem problem(OslsDataset(train, y, test, 3), BasisSpec::identity(2));
  EmConfig config;
  config.n_starts = 2;
  const ElSolution s = fit(problem, config);
  const AssumptionReport r = assumption_diagnostics(problem, &s);
  ASSERT_EQ(r.beta_distances.size(), 3u);
  EXPECT_LT(r.beta_distances[0].second, 0.5);
  EXPECT_FALSE(r.flags.empty());
}

TEST(InferenceSlow, WaldWidthTracksElrWidth) {
  double ratio_sum = 0.0;
  const int reps = 50;
  for (int r = 0; r < reps; ++r) {
    Fitted f = fit_section51(100 + r);
    ElrProfiler profiler(f.problem, f.solution);
    const ConfidenceInterval elr = profiler.interval(1, 0.95);
    const CovarianceEstimate cov = plugin_covariance(f.solution, f.problem);
    const ConfidenceInterval wald = wald_interval(cov, f.solution, 1, 0.95);
    ratio_sum += (wald.upper - wald.lower) / (elr.upper - elr.lower);
  }
  EXPECT_NEAR(ratio_sum / reps, 1.0, 0.25);
}

TEST(InferenceSlow, PluginVarianceShrinksLikeOneOverN) {
  double small = 0.0, large = 0.0;
  const int reps = 50;
  for (int r = 0; r < reps; ++r) {
    const Fitted a = fit_section51(200 + r, 600, 1);
    const Fitted b = fit_section51(200 + r, 2400, 1);
    small += plugin_covariance(a.solution, a.problem).variance().diagonal().tail(3).mean();
    large += plugin_covariance(b.solution, b.problem).variance().diagonal().tail(3).mean();
  }
  const double ratio = small / large;
  EXPECT_GE(ratio, 3.2);
  EXPECT_LE(ratio, 4.8);
}

}  // namespace
}  // namespace oslsel
