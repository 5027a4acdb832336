#pragma once

#include "oslsel/el_likelihood.hpp"
#include "oslsel/em.hpp"
#include "oslsel/types.hpp"

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace oslsel {

/// Quantile of the chi-square distribution with one degree of freedom.
double chi2_quantile(double level);

struct ElrCurve {
  int k = 0;
  double mele_value = 0.0;
  /// (pi_k value, R_{N,k}(value)) in the order requested.
  std::vector<std::pair<double, double>> points;
};

struct ConfidenceInterval {
  int k = 0;
  double level = 0.95;
  double estimate = 0.0;
  double lower = 0.0;
  double upper = 1.0;
  /// The search hit 0 (or 1) before R crossed the threshold.
  bool lower_at_boundary = false;
  bool upper_at_boundary = false;
};

/// Empirical likelihood ratio R_{N,k}(v) = 2{l(theta_hat) - l(theta_hat_k(v))}
/// for one fitted problem. Constrained fits are warm-started from the cached
/// solution whose pinned value is nearest, so sweeping v outward from the
/// estimate is cheap.
class ElrProfiler {
 public:
  /// `problem` must outlive the profiler.
  ElrProfiler(const ElProblem& problem, ElSolution mele, EmConfig config = {});

  const ElSolution& mele() const noexcept { return mele_; }
  /// pi_hat_k for k in 0..K.
  double estimate(int k) const;

  double statistic(int k, double value);
  ElrCurve curve(int k, const std::vector<double>& values);
  /// Outermost solutions of R = chi2_quantile(level) found by stepping 0.02
  /// away from the estimate until R exceeds the threshold, then bisecting.
  ConfidenceInterval interval(int k, double level);

  /// Smallest R seen so far (should never be meaningfully negative).
  double min_statistic() const noexcept { return min_statistic_; }
  int evaluations() const noexcept { return evaluations_; }
  /// Largest residuals over every constrained fit made so far.
  const SolutionDiagnostics& worst_diagnostics() const noexcept { return worst_; }

 private:
  const ElProblem& problem_;
  ElSolution mele_;
  EmConfig config_;
  std::map<int, std::vector<std::pair<double, Theta>>> cache_;
  double min_statistic_;
  int evaluations_ = 0;
  SolutionDiagnostics worst_;

  const Theta& nearest(int k, double value) const;
  double endpoint(int k, double threshold, double inside, double outside);
};

/// Plug-in estimate of the asymptotic covariance of sqrt(N)(theta_hat - theta).
/// Parameters are ordered like profile_derivatives: gamma row by row, then
/// pi_1..pi_K.
struct CovarianceEstimate {
  Matrix w11, w12, w13, w22, w23, w33;
  Matrix w_star;
  Matrix sigma;
  double condition_number = 0.0;
  int total = 0;
  int classes = 0;
  int basis_size = 0;
  std::vector<std::string> names;

  /// Covariance of theta_hat itself: sigma / N.
  Matrix variance() const { return sigma / static_cast<double>(total); }
  int pi_index(int k) const { return classes * basis_size + k - 1; }
  int gamma_index(int k, int a) const { return (k - 1) * basis_size + a; }
  /// Standard error of pi_hat_k, k in 0..K.
  double pi_standard_error(int k) const;
};

/// Builds W* from the fitted solution with E_0 replaced by the p_hat-weighted
/// average over all N points. Throws DegenerateParameterError when W_33 or W*
/// is numerically singular.
CovarianceEstimate plugin_covariance(const ElSolution& solution, const ElProblem& problem);

/// pi_hat_k +/- z * se, clipped to [0, 1].
ConfidenceInterval wald_interval(const CovarianceEstimate& covariance, const ElSolution& solution, int k,
                                 double level);

struct AssumptionReport {
  double min_eigenvalue = 0.0;
  double max_eigenvalue = 0.0;
  bool rank_deficient = false;
  /// ||beta_hat_k||, k = 1..K (empty without a fit).
  std::vector<double> beta_norms;
  /// ||beta_hat_k - beta_hat_l|| for k < l, row-major over pairs.
  std::vector<std::pair<std::pair<int, int>, double>> beta_distances;
  std::vector<std::string> flags;
};

/// Flags a singular basis moment matrix, tilts closer than `distance_tol`,
/// and the degenerate-fit warnings carried by the solution.
AssumptionReport assumption_diagnostics(const ElProblem& problem, const ElSolution* solution = nullptr,
                                        double distance_tol = 1e-3);

}  // namespace oslsel
