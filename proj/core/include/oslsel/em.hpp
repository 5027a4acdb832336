#pragma once

#include "oslsel/el_likelihood.hpp"
#include "oslsel/multinomial_logit.hpp"
#include "oslsel/types.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace oslsel {

struct EmConfig {
  /// EM stops once an iteration raises the log-EL by less than this, or
  /// moves no proportion by more than tol / 10. A Newton polish on the
  /// profile log-EL then finishes the job.
  double tol = 1e-5;
  /// Used instead when the polish is off or fails: EM continues until the
  /// log-EL increase is below tol * 1e-3 and no parameter moves by more than
  /// this (tilts relative to their scale).
  double tight_param_tol = 1e-9;
  bool polish = true;
  int polish_max_steps = 200;
  int max_iter = 2000;
  int n_starts = 5;
  std::uint64_t seed = 20240901;
  double newton_tol = 1e-9;
  int newton_max_iter = 100;
  /// Free proportions are kept at or above this value.
  double pi_floor = 1e-10;
  /// Threads used to run independent starts.
  int threads = 1;

  void validate() const;
  NewtonOptions newton() const;
};

struct EmIteration {
  int iteration = 0;
  /// Full-data log-EL at the iterate, with the constant -N log N dropped so
  /// that it is on the same scale as profile_log_el.
  double log_el = 0.0;
  Vector pi;
  int inner_iterations = 0;
};

struct EmTrace {
  std::vector<EmIteration> records;

  /// Largest single-step decrease of the log-EL (0 when monotone).
  double max_decrease() const;
  bool monotone(double slack = 1e-10) const { return max_decrease() <= slack; }
};

/// Fitted maximum empirical likelihood solution.
struct ElSolution {
  Theta theta;
  /// Baseline masses from the multiplier formula at the fitted tilts.
  ElWeights p;
  Vector lambda;
  double lambda_residual = 0.0;
  /// Profile log-EL at theta (constant -N log N dropped).
  double log_el = 0.0;
  EmTrace trace;
  bool converged = false;
  /// Some free proportion sits on the floor.
  bool boundary = false;
  /// Responsibilities of the test rows at theta, m x (K+1).
  Matrix w;
  int start_index = 0;
  int iterations = 0;
  /// Newton steps taken on the profile log-EL after EM (0 when skipped).
  int polish_steps = 0;
  bool polished = false;
  std::vector<std::string> warnings;
};

/// Which mixture proportions are held fixed during EM.
struct ProportionConstraint {
  enum class Kind { none, single, all };
  Kind kind = Kind::none;
  /// For `single`: class index in 0..K whose proportion is fixed.
  int k = 0;
  double value = 0.0;
  /// For `all`: (pi_1, ..., pi_K).
  Vector fixed;

  static ProportionConstraint free() { return {}; }
  static ProportionConstraint single_class(int k, double value) { return {Kind::single, k, value, {}}; }
  static ProportionConstraint all_classes(Vector pi) { return {Kind::all, 0, 0.0, std::move(pi)}; }
};

/// Responsibilities w_jk = pi_k exp(gamma_k' phi_e(x_j)) / B(x_j), k >= 1, and
/// w_j0 = pi_0 / B(x_j); m x (K+1).
Matrix e_step(const Theta& theta, const Eigen::Ref<const Matrix>& test_phi_e);

/// pi_k = column mean of w for k = 1..K.
Vector m_step_pi(const Eigen::Ref<const Matrix>& w);

/// Proportion update with class k's proportion pinned at `value`: the other
/// K proportions (including pi_0) share 1 - value in proportion to their
/// responsibility column sums.
Vector m_step_pi_fixed(const Eigen::Ref<const Matrix>& w, int k, double value);

struct GammaStep {
  /// K x (q+1) tilts (alpha_k, beta_k).
  Matrix gamma;
  /// K x (q+1) multinomial-logit coefficients (alpha_k^*, beta_k).
  Matrix coef;
  /// Effective class sizes n_k + sum_j w_jk for k = 0..K.
  Vector class_weights;
  /// Classes with zero effective weight; they are left out of the logit fit
  /// and their intercept is set so that F_k integrates to one.
  std::vector<bool> excluded;
  int iterations = 0;
  double gradient_norm = 0.0;
};

/// Maximizes the gamma part of the expected complete-data log-EL: a weighted
/// (K+1)-class multinomial logit where each training row puts weight 1 on its
/// own class and each test row j puts w_jk on class k. `start` is a gamma
/// block used to warm-start Newton.
GammaStep m_step_gamma(const Eigen::Ref<const Matrix>& w, const ElProblem& problem,
                       const Eigen::Ref<const Matrix>& start, const NewtonOptions& options = {});

/// N^{-1} [1 + sum_k exp(alpha_k^* + beta_k' phi(x_i))]^{-1} as written, without
/// normalization. At the logit optimum these sum to (n_0 + sum_j w_j0) / N.
Vector logit_masses(const Eigen::Ref<const Matrix>& coef, const Eigen::Ref<const Matrix>& phi_e,
                    const std::vector<bool>& excluded = {});

/// Baseline masses from the logit coefficients:
/// p_i proportional to [1 + sum_k exp(alpha_k^* + beta_k' phi(x_i))]^{-1}, normalized to sum to one.
/// Rows of `excluded` classes are skipped.
ElWeights m_step_p(const Eigen::Ref<const Matrix>& coef, const Eigen::Ref<const Matrix>& phi_e,
                   const std::vector<bool>& excluded = {});

/// Full-data log-EL of (gamma, pi, p), with -N log N dropped.
double full_log_el(const Theta& theta, const ElWeights& weights, const ElProblem& problem);

/// Runs EM from one starting value. When `partial` is given it receives each
/// trace record as it is produced, so a run that throws still leaves its trace.
ElSolution run_em(const ElProblem& problem, const EmConfig& config, const Theta& start,
                  const ProportionConstraint& constraint = ProportionConstraint::free(), int start_index = 0,
                  EmTrace* partial = nullptr);

/// Starting values used by fit: start 0 is deterministic, later starts are
/// seeded perturbations of the novel-class tilt and of the proportions.
Theta initial_theta(const ElProblem& problem, const EmConfig& config, int start_index);

/// Maximum EL estimate over config.n_starts starts (best final log-EL).
ElSolution fit(const ElProblem& problem, const EmConfig& config);
ElSolution fit(const OslsDataset& dataset, const BasisSpec& basis, const EmConfig& config);

/// Maximum EL estimate with the proportion of class k (0..K) held at `value`.
/// With a warm start a single EM run is made from it (proportions adjusted to
/// satisfy the constraint); otherwise config.n_starts starts are used.
ElSolution fit_with_fixed_pi(const ElProblem& problem, const EmConfig& config, int k, double value,
                             const std::optional<Theta>& warm_start = std::nullopt);

/// Tilts only, with every proportion held at `pi` (pi_1..pi_K).
ElSolution fit_with_fixed_proportions(const ElProblem& problem, const EmConfig& config, const Vector& pi,
                                      const std::optional<Theta>& warm_start = std::nullopt);

/// Moves a theta onto the constraint set (used to seed constrained fits).
Theta project_onto_constraint(const Theta& theta, const ProportionConstraint& constraint);

/// Residual checks of a fitted solution against the defining equations.
struct SolutionDiagnostics {
  double weight_sum_error = 0.0;       // |sum p - 1|
  double ratio_constraint_error = 0.0; // max_k |sum_i p_i Q_k(x_i)|
  double lambda_residual = 0.0;        // multiplier-system residual
  double lambda_identity_error = 0.0;  // max_k |lambda_k - (n_k + sum_j w_jk)/N|
  double pi_fixed_point_error = 0.0;   // max_k |pi_k - mean_j w_jk| (free fits only)
};

SolutionDiagnostics check_solution(const ElSolution& solution, const ElProblem& problem,
                                   bool proportions_free = true);

/// Entrywise maximum of two residual reports.
SolutionDiagnostics worst_of(const SolutionDiagnostics& a, const SolutionDiagnostics& b);

}  // namespace oslsel
