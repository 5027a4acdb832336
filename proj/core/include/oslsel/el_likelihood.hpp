#pragma once

#include "oslsel/basis.hpp"
#include "oslsel/types.hpp"

namespace oslsel {

/// A dataset together with its expanded design. Immutable once built; every
/// estimation routine reads from it.
class ElProblem {
 public:
  ElProblem(OslsDataset dataset, BasisSpec basis);

  const OslsDataset& dataset() const noexcept { return dataset_; }
  const BasisSpec& basis() const noexcept { return basis_; }

  /// Extended basis rows for the stacked sample, N x (q+1), training first.
  const Matrix& phi_e() const noexcept { return phi_e_; }
  auto train_phi() const { return phi_e_.topRows(n()); }
  auto test_phi() const { return phi_e_.bottomRows(m()); }

  int n() const noexcept { return dataset_.n(); }
  int m() const noexcept { return dataset_.m(); }
  int total() const noexcept { return dataset_.total(); }
  int classes() const noexcept { return dataset_.k_known(); }
  int basis_size() const noexcept { return static_cast<int>(phi_e_.cols()); }
  int class_count(int k) const { return dataset_.class_count(k); }

  /// Sum over training rows of phi_e(x_i) per class, K x (q+1); row k-1 is
  /// class k. The labeled part of the log-EL is the trace of gamma against it.
  const Matrix& labeled_sums() const noexcept { return labeled_sums_; }

 private:
  OslsDataset dataset_;
  BasisSpec basis_;
  Matrix phi_e_;
  Matrix labeled_sums_;
};

struct LambdaOptions {
  /// Target for max_k |(1/N) sum_i Q_k(x_i) / A_i|.
  double tol = 1e-13;
  int max_iter = 200;
};

/// Root of the multiplier system; every denominator
/// A_i = 1 + sum_k lambda_k Q_k(x_i) is positive at the returned point.
struct LambdaSolution {
  Vector lambda;
  double residual_norm = 0.0;
  double min_denominator = 1.0;
  int min_index = -1;
  int iterations = 0;
};

/// Q_k(x_i) = exp(gamma_k' phi_e(x_i)) - 1, rows x K.
Matrix ratio_minus_one(const Eigen::Ref<const Matrix>& phi_e, const Eigen::Ref<const Matrix>& gamma);

/// Damped Newton on the concave dual sum_i log A_i(lambda), started at zero and
/// backtracked to stay inside {A_i > 0}. Columns with Q_k identically zero get
/// lambda_k = 0. Throws InfeasibleLambdaError when no interior root exists and
/// NonConvergenceError when the iteration cap is reached.
LambdaSolution solve_lambda(const Eigen::Ref<const Matrix>& gamma, const Eigen::Ref<const Matrix>& phi_e,
                            const LambdaOptions& options = {});
LambdaSolution solve_lambda(const Eigen::Ref<const Matrix>& gamma, const ElProblem& problem,
                            const LambdaOptions& options = {});

/// Baseline point masses on the N stacked observations.
struct ElWeights {
  Vector p;

  double total() const { return p.sum(); }
};

/// p_i = 1 / (N A_i(lambda)). Throws InfeasibleLambdaError if some A_i <= 0.
ElWeights el_weights(const Eigen::Ref<const Matrix>& gamma, const Eigen::Ref<const Vector>& lambda,
                     const Eigen::Ref<const Matrix>& phi_e);

/// Profile log-EL of theta with the constant -N log N dropped:
///   sum_{train, y_i >= 1} gamma_{y_i}' phi_e(x_i) + sum_test log B(x_j) - sum_i log A_i.
/// Values are comparable across calls on the same problem only.
double profile_log_el(const Theta& theta, const ElProblem& problem, const LambdaOptions& options = {});

/// Profile log-EL with its gradient and Hessian in theta. Parameters are
/// ordered gamma row by row (class 1 first), then pi_1..pi_K. The Hessian is
/// the Schur complement of the joint (theta, lambda) Hessian over lambda.
struct ProfileDerivatives {
  double value = 0.0;
  Vector gradient;
  Matrix hessian;
  LambdaSolution lambda;
};

ProfileDerivatives profile_derivatives(const Theta& theta, const ElProblem& problem,
                                       const LambdaOptions& options = {});

/// Labeled (training) part of the log-EL: sum over training rows of gamma_{y_i}' phi_e(x_i).
double labeled_log_term(const Eigen::Ref<const Matrix>& gamma, const ElProblem& problem);

/// Fitted distribution of one class as point masses on the stacked sample.
class EmpiricalCdf {
 public:
  EmpiricalCdf(int k, Matrix support, Vector masses);

  int class_index() const noexcept { return k_; }
  const Matrix& support() const noexcept { return support_; }
  const Vector& masses() const noexcept { return masses_; }
  double total_mass() const { return masses_.sum(); }

  /// Mass of support points that are componentwise <= x.
  double evaluate(const Eigen::Ref<const Vector>& x) const;
  /// Marginal cdf of a single coordinate at t.
  double evaluate_coordinate(int coordinate, double t) const;

 private:
  int k_;
  Matrix support_;
  Vector masses_;
};

/// F_k as point masses p_i exp(gamma_k' phi_e(x_i)); k = 0 gives p itself.
EmpiricalCdf fitted_cdf(const Theta& theta, const ElWeights& weights, const ElProblem& problem, int k);

}  // namespace oslsel
