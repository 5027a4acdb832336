#pragma once

#include "oslsel/types.hpp"

namespace oslsel {

struct NewtonOptions {
  /// Convergence threshold on the max-norm of the gradient.
  double tol = 1e-9;
  int max_iter = 100;
  /// Any |coefficient| above this is treated as divergence (separated data).
  double coefficient_cap = 1e4;
};

struct MultinomialLogitResult {
  /// C x p; row k-1 holds the coefficients of class k against reference class 0.
  Matrix coef;
  double objective = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
};

/// Weighted multinomial-logit log-likelihood with reference class 0,
///   L(B) = sum_i [ sum_{k>=1} T_ik eta_ik - t_i log(1 + sum_{k>=1} exp(eta_ik)) ],
/// where eta_ik = b_k' x_i and t_i = sum_{k>=0} T_ik. T is rows x (C+1).
double multinomial_logit_objective(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& targets,
                                   const Eigen::Ref<const Matrix>& coef);

/// Gradient of the objective, C x p.
Matrix multinomial_logit_gradient(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& targets,
                                  const Eigen::Ref<const Matrix>& coef);

/// Maximizes L by Newton's method with a full (Cp x Cp) Hessian, a
/// Levenberg-style ridge when the Cholesky factorization fails, and Armijo
/// backtracking. Throws NonConvergenceError on divergence or iteration cap.
MultinomialLogitResult fit_multinomial_logit(const Eigen::Ref<const Matrix>& x,
                                             const Eigen::Ref<const Matrix>& targets,
                                             const Eigen::Ref<const Matrix>& start, const NewtonOptions& options = {});

}  // namespace oslsel
