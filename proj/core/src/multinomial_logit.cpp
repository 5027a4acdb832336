#include "oslsel/multinomial_logit.hpp"

#include "oslsel/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace oslsel {

namespace {

void check_shapes(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& targets,
                  const Eigen::Ref<const Matrix>& coef) {
  if (targets.rows() != x.rows()) throw DimensionError("targets and design differ in row count");
  if (targets.cols() < 2) throw DimensionError("targets need at least two classes");
  if (coef.rows() != targets.cols() - 1 || coef.cols() != x.cols()) {
    throw DimensionError("coefficient matrix has the wrong shape");
  }
}

// Row-wise log(1 + sum_k exp(eta_ik)) and probabilities of the non-reference classes.
struct LinkState {
  Matrix eta;
  Vector lse;
  Matrix probs;
};

LinkState link(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& coef, bool with_probs) {
  LinkState s;
  s.eta.noalias() = x * coef.transpose();
  s.lse.resize(s.eta.rows());
  if (with_probs) s.probs.resize(s.eta.rows(), s.eta.cols());
  for (Eigen::Index i = 0; i < s.eta.rows(); ++i) {
    const double shift = std::max(0.0, s.eta.row(i).maxCoeff());
    double total = std::exp(-shift);
    for (Eigen::Index k = 0; k < s.eta.cols(); ++k) total += std::exp(s.eta(i, k) - shift);
    s.lse(i) = shift + std::log(total);
    if (with_probs) {
      for (Eigen::Index k = 0; k < s.eta.cols(); ++k) s.probs(i, k) = std::exp(s.eta(i, k) - s.lse(i));
    }
  }
  return s;
}

double objective_from(const LinkState& s, const Eigen::Ref<const Matrix>& targets, const Vector& row_totals) {
  const auto non_ref = targets.rightCols(targets.cols() - 1);
  return (non_ref.array() * s.eta.array()).sum() - row_totals.dot(s.lse);
}

Matrix gradient_from(const LinkState& s, const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& targets,
                     const Vector& row_totals) {
  Matrix residual = targets.rightCols(targets.cols() - 1);
  residual.noalias() -= (s.probs.array().colwise() * row_totals.array()).matrix();
  return residual.transpose() * x;
}

}  // namespace

double multinomial_logit_objective(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& targets,
                                   const Eigen::Ref<const Matrix>& coef) {
  check_shapes(x, targets, coef);
  const Vector totals = targets.rowwise().sum();
  return objective_from(link(x, coef, false), targets, totals);
}

Matrix multinomial_logit_gradient(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& targets,
                                  const Eigen::Ref<const Matrix>& coef) {
  check_shapes(x, targets, coef);
  const Vector totals = targets.rowwise().sum();
  return gradient_from(link(x, coef, true), x, targets, totals);
}

MultinomialLogitResult fit_multinomial_logit(const Eigen::Ref<const Matrix>& x,
                                             const Eigen::Ref<const Matrix>& targets,
                                             const Eigen::Ref<const Matrix>& start, const NewtonOptions& options) {
  check_shapes(x, targets, start);
  if ((targets.array() < 0.0).any()) throw ValidationError("multinomial-logit targets must be nonnegative");

  const Eigen::Index classes = start.rows();
  const Eigen::Index p = x.cols();
  const Eigen::Index dim = classes * p;
  const Vector totals = targets.rowwise().sum();

  MultinomialLogitResult result;
  result.coef = start;
  LinkState state = link(x, result.coef, true);
  result.objective = objective_from(state, targets, totals);

  Matrix info(dim, dim);
  Matrix weighted(x.rows(), p);
  for (int iter = 0;; ++iter) {
    const Matrix grad = gradient_from(state, x, targets, totals);
    result.gradient_norm = grad.cwiseAbs().maxCoeff();
    result.iterations = iter;
    if (result.gradient_norm < options.tol) break;
    if (iter >= options.max_iter) {
      throw NonConvergenceError("multinomial-logit Newton did not converge in " + std::to_string(options.max_iter) +
                                " iterations (gradient " + std::to_string(result.gradient_norm) + ")");
    }

    // info block (k, l) = X' diag(t_i (delta_kl s_ik - s_ik s_il)) X
    for (Eigen::Index k = 0; k < classes; ++k) {
      for (Eigen::Index l = k; l < classes; ++l) {
        Vector c = -(state.probs.col(k).array() * state.probs.col(l).array()).matrix();
        if (k == l) c += state.probs.col(k);
        c.array() *= totals.array();
        weighted = x.array().colwise() * c.array();
        info.block(k * p, l * p, p, p).noalias() = x.transpose() * weighted;
        if (l != k) info.block(l * p, k * p, p, p) = info.block(k * p, l * p, p, p).transpose();
      }
    }
    Vector g(dim);
    for (Eigen::Index k = 0; k < classes; ++k) g.segment(k * p, p) = grad.row(k).transpose();

    Vector step;
    Eigen::LLT<Matrix> llt(info);
    double ridge = 0.0;
    for (int attempt = 0; attempt < 40; ++attempt) {
      if (llt.info() == Eigen::Success) {
        step = llt.solve(g);
        if (step.allFinite()) break;
      }
      ridge = ridge == 0.0 ? 1e-10 * (1.0 + info.diagonal().cwiseAbs().maxCoeff()) : ridge * 10.0;
      llt.compute(info + ridge * Matrix::Identity(dim, dim));
      step.resize(0);
    }
    if (step.size() == 0) throw NonConvergenceError("multinomial-logit Hessian is singular after ridge fallback");

    const double slope = g.dot(step);
    double t = 1.0;
    bool accepted = false;
    for (int halving = 0; halving < 60; ++halving) {
      Matrix candidate = result.coef;
      for (Eigen::Index k = 0; k < classes; ++k) candidate.row(k) += t * step.segment(k * p, p).transpose();
      LinkState trial = link(x, candidate, true);
      const double value = objective_from(trial, targets, totals);
      if (std::isfinite(value) &&
          value >= result.objective + 1e-4 * t * slope - 1e-13 * (1.0 + std::abs(result.objective))) {
        result.coef = std::move(candidate);
        result.objective = value;
        state = std::move(trial);
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      // No ascent left at double precision; the gradient is as small as it will get.
      if (result.gradient_norm < 1e3 * options.tol) break;
      throw NonConvergenceError("multinomial-logit line search failed (gradient " +
                                std::to_string(result.gradient_norm) + ")");
    }
    if (result.coef.cwiseAbs().maxCoeff() > options.coefficient_cap) {
      throw NonConvergenceError("multinomial-logit coefficients diverge (separated classes?)");
    }
  }
  return result;
}

}  // namespace oslsel
