#include "oslsel/inference.hpp"

#include "oslsel/drm.hpp"
#include "oslsel/errors.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace oslsel {

double chi2_quantile(double level) {
  if (!(level >= 0.0 && level < 1.0)) throw ValidationError("confidence level must lie in [0, 1)");
  if (level == 0.0) return 0.0;
  return boost::math::quantile(boost::math::chi_squared_distribution<double>(1.0), level);
}

ElrProfiler::ElrProfiler(const ElProblem& problem, ElSolution mele, EmConfig config)
    : problem_(problem),
      mele_(std::move(mele)),
      config_(config),
      min_statistic_(std::numeric_limits<double>::infinity()) {
  config_.validate();
  if (mele_.theta.classes() != problem.classes()) throw DimensionError("solution does not match the problem");
}

double ElrProfiler::estimate(int k) const {
  if (k < 0 || k > mele_.theta.classes()) throw ValidationError("class index out of range");
  return mele_.theta.proportion(k);
}

const Theta& ElrProfiler::nearest(int k, double value) const {
  const auto it = cache_.find(k);
  if (it == cache_.end()) return mele_.theta;
  const Theta* best = &mele_.theta;
  double gap = std::abs(estimate(k) - value);
  for (const auto& [v, theta] : it->second) {
    if (std::abs(v - value) < gap) {
      gap = std::abs(v - value);
      best = &theta;
    }
  }
  return *best;
}

double ElrProfiler::statistic(int k, double value) {
  if (k < 0 || k > problem_.classes()) throw ValidationError("class index out of range");
  if (!(value >= 0.0 && value <= 1.0)) throw ValidationError("pinned proportion must lie in [0, 1]");
  ElSolution constrained = fit_with_fixed_pi(problem_, config_, k, value, nearest(k, value));
  const double r = 2.0 * (mele_.log_el - constrained.log_el);
  worst_ = worst_of(worst_, check_solution(constrained, problem_, false));
  cache_[k].emplace_back(value, std::move(constrained.theta));
  min_statistic_ = std::min(min_statistic_, r);
  ++evaluations_;
  return r;
}

ElrCurve ElrProfiler::curve(int k, const std::vector<double>& values) {
  ElrCurve out;
  out.k = k;
  out.mele_value = estimate(k);
  for (double v : values) out.points.emplace_back(v, statistic(k, v));
  return out;
}

namespace {

double statistic_or_inf(ElrProfiler& profiler, int k, double value) {
  try {
    return profiler.statistic(k, value);
  } catch (const SolverError&) {
    return std::numeric_limits<double>::infinity();
  }
}

}  // namespace

double ElrProfiler::endpoint(int k, double threshold, double inside, double outside) {
  for (int it = 0; it < 60 && std::abs(outside - inside) > 1e-10; ++it) {
    const double mid = 0.5 * (inside + outside);
    if (statistic_or_inf(*this, k, mid) > threshold) {
      outside = mid;
    } else {
      inside = mid;
    }
  }
  return 0.5 * (inside + outside);
}

ConfidenceInterval ElrProfiler::interval(int k, double level) {
  ConfidenceInterval ci;
  ci.k = k;
  ci.level = level;
  ci.estimate = estimate(k);
  const double threshold = chi2_quantile(level);
  constexpr double step = 0.02;

  double v = ci.estimate;
  for (;;) {
    const double next = std::min(1.0, v + step);
    if (next <= v) {
      ci.upper = 1.0;
      ci.upper_at_boundary = true;
      break;
    }
    if (statistic_or_inf(*this, k, next) > threshold) {
      ci.upper = endpoint(k, threshold, v, next);
      break;
    }
    if (next >= 1.0) {
      ci.upper = 1.0;
      ci.upper_at_boundary = true;
      break;
    }
    v = next;
  }
  v = ci.estimate;
  for (;;) {
    const double next = std::max(0.0, v - step);
    if (next >= v) {
      ci.lower = 0.0;
      ci.lower_at_boundary = true;
      break;
    }
    if (statistic_or_inf(*this, k, next) > threshold) {
      ci.lower = endpoint(k, threshold, v, next);
      break;
    }
    if (next <= 0.0) {
      ci.lower = 0.0;
      ci.lower_at_boundary = true;
      break;
    }
    v = next;
  }
  return ci;
}

double CovarianceEstimate::pi_standard_error(int k) const {
  const Matrix v = variance();
  if (k == 0) {
    const auto block = v.bottomRightCorner(classes, classes);
    return std::sqrt(std::max(0.0, block.sum()));
  }
  const int i = pi_index(k);
  return std::sqrt(std::max(0.0, v(i, i)));
}

CovarianceEstimate plugin_covariance(const ElSolution& solution, const ElProblem& problem) {
  const Theta& theta = solution.theta;
  const int classes = problem.classes();
  const int p = problem.basis_size();
  const int dim_gamma = classes * p;
  if (theta.classes() != classes || theta.basis_size() != p) throw DimensionError("solution does not match the problem");
  if (solution.p.p.size() != problem.total() || solution.lambda.size() != classes) {
    throw DimensionError("solution weights or multipliers have the wrong length");
  }
  const Matrix& phi = problem.phi_e();
  const Vector& weights = solution.p.p;
  const Vector& lambda = solution.lambda;
  const Vector& pi = theta.pi;
  const double c = static_cast<double>(problem.m()) / problem.total();
  const Matrix s = density_ratios(phi, theta.gamma);

  CovarianceEstimate out;
  out.total = problem.total();
  out.classes = classes;
  out.basis_size = p;
  out.w11 = Matrix::Zero(dim_gamma, dim_gamma);
  out.w12 = Matrix::Zero(dim_gamma, classes);
  out.w13 = Matrix::Zero(dim_gamma, classes);
  out.w22 = Matrix::Zero(classes, classes);
  out.w23 = Matrix::Zero(classes, classes);
  out.w33 = Matrix::Zero(classes, classes);

  Vector q(classes);
  for (Eigen::Index i = 0; i < phi.rows(); ++i) {
    const auto f = phi.row(i).transpose();
    const Matrix ff = f * f.transpose();
    q = s.row(i).transpose().array() - 1.0;
    const double a = 1.0 + lambda.dot(q);
    const double b = 1.0 + pi.dot(q);
    const double w = weights(i);
    for (int k = 0; k < classes; ++k) {
      const double ls_k = lambda(k) * s(i, k);
      const double ps_k = pi(k) * s(i, k);
      for (int l = 0; l < classes; ++l) {
        const double ls_l = lambda(l) * s(i, l);
        const double ps_l = pi(l) * s(i, l);
        double coef = ls_k * ls_l / a - c * ps_k * ps_l / b;
        if (k == l) coef -= (lambda(k) - c * pi(k)) * s(i, k);
        out.w11.block(k * p, l * p, p, p) += w * coef * ff;

        double c12 = -c * ps_k * q(l) / b;
        double c13 = ls_k * q(l) / a;
        if (k == l) {
          c12 += c * s(i, k);
          c13 -= s(i, k);
        }
        out.w12.block(k * p, l, p, 1) += w * c12 * f;
        out.w13.block(k * p, l, p, 1) += w * c13 * f;
        out.w22(k, l) -= w * c * q(k) * q(l) / b;
        out.w33(k, l) += w * q(k) * q(l) / a;
      }
    }
  }

  const Eigen::FullPivLU<Matrix> lu33(out.w33);
  if (!lu33.isInvertible()) {
    throw DegenerateParameterError("plug-in W_33 is singular (some tilt is identically zero)");
  }
  const Matrix reduced = out.w11 - out.w13 * lu33.solve(out.w13.transpose());
  out.w_star.resize(dim_gamma + classes, dim_gamma + classes);
  out.w_star << reduced, out.w12, out.w12.transpose(), out.w22;
  out.w_star = -out.w_star;
  const double asym = (out.w_star - out.w_star.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-8 * (1.0 + out.w_star.cwiseAbs().maxCoeff())) {
    throw SolverError("plug-in W* is not symmetric");
  }
  out.w_star = 0.5 * (out.w_star + out.w_star.transpose());

  const Eigen::SelfAdjointEigenSolver<Matrix> eig(out.w_star, Eigen::EigenvaluesOnly);
  const Vector abs_ev = eig.eigenvalues().cwiseAbs();
  out.condition_number = abs_ev.minCoeff() > 0.0 ? abs_ev.maxCoeff() / abs_ev.minCoeff()
                                                 : std::numeric_limits<double>::infinity();
  if (!(out.condition_number < 1e14)) {
    std::ostringstream msg;
    msg << "plug-in W* is singular (condition number " << out.condition_number << ")";
    throw DegenerateParameterError(msg.str());
  }
  out.sigma = out.w_star.ldlt().solve(Matrix::Identity(out.w_star.rows(), out.w_star.cols()));
  out.sigma = 0.5 * (out.sigma + out.sigma.transpose());

  for (int k = 1; k <= classes; ++k) {
    out.names.push_back("alpha_" + std::to_string(k));
    for (int a = 1; a < p; ++a) out.names.push_back("beta_" + std::to_string(k) + "_" + std::to_string(a));
  }
  for (int k = 1; k <= classes; ++k) out.names.push_back("pi_" + std::to_string(k));
  return out;
}

ConfidenceInterval wald_interval(const CovarianceEstimate& covariance, const ElSolution& solution, int k,
                                 double level) {
  if (k < 0 || k > solution.theta.classes()) throw ValidationError("class index out of range");
  if (!(level > 0.0 && level < 1.0)) throw ValidationError("confidence level must lie in (0, 1)");
  const double z = boost::math::quantile(boost::math::normal_distribution<double>(), 0.5 + 0.5 * level);
  ConfidenceInterval ci;
  ci.k = k;
  ci.level = level;
  ci.estimate = solution.theta.proportion(k);
  const double half = z * covariance.pi_standard_error(k);
  ci.lower = ci.estimate - half;
  ci.upper = ci.estimate + half;
  if (ci.lower < 0.0) {
    ci.lower = 0.0;
    ci.lower_at_boundary = true;
  }
  if (ci.upper > 1.0) {
    ci.upper = 1.0;
    ci.upper_at_boundary = true;
  }
  return ci;
}

AssumptionReport assumption_diagnostics(const ElProblem& problem, const ElSolution* solution, double distance_tol) {
  AssumptionReport report;
  const Matrix& phi = problem.phi_e();
  const Matrix moment = phi.transpose() * phi / static_cast<double>(phi.rows());
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(moment, Eigen::EigenvaluesOnly);
  report.min_eigenvalue = eig.eigenvalues().minCoeff();
  report.max_eigenvalue = eig.eigenvalues().maxCoeff();
  report.rank_deficient = report.min_eigenvalue <= 1e-10 * std::max(1.0, report.max_eigenvalue);
  if (report.rank_deficient) {
    report.flags.push_back("second-moment matrix of the basis is singular (min eigenvalue " +
                           std::to_string(report.min_eigenvalue) + ")");
  }
  if (solution == nullptr) return report;

  const Matrix beta = solution->theta.gamma.rightCols(solution->theta.gamma.cols() - 1);
  for (Eigen::Index k = 0; k < beta.rows(); ++k) {
    report.beta_norms.push_back(beta.row(k).norm());
    if (report.beta_norms.back() < distance_tol) {
      report.flags.push_back("beta_" + std::to_string(k + 1) + " is near zero");
    }
  }
  for (Eigen::Index k = 0; k < beta.rows(); ++k) {
    for (Eigen::Index l = k + 1; l < beta.rows(); ++l) {
      const double d = (beta.row(k) - beta.row(l)).norm();
      report.beta_distances.push_back({{static_cast<int>(k + 1), static_cast<int>(l + 1)}, d});
      if (d < distance_tol) {
        report.flags.push_back("beta_" + std::to_string(k + 1) + " and beta_" + std::to_string(l + 1) +
                               " nearly coincide");
      }
    }
  }
  for (const auto& w : solution->warnings) {
    if (w.rfind("degenerate fit", 0) == 0) report.flags.push_back(w);
  }
  return report;
}

}  // namespace oslsel
