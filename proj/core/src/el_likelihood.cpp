#include "oslsel/el_likelihood.hpp"

#include "oslsel/drm.hpp"
#include "oslsel/errors.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace oslsel {

ElProblem::ElProblem(OslsDataset dataset, BasisSpec basis)
    : dataset_(std::move(dataset)), basis_(basis) {
  basis_.validate();
  if (basis_.input_dim != dataset_.dim()) {
    throw DimensionError("basis expects " + std::to_string(basis_.input_dim) + " features, dataset has " +
                         std::to_string(dataset_.dim()));
  }
  phi_e_.resize(dataset_.total(), basis_.q() + 1);
  phi_e_.topRows(dataset_.n()) = expand_rows(dataset_.train_x(), basis_);
  if (dataset_.m() > 0) {
    phi_e_.bottomRows(dataset_.m()) = expand_rows(dataset_.test_x(), basis_);
  }
  labeled_sums_ = Matrix::Zero(dataset_.k_known(), phi_e_.cols());
  const auto& y = dataset_.train_y();
  for (int i = 0; i < dataset_.n(); ++i) {
    if (y[static_cast<std::size_t>(i)] > 0) {
      labeled_sums_.row(y[static_cast<std::size_t>(i)] - 1) += phi_e_.row(i);
    }
  }
}

Matrix ratio_minus_one(const Eigen::Ref<const Matrix>& phi_e, const Eigen::Ref<const Matrix>& gamma) {
  Matrix q = density_ratios(phi_e, gamma);
  q.array() -= 1.0;
  return q;
}

namespace {

struct DualState {
  Vector denominators;
  double value = 0.0;
  bool feasible = false;
};

DualState evaluate_dual(const Matrix& q, const Vector& lambda) {
  DualState state;
  state.denominators = Vector::Ones(q.rows()) + q * lambda;
  if ((state.denominators.array() <= 0.0).any()) return state;
  state.feasible = true;
  state.value = state.denominators.array().log().sum();
  return state;
}

}  // namespace

LambdaSolution solve_lambda(const Eigen::Ref<const Matrix>& gamma, const Eigen::Ref<const Matrix>& phi_e,
                            const LambdaOptions& options) {
  const Matrix q_full = ratio_minus_one(phi_e, gamma);
  const Eigen::Index n_obs = q_full.rows();
  const Eigen::Index k_full = q_full.cols();
  if (n_obs == 0) throw ValidationError("cannot solve the multiplier system on an empty sample");

  // Columns that vanish identically carry no constraint.
  std::vector<Eigen::Index> active;
  for (Eigen::Index k = 0; k < k_full; ++k) {
    const auto col = q_full.col(k);
    if (col.cwiseAbs().maxCoeff() == 0.0) continue;
    if ((col.array() >= 0.0).all() || (col.array() <= 0.0).all()) {
      throw InfeasibleLambdaError("ratio column " + std::to_string(k + 1) +
                                      " is one-signed: zero is not inside the convex hull, no interior root",
                                  -1, 0.0);
    }
    active.push_back(k);
  }

  LambdaSolution solution;
  solution.lambda = Vector::Zero(k_full);
  const auto finish = [&](const Vector& denominators) {
    Eigen::Index idx = 0;
    solution.min_denominator = denominators.minCoeff(&idx);
    solution.min_index = static_cast<int>(idx);
  };
  if (active.empty()) {
    solution.residual_norm = 0.0;
    finish(Vector::Ones(n_obs));
    return solution;
  }

  const Eigen::Index k_active = static_cast<Eigen::Index>(active.size());
  Matrix q(n_obs, k_active);
  for (Eigen::Index j = 0; j < k_active; ++j) q.col(j) = q_full.col(active[static_cast<std::size_t>(j)]);

  const double inv_n = 1.0 / static_cast<double>(n_obs);
  Vector lambda = Vector::Zero(k_active);
  DualState state = evaluate_dual(q, lambda);
  for (int iter = 0; iter < options.max_iter; ++iter) {
    const Vector inv_a = state.denominators.cwiseInverse();
    const Vector grad = q.transpose() * inv_a;
    solution.residual_norm = grad.cwiseAbs().maxCoeff() * inv_n;
    solution.iterations = iter;
    if (solution.residual_norm < options.tol) break;

    const Matrix weighted = q.array().colwise() * inv_a.array();
    Matrix info = weighted.transpose() * weighted;  // -Hessian
    Eigen::LDLT<Matrix> ldlt(info);
    Vector step;
    double ridge = 0.0;
    for (int attempt = 0; attempt < 30; ++attempt) {
      if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
        step = ldlt.solve(grad);
        if (step.allFinite()) break;
      }
      ridge = ridge == 0.0 ? 1e-12 * (1.0 + info.diagonal().maxCoeff()) : ridge * 10.0;
      ldlt.compute(info + ridge * Matrix::Identity(k_active, k_active));
      step.resize(0);
    }
    if (step.size() == 0) throw NonConvergenceError("multiplier Newton system is singular");

    const double slope = grad.dot(step);
    double t = 1.0;
    bool accepted = false;
    DualState trial;
    for (int halving = 0; halving < 80; ++halving) {
      const Vector candidate = lambda + t * step;
      trial = evaluate_dual(q, candidate);
      if (trial.feasible && trial.value >= state.value + 1e-4 * t * slope - 1e-12 * std::abs(state.value)) {
        lambda = candidate;
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      // Stalled at rounding level; accept the current point if it is close.
      if (solution.residual_norm < 1e3 * options.tol) break;
      Eigen::Index idx = 0;
      const double amin = state.denominators.minCoeff(&idx);
      throw InfeasibleLambdaError("multiplier line search stalled near the feasibility boundary (min A_i = " +
                                      std::to_string(amin) + " at observation " + std::to_string(idx) + ")",
                                  static_cast<int>(idx), amin);
    }
    state = std::move(trial);
    if (lambda.cwiseAbs().maxCoeff() > 1e12) {
      Eigen::Index idx = 0;
      const double amin = state.denominators.minCoeff(&idx);
      throw InfeasibleLambdaError("multipliers diverge: no interior root of the multiplier system (min A_i = " +
                                      std::to_string(amin) + " at observation " + std::to_string(idx) + ")",
                                  static_cast<int>(idx), amin);
    }
  }
  {
    const Vector grad = q.transpose() * state.denominators.cwiseInverse();
    solution.residual_norm = grad.cwiseAbs().maxCoeff() * inv_n;
  }
  if (!(solution.residual_norm < 1e3 * options.tol)) {
    throw NonConvergenceError("multiplier system did not converge (residual " +
                              std::to_string(solution.residual_norm) + ")");
  }
  for (Eigen::Index j = 0; j < k_active; ++j) solution.lambda(active[static_cast<std::size_t>(j)]) = lambda(j);
  finish(state.denominators);
  return solution;
}

LambdaSolution solve_lambda(const Eigen::Ref<const Matrix>& gamma, const ElProblem& problem,
                            const LambdaOptions& options) {
  return solve_lambda(gamma, problem.phi_e(), options);
}

ElWeights el_weights(const Eigen::Ref<const Matrix>& gamma, const Eigen::Ref<const Vector>& lambda,
                     const Eigen::Ref<const Matrix>& phi_e) {
  if (lambda.size() != gamma.rows()) {
    throw DimensionError("lambda has " + std::to_string(lambda.size()) + " entries, gamma has " +
                         std::to_string(gamma.rows()) + " blocks");
  }
  const Matrix q = ratio_minus_one(phi_e, gamma);
  const Vector denominators = Vector::Ones(q.rows()) + q * lambda;
  Eigen::Index idx = 0;
  const double amin = denominators.minCoeff(&idx);
  if (!(amin > 0.0)) {
    throw InfeasibleLambdaError("lambda is infeasible: A_i <= 0 at observation " + std::to_string(idx),
                                static_cast<int>(idx), amin);
  }
  ElWeights weights;
  weights.p = denominators.cwiseInverse() / static_cast<double>(q.rows());
  return weights;
}

double labeled_log_term(const Eigen::Ref<const Matrix>& gamma, const ElProblem& problem) {
  return (gamma.array() * problem.labeled_sums().array()).sum();
}

double profile_log_el(const Theta& theta, const ElProblem& problem, const LambdaOptions& options) {
  theta.validate();
  if (theta.classes() != problem.classes() || theta.basis_size() != problem.basis_size()) {
    throw DimensionError("theta shape does not match the problem");
  }
  const LambdaSolution lambda = solve_lambda(theta.gamma, problem, options);
  const Matrix q = ratio_minus_one(problem.phi_e(), theta.gamma);
  const Vector denominators = Vector::Ones(q.rows()) + q * lambda.lambda;

  double test_term = 0.0;
  if (problem.m() > 0) {
    const Vector b = Vector::Ones(problem.m()) + q.bottomRows(problem.m()) * theta.pi;
    if (!(b.minCoeff() > 0.0)) {
      throw DegenerateParameterError("mixture term B(x; theta) is not positive on the test sample");
    }
    test_term = b.array().log().sum();
  }
  return labeled_log_term(theta.gamma, problem) + test_term - denominators.array().log().sum();
}

EmpiricalCdf::EmpiricalCdf(int k, Matrix support, Vector masses)
    : k_(k), support_(std::move(support)), masses_(std::move(masses)) {
  if (support_.rows() != masses_.size()) {
    throw DimensionError("cdf support and masses disagree in length");
  }
  if ((masses_.array() < 0.0).any()) throw ValidationError("cdf masses must be nonnegative");
}

double EmpiricalCdf::evaluate(const Eigen::Ref<const Vector>& x) const {
  if (x.size() != support_.cols()) throw DimensionError("cdf evaluation point has the wrong dimension");
  double total = 0.0;
  for (Eigen::Index i = 0; i < support_.rows(); ++i) {
    if ((support_.row(i).transpose().array() <= x.array()).all()) total += masses_(i);
  }
  return total;
}

double EmpiricalCdf::evaluate_coordinate(int coordinate, double t) const {
  if (coordinate < 0 || coordinate >= support_.cols()) throw DimensionError("cdf coordinate out of range");
  double total = 0.0;
  for (Eigen::Index i = 0; i < support_.rows(); ++i) {
    if (support_(i, coordinate) <= t) total += masses_(i);
  }
  return total;
}

EmpiricalCdf fitted_cdf(const Theta& theta, const ElWeights& weights, const ElProblem& problem, int k) {
  if (k < 0 || k > theta.classes()) throw ValidationError("class index out of range");
  if (weights.p.size() != problem.total()) throw DimensionError("weights do not match the problem size");
  const auto& data = problem.dataset();
  Matrix support(problem.total(), data.dim());
  support.topRows(data.n()) = data.train_x();
  if (data.m() > 0) support.bottomRows(data.m()) = data.test_x();
  Vector masses = weights.p;
  if (k > 0) {
    const Vector eta = problem.phi_e() * theta.gamma.row(k - 1).transpose();
    masses.array() *= eta.unaryExpr([](double t) { return clamped_exp(t); }).array();
  }
  return EmpiricalCdf(k, std::move(support), std::move(masses));
}

}  // namespace oslsel

namespace oslsel {

ProfileDerivatives profile_derivatives(const Theta& theta, const ElProblem& problem, const LambdaOptions& options) {
  theta.validate();
  if (theta.classes() != problem.classes() || theta.basis_size() != problem.basis_size()) {
    throw DimensionError("theta shape does not match the problem");
  }
  const int classes = problem.classes();
  const Eigen::Index p = problem.basis_size();
  const Eigen::Index dim_gamma = classes * p;
  const Eigen::Index dim = dim_gamma + classes;
  const int n = problem.n();
  const int m = problem.m();
  const Matrix& phi = problem.phi_e();

  ProfileDerivatives out;
  out.lambda = solve_lambda(theta.gamma, problem, options);
  const Vector& lambda = out.lambda.lambda;
  const Matrix q = ratio_minus_one(phi, theta.gamma);
  const Matrix r = q.array() + 1.0;
  const Vector a = Vector::Ones(q.rows()) + q * lambda;
  const Vector b = Vector::Ones(m) + q.bottomRows(m) * theta.pi;
  if (m > 0 && !(b.minCoeff() > 0.0)) {
    throw DegenerateParameterError("mixture term B(x; theta) is not positive on the test sample");
  }
  out.value = labeled_log_term(theta.gamma, problem) + b.array().log().sum() - a.array().log().sum();

  // Joint derivatives of G(theta, lambda); blocks: theta x theta, theta x lambda, lambda x lambda.
  Vector g = Vector::Zero(dim);
  Matrix h = Matrix::Zero(dim, dim);
  Matrix h_tl = Matrix::Zero(dim, classes);
  Matrix h_ll = Matrix::Zero(classes, classes);
  for (int k = 0; k < classes; ++k) g.segment(k * p, p) = problem.labeled_sums().row(k).transpose();

  Vector u(classes);
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const auto f = phi.row(i).transpose();
    const Matrix ff = f * f.transpose();
    const double ai = a(i);
    // -log A_i
    for (int k = 0; k < classes; ++k) u(k) = lambda(k) * r(i, k) / ai;
    for (int k = 0; k < classes; ++k) {
      g.segment(k * p, p) -= u(k) * f;
      h.block(k * p, k * p, p, p) -= u(k) * ff;
      for (int l = 0; l < classes; ++l) {
        h.block(k * p, l * p, p, p) += u(k) * u(l) * ff;
        const double cross = (k == l ? r(i, k) / ai : 0.0) - u(k) * q(i, l) / ai;
        h_tl.block(k * p, l, p, 1) -= cross * f;
        h_ll(k, l) += q(i, k) * q(i, l) / (ai * ai);
      }
    }
    if (i < n) continue;
    // +log B_j
    const Eigen::Index j = i - n;
    const double bj = b(j);
    for (int k = 0; k < classes; ++k) u(k) = theta.pi(k) * r(i, k) / bj;
    for (int k = 0; k < classes; ++k) {
      g.segment(k * p, p) += u(k) * f;
      g(dim_gamma + k) += q(i, k) / bj;
      h.block(k * p, k * p, p, p) += u(k) * ff;
      for (int l = 0; l < classes; ++l) {
        h.block(k * p, l * p, p, p) -= u(k) * u(l) * ff;
        const double cross = (k == l ? r(i, k) / bj : 0.0) - u(k) * q(i, l) / bj;
        h.block(k * p, dim_gamma + l, p, 1) += cross * f;
        h(dim_gamma + k, dim_gamma + l) -= q(i, k) * q(i, l) / (bj * bj);
      }
    }
  }
  h.block(dim_gamma, 0, classes, dim_gamma) = h.block(0, dim_gamma, dim_gamma, classes).transpose();

  out.gradient = g;
  const Eigen::LDLT<Matrix> ll(h_ll);
  out.hessian = h - h_tl * ll.solve(h_tl.transpose());
  return out;
}

}  // namespace oslsel
