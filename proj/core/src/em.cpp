#include "oslsel/em.hpp"

#include "oslsel/drm.hpp"
#include "oslsel/errors.hpp"
#include "oslsel/parallel.hpp"
#include "oslsel/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>

namespace oslsel {

namespace {

// Largest |gamma' phi| EM accepts before it declares divergence.
constexpr double kMaxLinearPredictor = 500.0;
// EM iterations between polish attempts while EM crawls.
constexpr int kPolishRetry = 100;

}  // namespace

void EmConfig::validate() const {
  if (!(tol > 0.0)) throw ValidationError("EM tolerance must be positive");
  if (!(tight_param_tol > 0.0)) throw ValidationError("EM parameter tolerance must be positive");
  if (polish_max_steps < 0) throw ValidationError("polish_max_steps must be nonnegative");
  if (max_iter < 1) throw ValidationError("EM max_iter must be at least 1");
  if (n_starts < 1) throw ValidationError("EM n_starts must be at least 1");
  if (!(newton_tol > 0.0) || newton_max_iter < 1) throw ValidationError("invalid inner Newton controls");
  if (!(pi_floor >= 0.0) || pi_floor >= 0.5) throw ValidationError("pi_floor must lie in [0, 0.5)");
}

NewtonOptions EmConfig::newton() const {
  NewtonOptions options;
  options.tol = newton_tol;
  options.max_iter = newton_max_iter;
  return options;
}

double EmTrace::max_decrease() const {
  double worst = 0.0;
  for (std::size_t r = 1; r < records.size(); ++r) {
    worst = std::max(worst, records[r - 1].log_el - records[r].log_el);
  }
  return worst;
}

Matrix e_step(const Theta& theta, const Eigen::Ref<const Matrix>& test_phi_e) {
  theta.validate();
  const int classes = theta.classes();
  const Matrix ratios = density_ratios(test_phi_e, theta.gamma);
  const double pi0 = std::max(0.0, theta.pi0());
  Matrix w(test_phi_e.rows(), classes + 1);
  for (Eigen::Index j = 0; j < w.rows(); ++j) {
    double b = pi0;
    for (int k = 0; k < classes; ++k) b += theta.pi(k) * ratios(j, k);
    if (!(b > 0.0)) {
      throw DegenerateParameterError("mixture term B(x; theta) is not positive at test row " + std::to_string(j));
    }
    w(j, 0) = pi0 / b;
    for (int k = 0; k < classes; ++k) w(j, k + 1) = theta.pi(k) * ratios(j, k) / b;
  }
  return w;
}

Vector m_step_pi(const Eigen::Ref<const Matrix>& w) {
  if (w.rows() == 0) throw ValidationError("responsibility matrix has no rows");
  return w.rightCols(w.cols() - 1).colwise().mean().transpose();
}

namespace {

// Splits `remaining` over the classes in `share` (full 0..K indexing) in
// proportion to `mass`; classes with share=false are untouched.
void allocate(Vector& full, const Vector& mass, const std::vector<bool>& share, double remaining) {
  double total = 0.0;
  int count = 0;
  for (Eigen::Index l = 0; l < full.size(); ++l) {
    if (share[static_cast<std::size_t>(l)]) {
      total += mass(l);
      ++count;
    }
  }
  for (Eigen::Index l = 0; l < full.size(); ++l) {
    if (!share[static_cast<std::size_t>(l)]) continue;
    full(l) = total > 0.0 ? remaining * mass(l) / total : remaining / count;
  }
}

Vector constrained_proportions(const Vector& mass, int k, double value) {
  // mass is indexed 0..K; returns (pi_1..pi_K)
  const Eigen::Index classes = mass.size() - 1;
  Vector full = Vector::Zero(mass.size());
  std::vector<bool> share(static_cast<std::size_t>(mass.size()), true);
  share[static_cast<std::size_t>(k)] = false;
  full(k) = value;
  allocate(full, mass, share, 1.0 - value);
  return full.tail(classes);
}

void check_constraint(int classes, int k, double value) {
  if (k < 0 || k > classes) {
    throw ValidationError("constrained class index " + std::to_string(k) + " outside 0.." + std::to_string(classes));
  }
  if (!(value >= 0.0 && value <= 1.0)) {
    throw ValidationError("fixed proportion " + std::to_string(value) + " is outside [0, 1]");
  }
}

}  // namespace

Vector m_step_pi_fixed(const Eigen::Ref<const Matrix>& w, int k, double value) {
  check_constraint(static_cast<int>(w.cols()) - 1, k, value);
  const Vector sums = w.colwise().sum().transpose();
  return constrained_proportions(sums, k, value);
}

Vector logit_masses(const Eigen::Ref<const Matrix>& coef, const Eigen::Ref<const Matrix>& phi_e,
                    const std::vector<bool>& excluded) {
  if (coef.cols() != phi_e.cols()) throw DimensionError("coefficient blocks do not match the design");
  const Matrix eta = phi_e * coef.transpose();
  const double total_rows = static_cast<double>(phi_e.rows());
  Vector u(phi_e.rows());
  for (Eigen::Index i = 0; i < eta.rows(); ++i) {
    double shift = 0.0;
    for (Eigen::Index k = 0; k < eta.cols(); ++k) {
      if (!excluded.empty() && excluded[static_cast<std::size_t>(k)]) continue;
      shift = std::max(shift, eta(i, k));
    }
    double total = std::exp(-shift);
    for (Eigen::Index k = 0; k < eta.cols(); ++k) {
      if (!excluded.empty() && excluded[static_cast<std::size_t>(k)]) continue;
      total += std::exp(eta(i, k) - shift);
    }
    u(i) = std::exp(-shift) / total / total_rows;
  }
  return u;
}

ElWeights m_step_p(const Eigen::Ref<const Matrix>& coef, const Eigen::Ref<const Matrix>& phi_e,
                   const std::vector<bool>& excluded) {
  const Vector u = logit_masses(coef, phi_e, excluded);
  ElWeights weights;
  weights.p = u / u.sum();
  return weights;
}

GammaStep m_step_gamma(const Eigen::Ref<const Matrix>& w, const ElProblem& problem,
                       const Eigen::Ref<const Matrix>& start, const NewtonOptions& options) {
  const int classes = problem.classes();
  const int n = problem.n();
  const int m = problem.m();
  const Eigen::Index p = problem.basis_size();
  if (w.rows() != m || w.cols() != classes + 1) throw DimensionError("responsibility matrix has the wrong shape");
  if (start.rows() != classes || start.cols() != p) throw DimensionError("gamma start has the wrong shape");

  GammaStep step;
  step.class_weights.resize(classes + 1);
  const Vector test_sums = w.colwise().sum().transpose();
  for (int k = 0; k <= classes; ++k) step.class_weights(k) = problem.class_count(k) + test_sums(k);
  if (!(step.class_weights(0) > 0.0)) throw DegenerateParameterError("baseline class has zero effective weight");

  step.excluded.assign(static_cast<std::size_t>(classes), false);
  std::vector<int> active;
  for (int k = 1; k <= classes; ++k) {
    if (step.class_weights(k) > 1e-300) {
      active.push_back(k);
    } else {
      step.excluded[static_cast<std::size_t>(k - 1)] = true;
    }
  }

  step.gamma = start;
  step.coef = start;
  const auto& y = problem.dataset().train_y();
  if (!active.empty()) {
    const Eigen::Index a = static_cast<Eigen::Index>(active.size());
    Matrix targets = Matrix::Zero(problem.total(), a + 1);
    std::vector<int> column_of(static_cast<std::size_t>(classes + 1), -1);
    column_of[0] = 0;
    for (Eigen::Index c = 0; c < a; ++c) column_of[static_cast<std::size_t>(active[static_cast<std::size_t>(c)])] = static_cast<int>(c + 1);
    for (int i = 0; i < n; ++i) targets(i, column_of[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])]) = 1.0;
    targets.block(n, 0, m, 1) = w.col(0);
    Matrix coef_start(a, p);
    for (Eigen::Index c = 0; c < a; ++c) {
      const int k = active[static_cast<std::size_t>(c)];
      targets.block(n, c + 1, m, 1) = w.col(k);
      coef_start.row(c) = start.row(k - 1);
      coef_start(c, 0) += std::log(step.class_weights(k) / step.class_weights(0));
    }
    const MultinomialLogitResult fitres = fit_multinomial_logit(problem.phi_e(), targets, coef_start, options);
    step.iterations = fitres.iterations;
    step.gradient_norm = fitres.gradient_norm;
    for (Eigen::Index c = 0; c < a; ++c) {
      const int k = active[static_cast<std::size_t>(c)];
      step.coef.row(k - 1) = fitres.coef.row(c);
      step.gamma.row(k - 1) = fitres.coef.row(c);
      step.gamma(k - 1, 0) -= std::log(step.class_weights(k) / step.class_weights(0));
    }
  }
  if (static_cast<int>(active.size()) < classes) {
    // Excluded classes: keep beta, choose alpha so that sum_i p_i exp(gamma_k' phi_e) = 1.
    const ElWeights weights = m_step_p(step.coef, problem.phi_e(), step.excluded);
    for (int k = 1; k <= classes; ++k) {
      if (!step.excluded[static_cast<std::size_t>(k - 1)]) continue;
      Vector eta = problem.phi_e().rightCols(p - 1) * step.gamma.row(k - 1).tail(p - 1).transpose();
      const double shift = eta.maxCoeff();
      const double mass = (weights.p.array() * (eta.array() - shift).exp()).sum();
      step.gamma(k - 1, 0) = -(shift + std::log(mass));
      step.coef(k - 1, 0) = -std::numeric_limits<double>::infinity();
    }
  }
  return step;
}

double full_log_el(const Theta& theta, const ElWeights& weights, const ElProblem& problem) {
  const int m = problem.m();
  double test_term = 0.0;
  if (m > 0) {
    const Matrix ratios = density_ratios(problem.test_phi(), theta.gamma);
    const double pi0 = theta.pi0();
    for (int j = 0; j < m; ++j) {
      double b = pi0;
      for (int k = 0; k < theta.classes(); ++k) b += theta.pi(k) * ratios(j, k);
      if (!(b > 0.0)) throw DegenerateParameterError("mixture term B(x; theta) is not positive");
      test_term += std::log(b);
    }
  }
  const double n_total = static_cast<double>(problem.total());
  return labeled_log_term(theta.gamma, problem) + test_term + weights.p.array().log().sum() +
         n_total * std::log(n_total);
}

Theta project_onto_constraint(const Theta& theta, const ProportionConstraint& constraint) {
  Theta out = theta;
  switch (constraint.kind) {
    case ProportionConstraint::Kind::none:
      break;
    case ProportionConstraint::Kind::single: {
      check_constraint(theta.classes(), constraint.k, constraint.value);
      Vector mass = theta.proportions().cwiseMax(0.0);
      out.pi = constrained_proportions(mass, constraint.k, constraint.value);
      break;
    }
    case ProportionConstraint::Kind::all:
      if (constraint.fixed.size() != theta.classes()) throw DimensionError("fixed proportions have the wrong length");
      out.pi = constraint.fixed;
      break;
  }
  out.validate(1e-9);
  return out;
}

namespace {

Vector apply_floor(Vector pi, const ProportionConstraint& constraint, double floor, bool& boundary) {
  boundary = false;
  const Eigen::Index classes = pi.size();
  std::vector<bool> free(static_cast<std::size_t>(classes), constraint.kind != ProportionConstraint::Kind::all);
  double budget = 1.0;
  if (constraint.kind == ProportionConstraint::Kind::single) {
    budget = 1.0 - constraint.value;
    if (constraint.k > 0) {
      free[static_cast<std::size_t>(constraint.k - 1)] = false;
      budget = 1.0;  // pi_0 absorbs the rest
    }
  }
  double free_sum = 0.0;
  for (Eigen::Index k = 0; k < classes; ++k) {
    if (!free[static_cast<std::size_t>(k)]) continue;
    if (pi(k) <= floor) {
      pi(k) = floor;
      boundary = true;
    }
    free_sum += pi(k);
  }
  if (constraint.kind == ProportionConstraint::Kind::single && constraint.k == 0) {
    if (free_sum > 0.0) pi *= budget / free_sum;
  } else if (pi.sum() > 1.0) {
    const double fixed_sum = pi.sum() - free_sum;
    if (free_sum > 0.0) {
      const double scale = std::max(0.0, 1.0 - fixed_sum) / free_sum;
      for (Eigen::Index k = 0; k < classes; ++k) {
        if (free[static_cast<std::size_t>(k)]) pi(k) *= scale;
      }
    }
  }
  if (constraint.kind == ProportionConstraint::Kind::none && 1.0 - pi.sum() <= floor) boundary = true;
  return pi;
}

Vector update_proportions(const Matrix& w, const Theta& current, const ProportionConstraint& constraint) {
  switch (constraint.kind) {
    case ProportionConstraint::Kind::none: return m_step_pi(w);
    case ProportionConstraint::Kind::single: return m_step_pi_fixed(w, constraint.k, constraint.value);
    case ProportionConstraint::Kind::all: return current.pi;
  }
  return current.pi;
}

struct ProfileValue {
  LambdaSolution lambda;
  double log_el = 0.0;
};

ProfileValue profile_at(const Theta& theta, const ElProblem& problem) {
  ProfileValue out;
  out.lambda = solve_lambda(theta.gamma, problem);
  const Matrix q = ratio_minus_one(problem.phi_e(), theta.gamma);
  const Vector denominators = Vector::Ones(q.rows()) + q * out.lambda.lambda;
  const Vector b = Vector::Ones(problem.m()) + q.bottomRows(problem.m()) * theta.pi;
  if (!(b.minCoeff() > 0.0)) throw DegenerateParameterError("mixture term B(x; theta) is not positive");
  out.log_el = labeled_log_term(theta.gamma, problem) + b.array().log().sum() - denominators.array().log().sum();
  return out;
}

double parameter_change(const Theta& a, const Theta& b) {
  const double dpi = a.pi.size() > 0 ? (a.pi - b.pi).cwiseAbs().maxCoeff() : 0.0;
  const double scale = 1.0 + std::max(a.gamma.cwiseAbs().maxCoeff(), b.gamma.cwiseAbs().maxCoeff());
  const double dgamma = (a.gamma - b.gamma).cwiseAbs().maxCoeff() / scale;
  return std::max(dpi, dgamma);
}

}  // namespace

namespace {

// Directions in parameter space (gamma row by row, then pi) that keep the
// proportion constraint satisfied.
Matrix free_directions(int classes, Eigen::Index basis, const ProportionConstraint& constraint) {
  const Eigen::Index dim_gamma = classes * basis;
  std::vector<Vector> pi_dirs;
  auto unit = [&](int k) {
    Vector v = Vector::Zero(classes);
    v(k) = 1.0;
    return v;
  };
  switch (constraint.kind) {
    case ProportionConstraint::Kind::none:
      for (int k = 0; k < classes; ++k) pi_dirs.push_back(unit(k));
      break;
    case ProportionConstraint::Kind::single:
      if (constraint.k > 0) {
        for (int k = 0; k < classes; ++k) {
          if (k != constraint.k - 1) pi_dirs.push_back(unit(k));
        }
      } else {
        for (int k = 0; k + 1 < classes; ++k) pi_dirs.push_back(unit(k) - unit(classes - 1));
      }
      break;
    case ProportionConstraint::Kind::all:
      break;
  }
  Matrix t = Matrix::Zero(dim_gamma + classes, dim_gamma + static_cast<Eigen::Index>(pi_dirs.size()));
  t.topLeftCorner(dim_gamma, dim_gamma).setIdentity();
  for (std::size_t c = 0; c < pi_dirs.size(); ++c) {
    t.block(dim_gamma, dim_gamma + static_cast<Eigen::Index>(c), classes, 1) = pi_dirs[c];
  }
  return t;
}

Theta shifted(const Theta& theta, const Vector& delta) {
  Theta out = theta;
  const Eigen::Index p = theta.gamma.cols();
  for (int k = 0; k < theta.classes(); ++k) out.gamma.row(k) += delta.segment(k * p, p).transpose();
  out.pi += delta.tail(theta.classes());
  return out;
}

bool admissible(const Theta& theta) {
  return theta.gamma.allFinite() && theta.pi.allFinite() && (theta.pi.array() >= 0.0).all() &&
         theta.pi.sum() <= 1.0 + 1e-12;
}

// Proportions that may sit on the face pi = 0 during the polish; index 0 is
// pi_0, index k is pi_k.
std::vector<int> movable_proportions(int classes, const ProportionConstraint& constraint) {
  std::vector<int> out;
  switch (constraint.kind) {
    case ProportionConstraint::Kind::none:
      for (int k = 0; k <= classes; ++k) out.push_back(k);
      break;
    case ProportionConstraint::Kind::single:
      for (int k = 0; k <= classes; ++k) {
        if (k != constraint.k) out.push_back(k);
      }
      break;
    case ProportionConstraint::Kind::all:
      break;
  }
  return out;
}

double proportion_of(const Theta& theta, int k) { return k == 0 ? theta.pi0() : theta.pi(k - 1); }

// Change in proportion k along a full parameter direction.
double proportion_rate(const Vector& delta, Eigen::Index dim_gamma, int classes, int k) {
  return k == 0 ? -delta.segment(dim_gamma, classes).sum() : delta(dim_gamma + k - 1);
}

// Columns of `base` restricted to directions that keep every face in `faces` fixed.
Matrix restricted_directions(const Matrix& base, Eigen::Index dim_gamma, int classes, const std::vector<int>& faces) {
  if (faces.empty() || base.cols() == 0) return base;
  Matrix c = Matrix::Zero(static_cast<Eigen::Index>(faces.size()), base.rows());
  for (std::size_t f = 0; f < faces.size(); ++f) {
    const auto row = static_cast<Eigen::Index>(f);
    if (faces[f] == 0) {
      c.block(row, dim_gamma, 1, classes).setOnes();
    } else {
      c(row, dim_gamma + faces[f] - 1) = 1.0;
    }
  }
  const Matrix m = c * base;
  const Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeFullV);
  const Vector& sv = svd.singularValues();
  const double cut = 1e-12 * std::max(1.0, sv.size() > 0 ? sv(0) : 0.0);
  Eigen::Index rank = 0;
  while (rank < sv.size() && sv(rank) > cut) ++rank;
  return base * svd.matrixV().rightCols(base.cols() - rank);
}

// Newton ascent on the profile log-EL along the constraint set, with an
// active set for proportions that reach zero. Returns true when the Newton
// decrement drops below the threshold and no active face wants to open.
bool polish_profile(const ElProblem& problem, const ProportionConstraint& constraint, int max_steps, Theta& theta,
                    int& steps) {
  steps = 0;
  const int classes = theta.classes();
  const Eigen::Index dim_gamma = classes * theta.gamma.cols();
  const Matrix base = free_directions(classes, theta.gamma.cols(), constraint);
  const std::vector<int> movable = movable_proportions(classes, constraint);
  // pi_0 pinned: the known proportions must keep their total.
  const bool keep_total = constraint.kind == ProportionConstraint::Kind::single && constraint.k == 0;
  const double total = theta.pi.sum();
  std::vector<int> faces;
  for (int k : movable) {
    if (proportion_of(theta, k) > 1e-8) continue;
    if (k > 0) theta.pi(k - 1) = 0.0;
    faces.push_back(k);
  }
  if (std::find(faces.begin(), faces.end(), 0) != faces.end() && theta.pi.sum() > 0.0) theta.pi /= theta.pi.sum();
  if (keep_total && theta.pi.sum() > 0.0) theta.pi *= total / theta.pi.sum();
  if (!admissible(theta)) return false;
  try {
    ProfileDerivatives d = profile_derivatives(theta, problem);
    for (int it = 0; it < max_steps; ++it) {
      const Matrix t = restricted_directions(base, dim_gamma, classes, faces);
      const Vector g = t.transpose() * d.gradient;
      const Matrix neg_h = -(t.transpose() * d.hessian * t);
      const Eigen::LLT<Matrix> llt(neg_h);
      const bool regularized = llt.info() != Eigen::Success;
      Vector step;
      if (!regularized) {
        step = llt.solve(g);
      } else {
        // Not locally concave: Newton on absolute curvatures.
        const Eigen::SelfAdjointEigenSolver<Matrix> eig(neg_h);
        if (eig.info() != Eigen::Success) return false;
        const double floor = 1e-8 * (1.0 + eig.eigenvalues().cwiseAbs().maxCoeff());
        const Vector inv = eig.eigenvalues().cwiseAbs().cwiseMax(floor).cwiseInverse();
        step = eig.eigenvectors() * inv.asDiagonal() * (eig.eigenvectors().transpose() * g);
      }
      const double decrement = g.dot(step);
      if (!std::isfinite(decrement)) return false;
      if (decrement < 1e-13 && (!regularized || g.norm() < 1e-8 * (1.0 + std::abs(d.value)))) {
        // Open the face whose projected gradient points most into the interior.
        int open = -1;
        double best_rate = 1e-9 * (1.0 + std::abs(d.value));
        for (std::size_t f = 0; f < faces.size(); ++f) {
          std::vector<int> rest = faces;
          rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(f));
          const Matrix tr = restricted_directions(base, dim_gamma, classes, rest);
          const Vector ascent = tr * (tr.transpose() * d.gradient);
          const double rate = proportion_rate(ascent, dim_gamma, classes, faces[f]);
          if (rate > best_rate) best_rate = rate, open = static_cast<int>(f);
        }
        if (open < 0) {
          // Last full step clears gradient left in stiff directions.
          if (!regularized) {
            const Theta trial = shifted(theta, t * step);
            if (admissible(trial)) {
              try {
                if (profile_at(trial, problem).log_el >= d.value - 1e-12 * (1.0 + std::abs(d.value))) theta = trial;
              } catch (const SolverError&) {
              }
            }
          }
          return true;
        }
        faces.erase(faces.begin() + open);
        continue;
      }
      const Vector delta = t * step;
      double limit = 1.0;
      int hit = -1;
      for (int k : movable) {
        if (std::find(faces.begin(), faces.end(), k) != faces.end()) continue;
        const double rate = proportion_rate(delta, dim_gamma, classes, k);
        if (rate < 0.0 && -proportion_of(theta, k) / rate < limit) {
          limit = -proportion_of(theta, k) / rate;
          hit = k;
        }
      }
      double size = limit;
      bool moved = false;
      for (int halvings = 0; halvings < 40; ++halvings, size *= 0.5) {
        Theta trial = shifted(theta, size * delta);
        const bool on_face = hit >= 0 && halvings == 0;
        if (on_face && hit > 0) trial.pi(hit - 1) = 0.0;
        if (on_face && hit == 0) trial.pi /= trial.pi.sum();
        if (on_face && keep_total) trial.pi *= total / trial.pi.sum();
        if (!admissible(trial)) continue;
        try {
          ProfileDerivatives next = profile_derivatives(trial, problem);
          if (next.value >= d.value - 1e-12 * (1.0 + std::abs(d.value))) {
            theta = trial;
            d = std::move(next);
            moved = true;
            if (on_face) faces.push_back(hit);
            break;
          }
        } catch (const SolverError&) {
        }
      }
      ++steps;
      if (!moved) return false;
    }
  } catch (const SolverError&) {
    return false;
  }
  return false;
}

}  // namespace

ElSolution run_em(const ElProblem& problem, const EmConfig& config, const Theta& start,
                  const ProportionConstraint& constraint, int start_index, EmTrace* partial) {
  config.validate();
  if (problem.m() < 1) throw ValidationError("EM needs at least one test observation");
  if (start.classes() != problem.classes() || start.basis_size() != problem.basis_size()) {
    throw DimensionError("starting theta does not match the problem");
  }
  const NewtonOptions newton = config.newton();

  ElSolution solution;
  solution.start_index = start_index;
  Theta theta = project_onto_constraint(start, constraint);
  double previous = -std::numeric_limits<double>::infinity();
  bool boundary = false;
  bool refine = false;
  int refine_start = 0;
  for (int r = 1; r <= config.max_iter; ++r) {
    const Matrix w = e_step(theta, problem.test_phi());
    Vector pi = apply_floor(update_proportions(w, theta, constraint), constraint, config.pi_floor, boundary);
    const GammaStep gstep = m_step_gamma(w, problem, theta.gamma, newton);
    const double reach = (problem.phi_e() * gstep.gamma.transpose()).cwiseAbs().maxCoeff();
    if (!(reach <= kMaxLinearPredictor)) {
      throw NonConvergenceError("EM tilts diverging at iteration " + std::to_string(r) + " (|gamma' phi| reaches " +
                                std::to_string(reach) + ")");
    }
    const ElWeights weights = m_step_p(gstep.coef, problem.phi_e(), gstep.excluded);

    Theta next{gstep.gamma, std::move(pi)};
    const double value = full_log_el(next, weights, problem);
    if (!std::isfinite(value)) {
      throw NonConvergenceError("EM log-EL is no longer finite at iteration " + std::to_string(r) +
                                " (tilts diverging)");
    }
    solution.trace.records.push_back({r, value, next.pi, gstep.iterations});
    if (partial != nullptr) partial->records.push_back(solution.trace.records.back());
    const double pi_change = next.pi.size() > 0 ? (next.pi - theta.pi).cwiseAbs().maxCoeff() : 0.0;
    const double change = parameter_change(next, theta);
    theta = std::move(next);
    solution.iterations = r;
    if (r < 2) {
      previous = value;
      continue;
    }
    const double increase = value - previous;
    previous = value;
    auto try_polish = [&] {
      if (!config.polish) return false;
      Theta candidate = theta;
      int steps = 0;
      bool ok = polish_profile(problem, constraint, config.polish_max_steps, candidate, steps);
      solution.polish_steps += steps;
      if (ok) {
        try {
          ok = profile_at(candidate, problem).log_el >= profile_at(theta, problem).log_el - 1e-9 * (1.0 + std::abs(value));
        } catch (const SolverError&) {
          ok = false;
        }
      }
      if (ok) {
        theta = candidate;
        solution.polished = true;
      }
      return ok;
    };
    if (!refine) {
      if (increase >= config.tol && pi_change >= config.tol / 10.0) {
        if (r % kPolishRetry == 0 && try_polish()) {
          solution.converged = true;
          break;
        }
        continue;
      }
      solution.converged = true;
      if (try_polish()) break;
      refine = true;
      refine_start = r;
    } else if (increase < config.tol * 1e-3 && change < config.tight_param_tol) {
      break;
    } else if ((r - refine_start) % kPolishRetry == 0 && try_polish()) {
      break;
    } else if (r == config.max_iter) {
      solution.converged = false;
    }
  }

  solution.theta = theta;
  solution.boundary = boundary;
  ProfileValue profile = profile_at(theta, problem);
  solution.lambda = profile.lambda.lambda;
  solution.lambda_residual = profile.lambda.residual_norm;
  solution.log_el = profile.log_el;
  solution.p = el_weights(theta.gamma, solution.lambda, problem.phi_e());
  solution.w = e_step(theta, problem.test_phi());
  if (!solution.converged) {
    solution.warnings.push_back("EM reached max_iter=" + std::to_string(config.max_iter) + " before converging");
  }
  if (boundary) solution.warnings.push_back("a mixture proportion sits on the boundary floor");
  return solution;
}

Theta initial_theta(const ElProblem& problem, const EmConfig& config, int start_index) {
  const int classes = problem.classes();
  const Eigen::Index p = problem.basis_size();
  const int n = problem.n();
  Theta theta;
  theta.gamma = Matrix::Zero(classes, p);
  theta.pi = Vector::Constant(classes, 1.0 / (classes + 1));

  if (classes >= 2) {
    Matrix targets = Matrix::Zero(n, classes);
    const auto& y = problem.dataset().train_y();
    for (int i = 0; i < n; ++i) targets(i, y[static_cast<std::size_t>(i)]) = 1.0;
    try {
      const auto res = fit_multinomial_logit(problem.train_phi(), targets, Matrix::Zero(classes - 1, p),
                                             config.newton());
      for (int k = 1; k < classes; ++k) {
        theta.gamma.row(k - 1) = res.coef.row(k - 1);
        theta.gamma(k - 1, 0) -= std::log(static_cast<double>(problem.class_count(k)) / problem.class_count(0));
      }
    } catch (const SolverError&) {
      // separated training classes: fall back to zero tilts
    }
  }

  RandomStream rng(config.seed, static_cast<std::uint64_t>(start_index));
  Vector beta = Vector::Zero(p - 1);
  if (classes >= 2) beta = theta.gamma.topRows(classes - 1).rightCols(p - 1).colwise().mean().transpose();
  const double scale = start_index == 0 ? 0.1 : 1.0;
  beta += scale * rng.normal_vector(p - 1);

  // Intercept that makes the novel-class density integrate to one against
  // the empirical distribution of training class 0.
  const auto& y = problem.dataset().train_y();
  std::vector<double> eta;
  for (int i = 0; i < n; ++i) {
    if (y[static_cast<std::size_t>(i)] == 0) eta.push_back(problem.phi_e().row(i).tail(p - 1).dot(beta));
  }
  const double shift = *std::max_element(eta.begin(), eta.end());
  double mass = 0.0;
  for (double e : eta) mass += std::exp(e - shift);
  mass /= static_cast<double>(eta.size());
  theta.gamma(classes - 1, 0) = -(shift + std::log(mass));
  theta.gamma.row(classes - 1).tail(p - 1) = beta.transpose();

  if (start_index > 0) {
    Vector draw(classes + 1);
    for (int k = 0; k <= classes; ++k) draw(k) = 0.02 - std::log(rng.uniform_open_low());
    draw /= draw.sum();
    theta.pi = draw.tail(classes);
  }
  return theta;
}

namespace {

ElSolution best_of_starts(const ElProblem& problem, const EmConfig& config, const ProportionConstraint& constraint) {
  const auto starts = static_cast<std::size_t>(config.n_starts);
  std::vector<std::optional<ElSolution>> results(starts);
  std::vector<std::string> errors(starts);
  parallel_for(starts, config.threads, [&](std::size_t s) {
    try {
      const Theta start = initial_theta(problem, config, static_cast<int>(s));
      results[s] = run_em(problem, config, start, constraint, static_cast<int>(s));
    } catch (const SolverError& e) {
      errors[s] = e.what();
    }
  });
  std::optional<std::size_t> best;
  for (std::size_t s = 0; s < starts; ++s) {
    if (!results[s]) continue;
    if (!best || results[s]->log_el > results[*best]->log_el) best = s;
  }
  if (!best) {
    std::ostringstream msg;
    msg << "all " << starts << " EM starts failed:";
    for (std::size_t s = 0; s < starts; ++s) msg << " [start " << s << "] " << errors[s] << ";";
    throw NonConvergenceError(msg.str());
  }
  ElSolution out = std::move(*results[*best]);
  for (std::size_t s = 0; s < starts; ++s) {
    if (!errors[s].empty()) out.warnings.push_back("start " + std::to_string(s) + " failed: " + errors[s]);
  }
  return out;
}

void flag_degenerate(ElSolution& solution, const ElProblem& problem) {
  const Matrix beta = solution.theta.gamma.rightCols(solution.theta.gamma.cols() - 1);
  const int classes = static_cast<int>(beta.rows());
  const double q = static_cast<double>(beta.cols());
  const Vector sums = solution.w.colwise().sum().transpose();
  auto effective = [&](int k) { return std::max(problem.class_count(k) + sums(k), 1.0); };
  // Four standard errors of a difference of class means, per coordinate.
  auto noise = [&](int k, int l) { return 4.0 * std::sqrt(q * (1.0 / effective(k) + 1.0 / effective(l))); };
  for (int k = 1; k <= classes; ++k) {
    if (beta.row(k - 1).norm() < noise(0, k)) {
      solution.warnings.push_back("degenerate fit: beta_" + std::to_string(k) +
                                  " is within sampling noise of zero (class indistinguishable from baseline)");
    }
    for (int l = k + 1; l <= classes; ++l) {
      if ((beta.row(k - 1) - beta.row(l - 1)).norm() < noise(k, l)) {
        solution.warnings.push_back("degenerate fit: beta_" + std::to_string(k) + " and beta_" +
                                    std::to_string(l) + " are within sampling noise of each other");
      }
    }
  }
}

}  // namespace

ElSolution fit(const ElProblem& problem, const EmConfig& config) {
  config.validate();
  ElSolution out = best_of_starts(problem, config, ProportionConstraint::free());
  flag_degenerate(out, problem);
  return out;
}

ElSolution fit(const OslsDataset& dataset, const BasisSpec& basis, const EmConfig& config) {
  return fit(ElProblem(dataset, basis), config);
}

ElSolution fit_with_fixed_pi(const ElProblem& problem, const EmConfig& config, int k, double value,
                             const std::optional<Theta>& warm_start) {
  config.validate();
  check_constraint(problem.classes(), k, value);
  const auto constraint = ProportionConstraint::single_class(k, value);
  if (warm_start) return run_em(problem, config, *warm_start, constraint, 0);
  return best_of_starts(problem, config, constraint);
}

ElSolution fit_with_fixed_proportions(const ElProblem& problem, const EmConfig& config, const Vector& pi,
                                      const std::optional<Theta>& warm_start) {
  config.validate();
  if (pi.size() != problem.classes()) throw DimensionError("fixed proportions have the wrong length");
  if ((pi.array() < 0.0).any() || pi.sum() > 1.0 + 1e-12) {
    throw ValidationError("fixed proportions must be nonnegative and sum to at most one");
  }
  const auto constraint = ProportionConstraint::all_classes(pi);
  if (warm_start) return run_em(problem, config, *warm_start, constraint, 0);
  return best_of_starts(problem, config, constraint);
}

SolutionDiagnostics worst_of(const SolutionDiagnostics& a, const SolutionDiagnostics& b) {
  SolutionDiagnostics d;
  d.weight_sum_error = std::max(a.weight_sum_error, b.weight_sum_error);
  d.ratio_constraint_error = std::max(a.ratio_constraint_error, b.ratio_constraint_error);
  d.lambda_residual = std::max(a.lambda_residual, b.lambda_residual);
  d.lambda_identity_error = std::max(a.lambda_identity_error, b.lambda_identity_error);
  d.pi_fixed_point_error = std::max(a.pi_fixed_point_error, b.pi_fixed_point_error);
  return d;
}

SolutionDiagnostics check_solution(const ElSolution& solution, const ElProblem& problem, bool proportions_free) {
  SolutionDiagnostics d;
  const Vector& p = solution.p.p;
  d.weight_sum_error = std::abs(p.sum() - 1.0);
  const Matrix q = ratio_minus_one(problem.phi_e(), solution.theta.gamma);
  d.ratio_constraint_error = (q.transpose() * p).cwiseAbs().maxCoeff();
  d.lambda_residual = solution.lambda_residual;
  const Vector test_sums = solution.w.colwise().sum().transpose();
  const double n_total = static_cast<double>(problem.total());
  for (int k = 1; k <= problem.classes(); ++k) {
    const double expected = (problem.class_count(k) + test_sums(k)) / n_total;
    d.lambda_identity_error = std::max(d.lambda_identity_error, std::abs(solution.lambda(k - 1) - expected));
  }
  if (proportions_free) {
    const Vector mean_w = m_step_pi(solution.w);
    d.pi_fixed_point_error = (solution.theta.pi - mean_w).cwiseAbs().maxCoeff();
  }
  return d;
}

}  // namespace oslsel
