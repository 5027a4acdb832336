#pragma once

#include "oslsel/el_likelihood.hpp"
#include "oslsel/rng.hpp"
#include "oslsel/types.hpp"

#include <boost/math/tools/minima.hpp>
#include <gsl/gsl_multimin.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace oslsel::test {

/// Gaussian classes with means spread along the axes; class k = K is novel.
inline OslsDataset random_dataset(std::uint64_t seed, int k_known, int d, int n, int m, double pi_novel = 0.3) {
  RandomStream rng(seed, 0);
  Matrix means = Matrix::Zero(k_known + 1, d);
  for (int k = 1; k <= k_known; ++k) {
    const Vector u = rng.normal_vector(d);
    means.row(k) = 1.5 * u.transpose() / u.norm();
  }
  Matrix train(n, d);
  std::vector<int> y(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    y[static_cast<std::size_t>(i)] = i % k_known;
    train.row(i) = means.row(i % k_known) + rng.normal_vector(d).transpose();
  }
  Vector pi = Vector::Constant(k_known + 1, (1.0 - pi_novel) / k_known);
  pi(k_known) = pi_novel;
  Matrix test(m, d);
  for (int j = 0; j < m; ++j) test.row(j) = means.row(rng.categorical(pi)) + rng.normal_vector(d).transpose();
  return OslsDataset(train, y, test, k_known);
}

/// Minimizes f from x0 with the GSL Nelder-Mead simplex, restarting a few
/// times from the current best.
inline Vector nelder_mead(const std::function<double(const Vector&)>& f, Vector x0, double step = 0.1,
                          int restarts = 4, int iterations = 20000, double size_tol = 1e-10) {
  const std::size_t dim = static_cast<std::size_t>(x0.size());
  struct Ctx {
    const std::function<double(const Vector&)>* f;
    std::size_t dim;
  } ctx{&f, dim};
  gsl_multimin_function fn;
  fn.n = dim;
  fn.params = &ctx;
  fn.f = [](const gsl_vector* v, void* params) {
    auto* c = static_cast<Ctx*>(params);
    Vector x(static_cast<Eigen::Index>(c->dim));
    for (std::size_t i = 0; i < c->dim; ++i) x(static_cast<Eigen::Index>(i)) = gsl_vector_get(v, i);
    const double value = (*c->f)(x);
    return std::isfinite(value) ? value : 1e300;
  };
  gsl_multimin_fminimizer* s = gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, dim);
  gsl_vector* x = gsl_vector_alloc(dim);
  gsl_vector* steps = gsl_vector_alloc(dim);
  for (int r = 0; r < restarts; ++r) {
    for (std::size_t i = 0; i < dim; ++i) gsl_vector_set(x, i, x0(static_cast<Eigen::Index>(i)));
    gsl_vector_set_all(steps, step / (1 + r));
    gsl_multimin_fminimizer_set(s, &fn, x, steps);
    for (int it = 0; it < iterations; ++it) {
      if (gsl_multimin_fminimizer_iterate(s)) break;
      if (gsl_multimin_test_size(gsl_multimin_fminimizer_size(s), size_tol) == GSL_SUCCESS) break;
    }
    for (std::size_t i = 0; i < dim; ++i) x0(static_cast<Eigen::Index>(i)) = gsl_vector_get(s->x, i);
  }
  gsl_vector_free(steps);
  gsl_vector_free(x);
  gsl_multimin_fminimizer_free(s);
  return x0;
}

/// Scalar-feature K=1 instance of n training and m test rows.
inline OslsDataset scalar_instance(std::uint64_t seed, int n, int m) {
  RandomStream rng(seed, 1);
  Matrix train(n, 1), test(m, 1);
  std::vector<int> y(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) train(i, 0) = rng.normal();
  for (int j = 0; j < m; ++j) test(j, 0) = rng.normal() + (rng.uniform() < 0.5 ? 1.5 : 0.0);
  return OslsDataset(train, y, test, 1);
}

struct GridOptimum {
  double alpha = 0.0;
  double beta = 0.0;
  double pi = 0.0;
  double value = -1e300;
};

/// Instance whose pooled minimum and maximum are training rows; a test point
/// outside the training range lets the likelihood grow without bound.
inline OslsDataset bounded_scalar_instance(std::uint64_t seed, int n, int m) {
  for (std::uint64_t draw = 0;; ++draw) {
    OslsDataset data = scalar_instance(seed * 1000 + draw, n, m);
    if (data.train_x().minCoeff() < data.test_x().minCoeff() && data.train_x().maxCoeff() > data.test_x().maxCoeff()) {
      return data;
    }
  }
}

namespace detail {

inline double profile_or_nan(const ElProblem& problem, Theta& theta, double a, double b, double p) {
  theta.gamma(0, 0) = a;
  theta.gamma(0, 1) = b;
  theta.pi(0) = p;
  try {
    return profile_log_el(theta, problem);
  } catch (const std::exception&) {
    return std::nan("");
  }
}

// For fixed (alpha, beta) the multipliers do not involve pi_1, and the
// profile moves with pi_1 only through sum_j log(1 - pi + pi r_j), which is
// concave. Returns the maximizing pi_1 and the profile there.
inline GridOptimum best_pi(const ElProblem& problem, Theta& theta, double a, double b) {
  const double base = profile_or_nan(problem, theta, a, b, 0.5);
  if (!std::isfinite(base)) return {a, b, 0.5, std::nan("")};
  const Vector x = problem.test_phi().col(1);
  const Vector r = (a + b * x.array()).exp().matrix();
  const auto mix = [&](double p) { return (1.0 - p + p * r.array()).log().sum(); };
  const auto slope = [&](double p) { return ((r.array() - 1.0) / (1.0 - p + p * r.array())).sum(); };
  double p = 0.0;
  if (slope(1.0) >= 0.0) {
    p = 1.0;
  } else if (slope(0.0) > 0.0) {
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 100; ++it) {
      const double mid = 0.5 * (lo + hi);
      (slope(mid) > 0.0 ? lo : hi) = mid;
    }
    p = 0.5 * (lo + hi);
  }
  return {a, b, p, base - mix(0.5) + mix(p)};
}

// Best (alpha, pi_1) for fixed beta: a lattice over the interval of alpha on
// which the multipliers exist, then Brent around the best node.
inline GridOptimum best_alpha(const ElProblem& problem, Theta& theta, double b, int points) {
  const Vector eta = b * problem.phi_e().col(1);
  const double width = eta.maxCoeff() - eta.minCoeff();
  if (width < 1e-12) return best_pi(problem, theta, 0.0, b);
  const double lo = -eta.maxCoeff();
  const double step = width / (points + 1);
  GridOptimum best;
  int arg = -1;
  for (int i = 1; i <= points; ++i) {
    const GridOptimum g = best_pi(problem, theta, lo + i * step, b);
    if (std::isfinite(g.value) && g.value > best.value) best = g, arg = i;
  }
  if (arg < 0) return best;
  const auto negative = [&](double a) {
    const double v = best_pi(problem, theta, a, b).value;
    return std::isfinite(v) ? -v : 1e100;
  };
  std::uintmax_t iterations = 200;
  const auto [a, v] = boost::math::tools::brent_find_minima(negative, lo + (arg - 1) * step, lo + (arg + 1) * step, 52,
                                                            iterations);
  if (-v > best.value) best = best_pi(problem, theta, a, b);
  return best;
}

}  // namespace detail

/// Search of the profile log-EL over (alpha, beta, pi_1) for a K=1 scalar
/// problem. A lattice over beta on [-box, box]; at each node alpha is
/// searched on a lattice and polished by Brent, and pi_1 is maximized
/// exactly. The `seeds` best local maxima over beta are each refined
/// `refinements` times on a lattice spanning two cells either side.
inline GridOptimum grid_search(const ElProblem& problem, int points = 41, int refinements = 2, double box = 4.0,
                               int seeds = 5) {
  Theta theta{Matrix::Zero(1, 2), Vector::Zero(1)};
  const double step0 = 2.0 * box / (points - 1);
  std::vector<GridOptimum> coarse(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) coarse[static_cast<std::size_t>(i)] = detail::best_alpha(problem, theta, -box + i * step0, points);
  std::vector<GridOptimum> maxima;
  for (int i = 0; i < points; ++i) {
    const double v = coarse[static_cast<std::size_t>(i)].value;
    if (!std::isfinite(v)) continue;
    const bool left = i == 0 || !(coarse[static_cast<std::size_t>(i - 1)].value > v);
    const bool right = i == points - 1 || !(coarse[static_cast<std::size_t>(i + 1)].value > v);
    if (left && right) maxima.push_back(coarse[static_cast<std::size_t>(i)]);
  }
  std::sort(maxima.begin(), maxima.end(), [](const auto& x, const auto& y) { return x.value > y.value; });
  if (static_cast<int>(maxima.size()) > seeds) maxima.resize(static_cast<std::size_t>(seeds));

  GridOptimum overall;
  for (GridOptimum best : maxima) {
    double step = step0;
    for (int level = 1; level <= refinements; ++level) {
      const double lo = best.beta - 2 * step;
      step = 4 * step / (points - 1);
      for (int i = 0; i < points; ++i) {
        const GridOptimum g = detail::best_alpha(problem, theta, lo + i * step, points);
        if (std::isfinite(g.value) && g.value > best.value) best = g;
      }
    }
    if (best.value > overall.value) overall = best;
  }
  return overall;
}

}  // namespace oslsel::test
