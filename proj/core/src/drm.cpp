#include "oslsel/drm.hpp"

#include "oslsel/errors.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <string>

namespace oslsel {

namespace {

constexpr double kExpBound = 700.0;
std::atomic<std::uint64_t> g_clamp_events{0};

void check_class(const Theta& theta, int k) {
  if (k < 0 || k > theta.classes()) {
    throw ValidationError("class index " + std::to_string(k) + " outside 0.." + std::to_string(theta.classes()));
  }
}

void check_basis_size(Eigen::Index size, const Theta& theta) {
  if (size != theta.basis_size()) {
    throw DimensionError("extended basis has length " + std::to_string(size) + ", theta expects " +
                         std::to_string(theta.basis_size()));
  }
}

}  // namespace

double clamped_exp(double t) noexcept {
  if (t > kExpBound) {
    g_clamp_events.fetch_add(1, std::memory_order_relaxed);
    t = kExpBound;
  } else if (t < -kExpBound) {
    g_clamp_events.fetch_add(1, std::memory_order_relaxed);
    t = -kExpBound;
  }
  return std::exp(t);
}

std::uint64_t exp_clamp_events() noexcept { return g_clamp_events.load(std::memory_order_relaxed); }

double log_density_ratio(const Eigen::Ref<const Vector>& phi_e, const Theta& theta, int k) {
  check_class(theta, k);
  check_basis_size(phi_e.size(), theta);
  if (k == 0) return 0.0;
  return theta.gamma.row(k - 1).dot(phi_e);
}

double log_density_ratio(const Eigen::Ref<const Vector>& x, const Theta& theta, int k, const BasisSpec& basis) {
  return log_density_ratio(expand_basis(x, basis), theta, k);
}

Vector posterior(const Eigen::Ref<const Vector>& phi_e, const Theta& theta) {
  check_basis_size(phi_e.size(), theta);
  const int classes = theta.classes();
  Vector logits(classes + 1);
  const double pi0 = theta.pi0();
  logits(0) = pi0 > 0.0 ? std::log(pi0) : -std::numeric_limits<double>::infinity();
  for (int k = 1; k <= classes; ++k) {
    const double pk = theta.pi(k - 1);
    logits(k) = pk > 0.0 ? std::log(pk) + theta.gamma.row(k - 1).dot(phi_e)
                         : -std::numeric_limits<double>::infinity();
  }
  const double shift = logits.maxCoeff();
  if (!std::isfinite(shift)) {
    throw DegenerateParameterError("posterior denominator is zero: every class has zero weight");
  }
  Vector out = (logits.array() - shift).exp();
  for (Eigen::Index k = 0; k < out.size(); ++k) {
    if (std::isinf(logits(k))) out(k) = 0.0;
  }
  out /= out.sum();
  return out;
}

Vector posterior(const Eigen::Ref<const Vector>& x, const Theta& theta, const BasisSpec& basis) {
  return posterior(expand_basis(x, basis), theta);
}

Matrix posterior_rows(const Eigen::Ref<const Matrix>& phi_e, const Theta& theta) {
  check_basis_size(phi_e.cols(), theta);
  const int classes = theta.classes();
  Matrix logits(phi_e.rows(), classes + 1);
  const double neg_inf = -std::numeric_limits<double>::infinity();
  const double pi0 = theta.pi0();
  logits.col(0).setConstant(pi0 > 0.0 ? std::log(pi0) : neg_inf);
  if (classes > 0) {
    logits.rightCols(classes).noalias() = phi_e * theta.gamma.transpose();
    for (int k = 1; k <= classes; ++k) {
      const double pk = theta.pi(k - 1);
      if (pk > 0.0) {
        logits.col(k).array() += std::log(pk);
      } else {
        logits.col(k).setConstant(neg_inf);
      }
    }
  }
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double shift = logits.row(i).maxCoeff();
    if (!std::isfinite(shift)) {
      throw DegenerateParameterError("posterior denominator is zero: every class has zero weight");
    }
    auto row = logits.row(i);
    for (Eigen::Index k = 0; k < row.size(); ++k) row(k) = std::isinf(row(k)) ? 0.0 : std::exp(row(k) - shift);
    row /= row.sum();
  }
  return logits;
}

double mixture_term(const Eigen::Ref<const Vector>& phi_e, const Theta& theta) {
  check_basis_size(phi_e.size(), theta);
  double value = theta.pi0();
  for (int k = 1; k <= theta.classes(); ++k) {
    value += theta.pi(k - 1) * clamped_exp(theta.gamma.row(k - 1).dot(phi_e));
  }
  if (!(value > 0.0)) {
    throw DegenerateParameterError("mixture term B(x; theta) is not positive");
  }
  return value;
}

double mixture_term(const Eigen::Ref<const Vector>& x, const Theta& theta, const BasisSpec& basis) {
  return mixture_term(expand_basis(x, basis), theta);
}

Matrix density_ratios(const Eigen::Ref<const Matrix>& phi_e, const Eigen::Ref<const Matrix>& gamma) {
  if (phi_e.cols() != gamma.cols()) {
    throw DimensionError("design has " + std::to_string(phi_e.cols()) + " columns, gamma blocks have " +
                         std::to_string(gamma.cols()));
  }
  Matrix ratios = phi_e * gamma.transpose();
  ratios = ratios.unaryExpr([](double t) { return clamped_exp(t); });
  return ratios;
}

}  // namespace oslsel
