#pragma once

#include "oslsel/basis.hpp"
#include "oslsel/types.hpp"

#include <cstdint>

namespace oslsel {

/// exp(t) with t clamped to [-700, 700]. Every clamp increments a process-wide
/// counter so callers can report how often the bound was hit.
double clamped_exp(double t) noexcept;
std::uint64_t exp_clamp_events() noexcept;

/// gamma_k' phi_e(x) for k in 0..K (zero for the baseline).
double log_density_ratio(const Eigen::Ref<const Vector>& phi_e, const Theta& theta, int k);
double log_density_ratio(const Eigen::Ref<const Vector>& x, const Theta& theta, int k, const BasisSpec& basis);

/// Posterior class probabilities (C_0(x), ..., C_K(x)) under the density
/// ratio model, evaluated with a shared max-shift.
Vector posterior(const Eigen::Ref<const Vector>& phi_e, const Theta& theta);
Vector posterior(const Eigen::Ref<const Vector>& x, const Theta& theta, const BasisSpec& basis);

/// Row-wise posteriors for a design matrix of extended-basis rows; rows x (K+1).
Matrix posterior_rows(const Eigen::Ref<const Matrix>& phi_e, const Theta& theta);

/// B(x; theta) = 1 + sum_k pi_k (exp(gamma_k' phi_e(x)) - 1): the test density
/// divided by the baseline density.
double mixture_term(const Eigen::Ref<const Vector>& phi_e, const Theta& theta);
double mixture_term(const Eigen::Ref<const Vector>& x, const Theta& theta, const BasisSpec& basis);

/// Matrix of raw ratios exp(gamma_k' phi_e(x_i)), rows x K, clamped.
Matrix density_ratios(const Eigen::Ref<const Matrix>& phi_e, const Eigen::Ref<const Matrix>& gamma);

}  // namespace oslsel
