#pragma once

#include "oslsel/types.hpp"

#include <string>

namespace oslsel {

enum class BasisKind { identity, polynomial, precomputed };

/// The pre-specified feature map phi and its extended form (1, phi(x)).
///
/// `identity` uses the raw features. `polynomial` expands each coordinate
/// separately into x_j, x_j^2, ..., x_j^degree (no cross terms). `precomputed`
/// declares that the feature columns already hold phi (for instance an
/// embedding produced elsewhere); the library passes them through untouched.
struct BasisSpec {
  BasisKind kind = BasisKind::identity;
  int input_dim = 1;
  int degree = 1;

  static BasisSpec identity(int d) { return {BasisKind::identity, d, 1}; }
  static BasisSpec polynomial(int d, int degree) { return {BasisKind::polynomial, d, degree}; }
  static BasisSpec precomputed(int q) { return {BasisKind::precomputed, q, 1}; }

  /// Output dimension q of phi (without the leading constant).
  int q() const noexcept { return kind == BasisKind::polynomial ? input_dim * degree : input_dim; }

  void validate() const;
};

std::string to_string(BasisKind kind);
BasisKind parse_basis_kind(const std::string& name);

/// phi_e(x) = (1, phi(x)); length q+1.
Vector expand_basis(const Eigen::Ref<const Vector>& x, const BasisSpec& spec);

/// Row-wise expansion of an observation matrix into an (rows x (q+1)) design.
Matrix expand_rows(const Eigen::Ref<const Matrix>& x, const BasisSpec& spec);

}  // namespace oslsel
