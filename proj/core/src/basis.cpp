#include "oslsel/basis.hpp"

#include "oslsel/errors.hpp"

namespace oslsel {

void BasisSpec::validate() const {
  if (input_dim < 1) throw ValidationError("basis input dimension must be positive");
  if (kind == BasisKind::polynomial && degree < 1) {
    throw ValidationError("polynomial basis degree must be at least 1");
  }
}

std::string to_string(BasisKind kind) {
  switch (kind) {
    case BasisKind::identity: return "identity";
    case BasisKind::polynomial: return "polynomial";
    case BasisKind::precomputed: return "precomputed";
  }
  return "unknown";
}

BasisKind parse_basis_kind(const std::string& name) {
  if (name == "identity") return BasisKind::identity;
  if (name == "polynomial") return BasisKind::polynomial;
  if (name == "precomputed") return BasisKind::precomputed;
  throw ValidationError("unknown basis kind '" + name + "'");
}

Vector expand_basis(const Eigen::Ref<const Vector>& x, const BasisSpec& spec) {
  spec.validate();
  if (x.size() != spec.input_dim) {
    throw DimensionError("feature vector has dimension " + std::to_string(x.size()) + ", basis expects " +
                         std::to_string(spec.input_dim));
  }
  Vector out(spec.q() + 1);
  out(0) = 1.0;
  if (spec.kind != BasisKind::polynomial) {
    out.tail(spec.input_dim) = x;
    return out;
  }
  Eigen::Index pos = 1;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    double power = 1.0;
    for (int d = 1; d <= spec.degree; ++d) {
      power *= x(j);
      out(pos++) = power;
    }
  }
  return out;
}

Matrix expand_rows(const Eigen::Ref<const Matrix>& x, const BasisSpec& spec) {
  spec.validate();
  if (x.cols() != spec.input_dim) {
    throw DimensionError("feature matrix has " + std::to_string(x.cols()) + " columns, basis expects " +
                         std::to_string(spec.input_dim));
  }
  Matrix out(x.rows(), spec.q() + 1);
  out.col(0).setOnes();
  if (spec.kind != BasisKind::polynomial) {
    out.rightCols(spec.input_dim) = x;
    return out;
  }
  Eigen::Index pos = 1;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    Vector power = Vector::Ones(x.rows());
    for (int d = 1; d <= spec.degree; ++d) {
      power.array() *= x.col(j).array();
      out.col(pos++) = power;
    }
  }
  return out;
}

}  // namespace oslsel
