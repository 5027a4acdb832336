#pragma once

#include "oslsel/basis.hpp"
#include "oslsel/types.hpp"

#include <optional>
#include <string>
#include <vector>

namespace oslsel {

/// Misclassification costs q(k, j) for true class k assigned to j; zero
/// diagonal, strictly positive and finite off the diagonal.
class CostMatrix {
 public:
  explicit CostMatrix(Matrix q);
  static CostMatrix uniform(int classes_including_baseline);

  const Matrix& q() const noexcept { return q_; }
  int size() const noexcept { return static_cast<int>(q_.rows()); }
  double operator()(int k, int j) const { return q_(k, j); }

 private:
  Matrix q_;
};

/// argmin_j sum_{k != j} q(k, j) C_k for a posterior vector (C_0..C_K);
/// ties go to the smallest index.
int optimal_assign(const Eigen::Ref<const Vector>& posterior, const CostMatrix& cost);
int optimal_assign(const Eigen::Ref<const Vector>& x, const Theta& theta, const BasisSpec& basis,
                   const CostMatrix& cost);

/// Rowwise optimal labels for raw feature rows.
std::vector<int> classify_rows(const Eigen::Ref<const Matrix>& x, const Theta& theta, const BasisSpec& basis,
                               const CostMatrix& cost);

struct ClassificationReport {
  /// confusion(k, j): true class k predicted as j.
  Eigen::MatrixXi confusion;
  std::vector<int> class_counts;
  double accuracy = 0.0;
  double cost = 0.0;
  std::vector<std::string> warnings;
};

/// sum_{k, j != k} q(k, j) w_k (#true k predicted j / #true k). The class
/// weights w default to the empirical frequencies of `truth`; classes absent
/// from `truth` are skipped with a warning.
double empirical_cost(const std::vector<int>& predicted, const std::vector<int>& truth, const CostMatrix& cost,
                      const std::optional<Vector>& class_weights = std::nullopt,
                      std::vector<std::string>* warnings = nullptr);

ClassificationReport evaluate_labels(const std::vector<int>& predicted, const std::vector<int>& truth,
                                     const CostMatrix& cost,
                                     const std::optional<Vector>& class_weights = std::nullopt);

struct PosteriorComparison {
  /// max_k of the sample mean of |C_k(x; a) - C_k(x; b)|.
  double distance = 0.0;
  double accuracy_a = 0.0;
  double accuracy_b = 0.0;
};

/// Compares the uniform-cost classifiers of two parameter values on a labeled
/// evaluation set.
PosteriorComparison accuracy_vs_theta_distance(const Theta& a, const Theta& b, const Eigen::Ref<const Matrix>& x,
                                               const std::vector<int>& truth, const BasisSpec& basis);

}  // namespace oslsel
