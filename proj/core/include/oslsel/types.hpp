#pragma once

#include <Eigen/Dense>

#include <vector>

namespace oslsel {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Labeled training block plus unlabeled test block.
///
/// Training labels are 0..K-1 with class 0 the density-ratio baseline. Class K
/// is the novel class and never appears in training. Rows of the stacked
/// sample are ordered training first, then test; that order is the positional
/// train/test indicator used throughout.
class OslsDataset {
 public:
  OslsDataset(Matrix train_x, std::vector<int> train_y, Matrix test_x, int k_known);

  const Matrix& train_x() const noexcept { return train_x_; }
  const std::vector<int>& train_y() const noexcept { return train_y_; }
  const Matrix& test_x() const noexcept { return test_x_; }

  /// K: number of classes present in training.
  int k_known() const noexcept { return k_known_; }
  int n() const noexcept { return static_cast<int>(train_x_.rows()); }
  int m() const noexcept { return static_cast<int>(test_x_.rows()); }
  int total() const noexcept { return n() + m(); }
  int dim() const noexcept { return static_cast<int>(train_x_.cols()); }

  /// n_k for k in 0..K; the novel class K always has zero training rows.
  int class_count(int k) const;

  /// Feature row i of the stacked sample (training rows first).
  Vector row(int i) const;

 private:
  Matrix train_x_;
  std::vector<int> train_y_;
  Matrix test_x_;
  int k_known_;
  std::vector<int> counts_;
};

/// Finite-dimensional parameter block: one tilt (alpha_k, beta_k) per
/// non-baseline class plus the test mixture proportions pi_1..pi_K.
/// The baseline tilt gamma_0 is identically zero and is never stored.
struct Theta {
  /// K x (q+1); row k-1 holds (alpha_k, beta_k).
  Matrix gamma;
  /// (pi_1, ..., pi_K).
  Vector pi;

  int classes() const noexcept { return static_cast<int>(pi.size()); }
  int basis_size() const noexcept { return static_cast<int>(gamma.cols()); }

  double pi0() const { return 1.0 - pi.sum(); }

  /// Proportion of class k in 0..K.
  double proportion(int k) const;

  /// Full proportion vector (pi_0, ..., pi_K).
  Vector proportions() const;

  /// Throws ValidationError when shapes disagree, some pi_k < 0, the sum
  /// exceeds one, or any entry is non-finite.
  void validate(double slack = 1e-12) const;
};

}  // namespace oslsel
