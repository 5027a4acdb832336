#include "oslsel/types.hpp"

#include "oslsel/errors.hpp"

#include <string>

namespace oslsel {

OslsDataset::OslsDataset(Matrix train_x, std::vector<int> train_y, Matrix test_x, int k_known)
    : train_x_(std::move(train_x)),
      train_y_(std::move(train_y)),
      test_x_(std::move(test_x)),
      k_known_(k_known) {
  if (k_known_ < 1) {
    throw ValidationError("k_known must be at least 1");
  }
  if (static_cast<Eigen::Index>(train_y_.size()) != train_x_.rows()) {
    throw DimensionError("train_y has " + std::to_string(train_y_.size()) + " labels but train_x has " +
                         std::to_string(train_x_.rows()) + " rows");
  }
  if (test_x_.rows() > 0 && test_x_.cols() != train_x_.cols()) {
    throw DimensionError("train and test feature dimensions differ (" + std::to_string(train_x_.cols()) +
                         " vs " + std::to_string(test_x_.cols()) + ")");
  }
  if (test_x_.rows() == 0) {
    test_x_.resize(0, train_x_.cols());
  }
  if (!train_x_.allFinite() || !test_x_.allFinite()) {
    throw ValidationError("feature matrices contain non-finite values");
  }
  counts_.assign(static_cast<std::size_t>(k_known_) + 1, 0);
  for (std::size_t i = 0; i < train_y_.size(); ++i) {
    const int y = train_y_[i];
    if (y < 0 || y >= k_known_) {
      throw ValidationError("training label " + std::to_string(y) + " at row " + std::to_string(i) +
                            " is outside 0.." + std::to_string(k_known_ - 1));
    }
    ++counts_[static_cast<std::size_t>(y)];
  }
  for (int k = 0; k < k_known_; ++k) {
    if (counts_[static_cast<std::size_t>(k)] == 0) {
      throw ValidationError("class " + std::to_string(k) + " has no training rows");
    }
  }
}

int OslsDataset::class_count(int k) const {
  if (k < 0 || k > k_known_) {
    throw ValidationError("class index " + std::to_string(k) + " out of range");
  }
  return counts_[static_cast<std::size_t>(k)];
}

Vector OslsDataset::row(int i) const {
  if (i < 0 || i >= total()) {
    throw ValidationError("row index " + std::to_string(i) + " out of range");
  }
  if (i < n()) return train_x_.row(i).transpose();
  return test_x_.row(i - n()).transpose();
}

double Theta::proportion(int k) const {
  if (k < 0 || k > classes()) {
    throw ValidationError("class index " + std::to_string(k) + " out of range");
  }
  return k == 0 ? pi0() : pi(k - 1);
}

Vector Theta::proportions() const {
  Vector out(classes() + 1);
  out(0) = pi0();
  out.tail(classes()) = pi;
  return out;
}

void Theta::validate(double slack) const {
  if (gamma.rows() != pi.size()) {
    throw DimensionError("gamma has " + std::to_string(gamma.rows()) + " blocks but pi has " +
                         std::to_string(pi.size()) + " entries");
  }
  if (gamma.cols() < 1) {
    throw DimensionError("gamma blocks must contain at least the intercept");
  }
  if (!gamma.allFinite() || !pi.allFinite()) {
    throw ValidationError("theta contains non-finite values");
  }
  if ((pi.array() < -slack).any()) {
    throw ValidationError("mixture proportions must be nonnegative");
  }
  if (pi.sum() > 1.0 + slack) {
    throw ValidationError("mixture proportions sum to more than one");
  }
}

}  // namespace oslsel
