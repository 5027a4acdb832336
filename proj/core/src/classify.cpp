#include "oslsel/classify.hpp"

#include "oslsel/drm.hpp"
#include "oslsel/errors.hpp"

#include <cmath>
#include <string>

namespace oslsel {

CostMatrix::CostMatrix(Matrix q) : q_(std::move(q)) {
  if (q_.rows() != q_.cols() || q_.rows() < 2) throw ValidationError("cost matrix must be square with at least 2 classes");
  for (Eigen::Index k = 0; k < q_.rows(); ++k) {
    for (Eigen::Index j = 0; j < q_.cols(); ++j) {
      const double v = q_(k, j);
      if (k == j && v != 0.0) throw ValidationError("cost matrix diagonal must be zero");
      if (k != j && !(v > 0.0 && std::isfinite(v))) {
        throw ValidationError("off-diagonal cost q(" + std::to_string(k) + "," + std::to_string(j) +
                              ") must be positive and finite");
      }
    }
  }
}

CostMatrix CostMatrix::uniform(int classes_including_baseline) {
  Matrix q = Matrix::Ones(classes_including_baseline, classes_including_baseline);
  q.diagonal().setZero();
  return CostMatrix(q);
}

int optimal_assign(const Eigen::Ref<const Vector>& posterior, const CostMatrix& cost) {
  if (posterior.size() != cost.size()) throw DimensionError("posterior and cost matrix sizes differ");
  int best = 0;
  double best_risk = 0.0;
  for (int j = 0; j < cost.size(); ++j) {
    double risk = 0.0;
    for (int k = 0; k < cost.size(); ++k) {
      if (k != j) risk += cost(k, j) * posterior(k);
    }
    if (j == 0 || risk < best_risk) {
      best = j;
      best_risk = risk;
    }
  }
  return best;
}

int optimal_assign(const Eigen::Ref<const Vector>& x, const Theta& theta, const BasisSpec& basis,
                   const CostMatrix& cost) {
  return optimal_assign(posterior(x, theta, basis), cost);
}

std::vector<int> classify_rows(const Eigen::Ref<const Matrix>& x, const Theta& theta, const BasisSpec& basis,
                               const CostMatrix& cost) {
  if (x.cols() != basis.input_dim) throw DimensionError("feature dimension does not match the basis");
  if (cost.size() != theta.classes() + 1) throw DimensionError("cost matrix size does not match K + 1");
  const Matrix post = posterior_rows(expand_rows(x, basis), theta);
  std::vector<int> labels(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) labels[static_cast<std::size_t>(i)] = optimal_assign(post.row(i).transpose(), cost);
  return labels;
}

namespace {

void check_labels(const std::vector<int>& predicted, const std::vector<int>& truth, int classes) {
  if (predicted.size() != truth.size()) throw DimensionError("predicted and true label vectors differ in length");
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= classes || predicted[i] < 0 || predicted[i] >= classes) {
      throw ValidationError("label out of range at position " + std::to_string(i));
    }
  }
}

}  // namespace

double empirical_cost(const std::vector<int>& predicted, const std::vector<int>& truth, const CostMatrix& cost,
                      const std::optional<Vector>& class_weights, std::vector<std::string>* warnings) {
  const int classes = cost.size();
  check_labels(predicted, truth, classes);
  if (class_weights && class_weights->size() != classes) throw DimensionError("class weights have the wrong length");
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(classes, classes);
  for (std::size_t i = 0; i < truth.size(); ++i) counts(truth[i], predicted[i]) += 1.0;
  const double total = static_cast<double>(truth.size());
  double loss = 0.0;
  for (int k = 0; k < classes; ++k) {
    const double n_k = counts.row(k).sum();
    if (n_k == 0.0) {
      if (warnings) warnings->push_back("class " + std::to_string(k) + " has no true rows; its cost term is skipped");
      continue;
    }
    const double weight = class_weights ? (*class_weights)(k) : n_k / total;
    for (int j = 0; j < classes; ++j) {
      if (j != k) loss += cost(k, j) * weight * counts(k, j) / n_k;
    }
  }
  return loss;
}

ClassificationReport evaluate_labels(const std::vector<int>& predicted, const std::vector<int>& truth,
                                     const CostMatrix& cost, const std::optional<Vector>& class_weights) {
  const int classes = cost.size();
  check_labels(predicted, truth, classes);
  ClassificationReport report;
  report.confusion = Eigen::MatrixXi::Zero(classes, classes);
  report.class_counts.assign(static_cast<std::size_t>(classes), 0);
  int correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    report.confusion(truth[i], predicted[i]) += 1;
    report.class_counts[static_cast<std::size_t>(truth[i])] += 1;
    if (truth[i] == predicted[i]) ++correct;
  }
  report.accuracy = truth.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(truth.size());
  report.cost = empirical_cost(predicted, truth, cost, class_weights, &report.warnings);
  return report;
}

PosteriorComparison accuracy_vs_theta_distance(const Theta& a, const Theta& b, const Eigen::Ref<const Matrix>& x,
                                               const std::vector<int>& truth, const BasisSpec& basis) {
  if (a.classes() != b.classes()) throw DimensionError("parameter values have different class counts");
  if (static_cast<std::size_t>(x.rows()) != truth.size()) throw DimensionError("evaluation rows and labels differ");
  const Matrix phi = expand_rows(x, basis);
  const Matrix pa = posterior_rows(phi, a);
  const Matrix pb = posterior_rows(phi, b);
  PosteriorComparison out;
  if (x.rows() == 0) return out;
  out.distance = (pa - pb).cwiseAbs().colwise().mean().maxCoeff();
  const CostMatrix cost = CostMatrix::uniform(a.classes() + 1);
  int hits_a = 0;
  int hits_b = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int y = truth[static_cast<std::size_t>(i)];
    if (optimal_assign(pa.row(i).transpose(), cost) == y) ++hits_a;
    if (optimal_assign(pb.row(i).transpose(), cost) == y) ++hits_b;
  }
  out.accuracy_a = static_cast<double>(hits_a) / static_cast<double>(x.rows());
  out.accuracy_b = static_cast<double>(hits_b) / static_cast<double>(x.rows());
  return out;
}

}  // namespace oslsel
