#pragma once

#include "oslsel/em.hpp"
#include "oslsel/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace oslsel {

/// Gaussian simulation design: class k ~ N(mu_k, L L'), k = 0..K, with class
/// K the novel class.
struct ScenarioSpec {
  std::string label = "scenario";
  int k_known = 3;
  /// (K+1) x d, row k holds mu_k.
  Matrix means;
  /// Lower-triangular factor L of the shared covariance (empty = identity).
  Matrix cov_factor;
  int n = 1200;
  int m = 1200;
  /// Size of the labeled validation block drawn from the test mixture.
  int m_star = 1200;
  /// n_k / n for k = 0..K-1.
  Vector train_fractions;
  /// Test mixture (pi_0, ..., pi_K).
  Vector pi;
  int replications = 400;
  std::uint64_t seed = 20240901;
  double level = 0.95;
  EmConfig em;

  int dim() const { return static_cast<int>(means.cols()); }
  void validate() const;
  /// Training class sizes; rounding remainders go to the classes with the
  /// largest fractional parts (ties to the smaller index).
  std::vector<int> class_sizes() const;
  /// Closed-form tilts and proportions of the design.
  Theta true_theta() const;
  /// The paper's six-dimensional design with n0/n = train_fraction_0 and the
  /// remaining training rows split evenly.
  static ScenarioSpec section51(double baseline_fraction, double pi3 = 0.4);
};

struct Replicate {
  OslsDataset data;
  std::vector<int> test_y;
  Matrix validation_x;
  std::vector<int> validation_y;
  Theta truth;
};

/// Replicate r of a scenario, drawn from its own stream (seed, r).
Replicate generate_replicate(const ScenarioSpec& spec, int r);

struct ReplicateRecord {
  int replicate = 0;
  bool ok = false;
  std::string error;
  Vector pi_hat;
  /// R_{N,k}(pi_k true) for k = 1..K, and whether it lies under the threshold.
  Vector r_true;
  std::vector<int> covered;
  /// max_k |R_{N,k}(pi_hat_k)|.
  double r_at_estimate = 0.0;
  double min_r = 0.0;
  SolutionDiagnostics diagnostics;
  /// Worst residuals over the constrained fits behind r_true.
  SolutionDiagnostics constrained_diagnostics;
  double trace_max_decrease = 0.0;
  int iterations = 0;
  bool converged = false;
  bool polished = false;
  /// Diagonal of the plug-in Sigma for pi_1..pi_K (sqrt(N) scale).
  Vector plugin_sigma_pi;
  double w23_max_abs = 0.0;
  double accuracy = 0.0;
};

struct MetricRow {
  std::string scenario;
  int k = 0;
  double truth = 0.0;
  double rb = 0.0;
  double rmse = 0.0;
  double cp = 0.0;
  int replicates = 0;
  int failures = 0;
};

struct Table1Result {
  std::string label;
  std::vector<ReplicateRecord> records;
  std::vector<MetricRow> rows;
  int failures = 0;
};

struct Table1Options {
  int threads = 1;
  /// Overrides spec.replications when positive.
  int replications = 0;
  bool covariance = true;
};

/// RB (x100), RMSE (x100) and coverage (x100) of the proportion estimates.
/// Coverage counts replicates with R_{N,k}(pi_k true) <= chi2_quantile(level),
/// i.e. pi_k true inside the ELR confidence set.
Table1Result run_table1(const ScenarioSpec& spec, const Table1Options& options = {});

/// Aggregates records (sorted by replicate) into metric rows.
std::vector<MetricRow> summarize_table1(const std::string& label, const Theta& truth,
                                        const std::vector<ReplicateRecord>& records);

enum class Figure2Method { ours, known_pi, misspecified_pi };
std::string to_string(Figure2Method method);

struct Figure2Row {
  double pi_novel = 0.0;
  Figure2Method method = Figure2Method::ours;
  double accuracy = 0.0;
  double standard_error = 0.0;
  int replicates = 0;
  int failures = 0;
  /// Worst residuals over the fits behind this row.
  SolutionDiagnostics worst;
};

struct Figure2Options {
  int threads = 1;
  int replications = 0;
  /// Proportion given to each known non-baseline class by the misspecified
  /// variant; the novel class keeps its true value and pi_0 takes the rest.
  double misspecified_known = 0.1;
};

/// Validation accuracy against the novel-class proportion pi_K. For a grid
/// value v the known non-baseline proportions are held at the spec's values
/// and pi_0 = 1 - sum of the others.
std::vector<Figure2Row> run_figure2(const ScenarioSpec& spec, const std::vector<double>& grid,
                                    const Figure2Options& options = {});

/// Spec with the novel-class proportion moved to `value` (pi_0 absorbs it).
ScenarioSpec with_novel_proportion(const ScenarioSpec& spec, double value);

struct RatePoint {
  int total = 0;
  double mean_distance = 0.0;
  int replicates = 0;
  int failures = 0;
};

struct RateResult {
  std::vector<RatePoint> points;
  /// Least-squares slope of log(mean distance) on log N.
  double slope = 0.0;
};

/// Posterior L1 distance between the fitted and true classifiers as the
/// total sample size grows; n = m = N/2 with the spec's class fractions.
RateResult run_rate_check(const ScenarioSpec& spec, const std::vector<int>& totals, int replications,
                          int threads = 1);

}  // namespace oslsel
