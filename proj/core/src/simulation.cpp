#include "oslsel/simulation.hpp"

#include "oslsel/classify.hpp"
#include "oslsel/errors.hpp"
#include "oslsel/inference.hpp"
#include "oslsel/parallel.hpp"
#include "oslsel/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace oslsel {

void ScenarioSpec::validate() const {
  if (k_known < 1) throw ValidationError("scenario needs at least one known non-baseline class (k_known >= 1)");
  if (means.rows() != k_known + 1 || means.cols() < 1) {
    throw DimensionError("scenario means must have k_known + 1 rows");
  }
  if (cov_factor.size() != 0 && (cov_factor.rows() != dim() || cov_factor.cols() != dim())) {
    throw DimensionError("covariance factor must be d x d");
  }
  if (n < k_known || m < 1 || m_star < 0) throw ValidationError("scenario sample sizes are too small");
  if (train_fractions.size() != k_known) throw DimensionError("train_fractions must have k_known entries");
  if ((train_fractions.array() <= 0.0).any() || std::abs(train_fractions.sum() - 1.0) > 1e-9) {
    throw ValidationError("train_fractions must be positive and sum to one");
  }
  if (pi.size() != k_known + 1) throw DimensionError("pi must list pi_0..pi_K");
  if ((pi.array() < 0.0).any() || std::abs(pi.sum() - 1.0) > 1e-9) {
    throw ValidationError("pi must lie on the simplex");
  }
  if (replications < 1) throw ValidationError("replications must be at least 1");
  if (!(level > 0.0 && level < 1.0)) throw ValidationError("level must lie in (0, 1)");
  em.validate();
  for (int k : class_sizes()) {
    if (k < 1) throw ValidationError("every training class needs at least one row");
  }
}

std::vector<int> ScenarioSpec::class_sizes() const {
  const auto classes = static_cast<std::size_t>(k_known);
  std::vector<int> sizes(classes);
  std::vector<double> remainder(classes);
  int assigned = 0;
  for (std::size_t k = 0; k < classes; ++k) {
    const double exact = n * train_fractions(static_cast<Eigen::Index>(k));
    sizes[k] = static_cast<int>(std::floor(exact + 1e-9));
    remainder[k] = std::round((exact - sizes[k]) * 1e9);
    assigned += sizes[k];
  }
  std::vector<std::size_t> order(classes);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) sizes[order[i % classes]] += 1;
  return sizes;
}

Theta ScenarioSpec::true_theta() const {
  const int d = dim();
  Matrix precision = Matrix::Identity(d, d);
  if (cov_factor.size() != 0) {
    const Matrix cov = cov_factor * cov_factor.transpose();
    precision = cov.ldlt().solve(Matrix::Identity(d, d));
  }
  Theta theta;
  theta.gamma.resize(k_known, d + 1);
  const Vector mu0 = means.row(0).transpose();
  const double q0 = mu0.dot(precision * mu0);
  for (int k = 1; k <= k_known; ++k) {
    const Vector mu = means.row(k).transpose();
    theta.gamma(k - 1, 0) = 0.5 * (q0 - mu.dot(precision * mu));
    theta.gamma.row(k - 1).tail(d) = (precision * (mu - mu0)).transpose();
  }
  theta.pi = pi.tail(k_known);
  return theta;
}

ScenarioSpec ScenarioSpec::section51(double baseline_fraction, double pi3) {
  ScenarioSpec spec;
  spec.label = "section51";
  spec.k_known = 3;
  spec.means.resize(4, 6);
  spec.means << 0, 0, 0, 0, 0, 0,
                1, 1, 0, 2, 0, 0,
                -1, -2, -1, 2, 0, 0,
                0, -1, -1, 1, 0, 0;
  spec.train_fractions.resize(3);
  spec.train_fractions << baseline_fraction, 0.5 * (1.0 - baseline_fraction), 0.5 * (1.0 - baseline_fraction);
  spec.pi.resize(4);
  spec.pi << 0.6 - pi3, 0.2, 0.2, pi3;
  return spec;
}

namespace {

Matrix draw_rows(RandomStream& rng, const ScenarioSpec& spec, const std::vector<int>& labels) {
  const int d = spec.dim();
  Matrix x(static_cast<Eigen::Index>(labels.size()), d);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    Vector z = rng.normal_vector(d);
    if (spec.cov_factor.size() != 0) z = spec.cov_factor * z;
    x.row(static_cast<Eigen::Index>(i)) = spec.means.row(labels[i]) + z.transpose();
  }
  return x;
}

std::vector<int> mixture_labels(RandomStream& rng, const Vector& pi, int count) {
  std::vector<int> labels(static_cast<std::size_t>(count));
  for (auto& y : labels) y = rng.categorical(pi);
  return labels;
}

}  // namespace

Replicate generate_replicate(const ScenarioSpec& spec, int r) {
  spec.validate();
  RandomStream rng(spec.seed, static_cast<std::uint64_t>(r));
  std::vector<int> train_y;
  const std::vector<int> sizes = spec.class_sizes();
  for (int k = 0; k < spec.k_known; ++k) train_y.insert(train_y.end(), static_cast<std::size_t>(sizes[static_cast<std::size_t>(k)]), k);
  Matrix train_x = draw_rows(rng, spec, train_y);
  std::vector<int> test_y = mixture_labels(rng, spec.pi, spec.m);
  Matrix test_x = draw_rows(rng, spec, test_y);
  std::vector<int> validation_y = mixture_labels(rng, spec.pi, spec.m_star);
  Matrix validation_x = draw_rows(rng, spec, validation_y);
  return Replicate{OslsDataset(std::move(train_x), std::move(train_y), std::move(test_x), spec.k_known),
                   std::move(test_y), std::move(validation_x), std::move(validation_y), spec.true_theta()};
}

namespace {

EmConfig single_threaded(EmConfig config) {
  config.threads = 1;
  return config;
}

ReplicateRecord table1_replicate(const ScenarioSpec& spec, int r, double threshold, bool covariance) {
  ReplicateRecord rec;
  rec.replicate = r;
  try {
    const Replicate rep = generate_replicate(spec, r);
    const BasisSpec basis = BasisSpec::identity(spec.dim());
    const ElProblem problem(rep.data, basis);
    const EmConfig config = single_threaded(spec.em);
    ElSolution solution = fit(problem, config);
    rec.pi_hat = solution.theta.pi;
    rec.diagnostics = check_solution(solution, problem);
    rec.trace_max_decrease = solution.trace.max_decrease();
    rec.iterations = solution.iterations;
    rec.converged = solution.converged;
    rec.polished = solution.polished;
    const auto labels = classify_rows(rep.validation_x, solution.theta, basis, CostMatrix::uniform(spec.k_known + 1));
    rec.accuracy = evaluate_labels(labels, rep.validation_y, CostMatrix::uniform(spec.k_known + 1)).accuracy;

    if (covariance) {
      const CovarianceEstimate cov = plugin_covariance(solution, problem);
      rec.plugin_sigma_pi.resize(spec.k_known);
      for (int k = 1; k <= spec.k_known; ++k) rec.plugin_sigma_pi(k - 1) = cov.sigma(cov.pi_index(k), cov.pi_index(k));
      rec.w23_max_abs = cov.w23.cwiseAbs().maxCoeff();
    }

    ElrProfiler profiler(problem, solution, config);
    rec.r_true.resize(spec.k_known);
    rec.covered.assign(static_cast<std::size_t>(spec.k_known), 0);
    for (int k = 1; k <= spec.k_known; ++k) {
      rec.r_at_estimate = std::max(rec.r_at_estimate, std::abs(profiler.statistic(k, solution.theta.pi(k - 1))));
      rec.r_true(k - 1) = profiler.statistic(k, rep.truth.pi(k - 1));
      rec.covered[static_cast<std::size_t>(k - 1)] = rec.r_true(k - 1) <= threshold ? 1 : 0;
    }
    rec.min_r = profiler.min_statistic();
    rec.constrained_diagnostics = profiler.worst_diagnostics();
    rec.ok = true;
  } catch (const Error& e) {
    rec.ok = false;
    rec.error = e.what();
  }
  return rec;
}

}  // namespace

std::vector<MetricRow> summarize_table1(const std::string& label, const Theta& truth,
                                        const std::vector<ReplicateRecord>& records) {
  std::vector<MetricRow> rows;
  int failures = 0;
  for (const auto& rec : records) failures += rec.ok ? 0 : 1;
  for (int k = 1; k <= truth.classes(); ++k) {
    MetricRow row;
    row.scenario = label;
    row.k = k;
    row.truth = truth.pi(k - 1);
    row.failures = failures;
    double bias = 0.0;
    double squared = 0.0;
    double covered = 0.0;
    for (const auto& rec : records) {
      if (!rec.ok) continue;
      const double err = rec.pi_hat(k - 1) - row.truth;
      bias += err;
      squared += err * err;
      covered += rec.covered[static_cast<std::size_t>(k - 1)];
      ++row.replicates;
    }
    if (row.replicates > 0) {
      const double count = row.replicates;
      row.rb = 100.0 * (bias / count) / row.truth;
      row.rmse = 100.0 * std::sqrt(squared / count);
      row.cp = 100.0 * covered / count;
    }
    rows.push_back(row);
  }
  return rows;
}

Table1Result run_table1(const ScenarioSpec& spec, const Table1Options& options) {
  spec.validate();
  const int reps = options.replications > 0 ? options.replications : spec.replications;
  const double threshold = chi2_quantile(spec.level);
  Table1Result result;
  result.label = spec.label;
  result.records.resize(static_cast<std::size_t>(reps));
  parallel_for(static_cast<std::size_t>(reps), options.threads, [&](std::size_t r) {
    result.records[r] = table1_replicate(spec, static_cast<int>(r), threshold, options.covariance);
  });
  for (const auto& rec : result.records) result.failures += rec.ok ? 0 : 1;
  result.rows = summarize_table1(spec.label, spec.true_theta(), result.records);
  return result;
}

std::string to_string(Figure2Method method) {
  switch (method) {
    case Figure2Method::ours: return "ours";
    case Figure2Method::known_pi: return "known_pi";
    case Figure2Method::misspecified_pi: return "misspecified_pi";
  }
  return "unknown";
}

ScenarioSpec with_novel_proportion(const ScenarioSpec& spec, double value) {
  ScenarioSpec out = spec;
  const int K = spec.k_known;
  const double known = spec.pi.segment(1, K - 1).sum();
  if (!(value >= 0.0) || known + value > 1.0 + 1e-12) {
    throw ValidationError("novel-class proportion leaves no room for the baseline class");
  }
  out.pi(K) = value;
  out.pi(0) = std::max(0.0, 1.0 - known - value);
  return out;
}

std::vector<Figure2Row> run_figure2(const ScenarioSpec& spec, const std::vector<double>& grid,
                                    const Figure2Options& options) {
  spec.validate();
  const int reps = options.replications > 0 ? options.replications : spec.replications;
  const int K = spec.k_known;
  const BasisSpec basis = BasisSpec::identity(spec.dim());
  const CostMatrix cost = CostMatrix::uniform(K + 1);
  std::vector<Figure2Row> rows;
  for (double value : grid) {
    const ScenarioSpec local = with_novel_proportion(spec, value);
    const Theta truth = local.true_theta();
    Vector wrong = Vector::Constant(K, options.misspecified_known);
    wrong(K - 1) = value;
    if (wrong.sum() > 1.0) throw ValidationError("misspecified proportions exceed one");

    // accuracy[method][replicate], NaN marks a failure
    std::vector<std::vector<double>> accuracy(3, std::vector<double>(static_cast<std::size_t>(reps)));
    std::vector<std::vector<SolutionDiagnostics>> residuals(3, std::vector<SolutionDiagnostics>(static_cast<std::size_t>(reps)));
    parallel_for(static_cast<std::size_t>(reps), options.threads, [&](std::size_t r) {
      for (auto& a : accuracy) a[r] = std::nan("");
      try {
        const Replicate rep = generate_replicate(local, static_cast<int>(r));
        const ElProblem problem(rep.data, basis);
        const EmConfig config = single_threaded(local.em);
        const ElSolution ours = fit(problem, config);
        auto score = [&](const Theta& theta) {
          return evaluate_labels(classify_rows(rep.validation_x, theta, basis, cost), rep.validation_y, cost).accuracy;
        };
        accuracy[0][r] = score(ours.theta);
        residuals[0][r] = check_solution(ours, problem);
        const Vector* pinned[] = {&truth.pi, &wrong};
        for (int mth = 1; mth <= 2; ++mth) {
          try {
            const ElSolution s = fit_with_fixed_proportions(problem, config, *pinned[mth - 1], ours.theta);
            accuracy[static_cast<std::size_t>(mth)][r] = score(s.theta);
            residuals[static_cast<std::size_t>(mth)][r] = check_solution(s, problem, false);
          } catch (const Error&) {
          }
        }
      } catch (const Error&) {
      }
    });
    const Figure2Method methods[] = {Figure2Method::ours, Figure2Method::known_pi, Figure2Method::misspecified_pi};
    for (int mth = 0; mth < 3; ++mth) {
      Figure2Row row;
      row.pi_novel = value;
      row.method = methods[mth];
      double sum = 0.0;
      double sq = 0.0;
      for (const auto& d : residuals[static_cast<std::size_t>(mth)]) row.worst = worst_of(row.worst, d);
      for (double a : accuracy[static_cast<std::size_t>(mth)]) {
        if (std::isnan(a)) {
          ++row.failures;
          continue;
        }
        sum += a;
        sq += a * a;
        ++row.replicates;
      }
      if (row.replicates > 0) {
        const double count = row.replicates;
        row.accuracy = sum / count;
        const double var = count > 1 ? std::max(0.0, (sq - count * row.accuracy * row.accuracy) / (count - 1)) : 0.0;
        row.standard_error = std::sqrt(var / count);
      }
      rows.push_back(row);
    }
  }
  return rows;
}

RateResult run_rate_check(const ScenarioSpec& spec, const std::vector<int>& totals, int replications, int threads) {
  spec.validate();
  const BasisSpec basis = BasisSpec::identity(spec.dim());
  RateResult result;
  for (int total : totals) {
    ScenarioSpec local = spec;
    local.n = total / 2;
    local.m = total - local.n;
    local.seed = spec.seed + static_cast<std::uint64_t>(total);
    std::vector<double> distance(static_cast<std::size_t>(replications), std::nan(""));
    parallel_for(static_cast<std::size_t>(replications), threads, [&](std::size_t r) {
      try {
        const Replicate rep = generate_replicate(local, static_cast<int>(r));
        const ElProblem problem(rep.data, basis);
        const ElSolution sol = fit(problem, single_threaded(local.em));
        distance[r] = accuracy_vs_theta_distance(sol.theta, rep.truth, rep.validation_x, rep.validation_y, basis).distance;
      } catch (const Error&) {
      }
    });
    RatePoint point;
    point.total = total;
    double sum = 0.0;
    for (double d : distance) {
      if (std::isnan(d)) {
        ++point.failures;
      } else {
        sum += d;
        ++point.replicates;
      }
    }
    point.mean_distance = point.replicates > 0 ? sum / point.replicates : std::nan("");
    result.points.push_back(point);
  }
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  int count = 0;
  for (const auto& p : result.points) {
    if (!(p.mean_distance > 0.0)) continue;
    const double x = std::log(static_cast<double>(p.total));
    const double y = std::log(p.mean_distance);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++count;
  }
  if (count >= 2) result.slope = (count * sxy - sx * sy) / (count * sxx - sx * sx);
  return result;
}

}  // namespace oslsel
