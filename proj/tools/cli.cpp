#include "cli.hpp"

#include "oslsel/classify.hpp"
#include "oslsel/em.hpp"
#include "oslsel/errors.hpp"
#include "oslsel/inference.hpp"
#include "oslsel/io.hpp"
#include "oslsel/parallel.hpp"
#include "oslsel/simulation.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <optional>
#include <ostream>
#include <sstream>

namespace oslsel::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

struct DataOptions {
  std::string train;
  std::string test;
  std::string label;
  std::vector<std::string> features;
  std::string basis = "identity";
  int degree = 2;
  bool standardize = false;
};

struct EmOptions {
  double tol = 1e-5;
  int max_iter = 2000;
  int starts = 5;
  std::uint64_t seed = 20240901;
};

void add_data_options(CLI::App& app, DataOptions& d) {
  app.add_option("--train", d.train, "Labeled training CSV")->required()->check(CLI::ExistingFile);
  app.add_option("--test", d.test, "Unlabeled test CSV")->required()->check(CLI::ExistingFile);
  app.add_option("--label", d.label, "Label column of the training file")->required();
  app.add_option("--features", d.features, "Feature columns (default: all but the label)")->delimiter(',');
  app.add_option("--basis", d.basis, "identity, polynomial or precomputed")
      ->check(CLI::IsMember({"identity", "polynomial", "precomputed"}));
  app.add_option("--degree", d.degree, "Degree of the polynomial basis")->check(CLI::PositiveNumber);
  app.add_flag("--standardize", d.standardize, "Center and scale features with training-set moments");
}

void add_em_options(CLI::App& app, EmOptions& e) {
  app.add_option("--tol", e.tol, "EM log-EL increase tolerance")->check(CLI::PositiveNumber);
  app.add_option("--max-iter", e.max_iter, "EM iteration cap")->check(CLI::PositiveNumber);
  app.add_option("--starts", e.starts, "Number of EM starting values")->check(CLI::PositiveNumber);
  app.add_option("--seed", e.seed, "Seed for the EM starting values");
}

EmConfig em_config(const EmOptions& e, int threads) {
  EmConfig c;
  c.tol = e.tol;
  c.max_iter = e.max_iter;
  c.n_starts = e.starts;
  c.seed = e.seed;
  c.threads = threads;
  return c;
}

json em_json(const EmConfig& c) {
  return {{"tol", c.tol}, {"max_iter", c.max_iter}, {"n_starts", c.n_starts}, {"seed", c.seed}};
}

json data_json(const DataOptions& d) {
  return {{"train", d.train},         {"test", d.test},     {"label", d.label},
          {"features", d.features},   {"basis", d.basis},   {"degree", d.degree},
          {"standardize", d.standardize}};
}

struct Loaded {
  OslsDataset dataset;
  BasisSpec basis;
  FittedModel model;
};

bool has_column(const std::string& path, const std::string& name) {
  const CsvTable t = read_csv(path);
  return std::find(t.header.begin(), t.header.end(), name) != t.header.end();
}

BasisSpec make_basis(const std::string& kind, int dim, int degree) {
  switch (parse_basis_kind(kind)) {
    case BasisKind::identity: return BasisSpec::identity(dim);
    case BasisKind::polynomial: return BasisSpec::polynomial(dim, degree);
    case BasisKind::precomputed: return BasisSpec::precomputed(dim);
  }
  return BasisSpec::identity(dim);
}

Loaded load(const DataOptions& d) {
  LabeledTable train = load_labeled_csv(d.train, d.label, d.features);
  const std::optional<std::string> test_label = has_column(d.test, d.label) ? std::optional(d.label) : std::nullopt;
  FeatureTable test = load_feature_csv(d.test, test_label, train.columns);
  FittedModel model;
  if (d.standardize) {
    model.standardization = fit_standardization(train.x, train.columns);
    apply_standardization(train.x, *model.standardization);
    apply_standardization(test.x, *model.standardization);
  }
  const BasisSpec basis = make_basis(d.basis, static_cast<int>(train.x.cols()), d.degree);
  basis.validate();
  model.basis = basis;
  model.feature_columns = train.columns;
  model.label_column = d.label;
  model.label_map = train.label_map;
  const int classes = static_cast<int>(train.label_map.size());
  return Loaded{OslsDataset(std::move(train.x), std::move(train.y), std::move(test.x), classes), basis, model};
}

void write_manifest(const fs::path& dir, const std::string& command, const json& config,
                    const std::vector<std::string>& inputs, const std::vector<std::string>& files,
                    std::uint64_t seed, double elapsed) {
  json in = json::array();
  for (const auto& path : inputs) in.push_back({{"path", path}, {"fnv1a", fnv1a_hex(read_text(path))}});
  json manifest = {{"tool", "oslsel"},
                   {"version", kVersion},
                   {"command", command},
                   {"seed", seed},
                   {"config", config},
                   {"config_hash", fnv1a_hex(config.dump())},
                   {"inputs", in},
                   {"files", files},
                   {"excluded", {{"elapsed_seconds", elapsed}}}};
  write_text_atomic((dir / "manifest.json").string(), manifest.dump(2) + "\n");
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

json summary(const ElSolution& s) {
  json pi = json::array();
  for (Eigen::Index k = 0; k < s.theta.pi.size(); ++k) pi.push_back(s.theta.pi(k));
  return {{"pi0", s.theta.pi0()},
          {"pi", pi},
          {"log_el", s.log_el},
          {"converged", s.converged},
          {"iterations", s.iterations},
          {"warnings", s.warnings}};
}

int cmd_fit(const DataOptions& d, const EmOptions& e, int threads, const fs::path& out_dir, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  Loaded data = load(d);
  const ElProblem problem(data.dataset, data.basis);
  const EmConfig config = em_config(e, threads);
  const ElSolution solution = fit(problem, config);
  data.model.theta = solution.theta;
  data.model.log_el = solution.log_el;
  data.model.converged = solution.converged;

  const AssumptionReport report = assumption_diagnostics(problem, &solution);
  json diag = {{"diagnostics", to_json(check_solution(solution, problem))},
               {"assumptions", to_json(report)},
               {"iterations", solution.iterations},
               {"converged", solution.converged},
               {"polished", solution.polished},
               {"boundary", solution.boundary},
               {"start_index", solution.start_index},
               {"warnings", solution.warnings}};
  write_text_atomic((out_dir / "theta.json").string(), to_json(data.model).dump(2) + "\n");
  write_text_atomic((out_dir / "weights.csv").string(), weights_csv(solution.p.p));
  write_text_atomic((out_dir / "trace.csv").string(), trace_csv(solution.trace));
  write_text_atomic((out_dir / "diagnostics.json").string(), diag.dump(2) + "\n");
  const json config_json = {{"data", data_json(d)}, {"em", em_json(config)}};
  write_manifest(out_dir, "fit", config_json, {d.train, d.test},
                 {"theta.json", "weights.csv", "trace.csv", "diagnostics.json"}, config.seed, seconds_since(start));
  out << summary(solution).dump(2) << "\n";
  return 0;
}

int cmd_ci(const DataOptions& d, const EmOptions& e, int threads, std::vector<int> ks, double level,
           int curve_points, const fs::path& out_dir, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  const Loaded data = load(d);
  const ElProblem problem(data.dataset, data.basis);
  const EmConfig config = em_config(e, threads);
  const ElSolution solution = fit(problem, config);
  if (ks.empty()) {
    for (int k = 0; k <= problem.classes(); ++k) ks.push_back(k);
  }
  for (int k : ks) {
    if (k < 0 || k > problem.classes()) {
      throw ValidationError("--k " + std::to_string(k) + " is outside 0.." + std::to_string(problem.classes()));
    }
  }
  std::optional<CovarianceEstimate> cov;
  std::string cov_error;
  try {
    cov = plugin_covariance(solution, problem);
  } catch (const Error& ex) {
    cov_error = ex.what();
  }

  ElrProfiler profiler(problem, solution, config);
  json intervals = json::array();
  std::vector<ElrCurve> curves;
  for (int k : ks) {
    const ConfidenceInterval ci = profiler.interval(k, level);
    json entry = to_json(ci);
    if (cov) {
      entry["wald"] = to_json(wald_interval(*cov, solution, k, level));
      entry["standard_error"] = cov->pi_standard_error(k);
    }
    intervals.push_back(entry);
    if (curve_points > 1) {
      const double width = std::max(ci.upper - ci.lower, 1e-3);
      const double lo = std::max(0.0, ci.lower - 0.5 * width);
      const double hi = std::min(1.0, ci.upper + 0.5 * width);
      std::vector<double> grid;
      for (int i = 0; i < curve_points; ++i) grid.push_back(lo + (hi - lo) * i / (curve_points - 1));
      curves.push_back(profiler.curve(k, grid));
    }
  }
  json result = {{"level", level},
                 {"threshold", chi2_quantile(level)},
                 {"log_el", solution.log_el},
                 {"intervals", intervals},
                 {"min_statistic", profiler.min_statistic()}};
  if (!cov_error.empty()) result["covariance_error"] = cov_error;
  write_text_atomic((out_dir / "intervals.json").string(), result.dump(2) + "\n");
  write_text_atomic((out_dir / "curves.csv").string(), curves_csv(curves));
  const json config_json = {{"data", data_json(d)}, {"em", em_json(config)}, {"k", ks}, {"level", level},
                            {"curve_points", curve_points}};
  write_manifest(out_dir, "ci", config_json, {d.train, d.test}, {"intervals.json", "curves.csv"}, config.seed,
                 seconds_since(start));
  out << result.dump(2) << "\n";
  return 0;
}

int cmd_classify(const std::string& model_path, const std::string& input, const std::string& truth_column,
                 const std::string& cost_path, const fs::path& out_dir, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  json model_json;
  try {
    model_json = json::parse(read_text(model_path));
  } catch (const json::parse_error& e) {
    throw ValidationError("'" + model_path + "' is not valid JSON: " + e.what());
  }
  const FittedModel model = model_from_json(model_json);
  const std::optional<std::string> label =
      truth_column.empty() ? std::nullopt : std::optional<std::string>(truth_column);
  FeatureTable table = load_feature_csv(input, label, model.feature_columns);
  if (model.standardization) apply_standardization(table.x, *model.standardization);
  const int classes = model.theta.classes() + 1;
  const CostMatrix cost = cost_path.empty() ? CostMatrix::uniform(classes) : load_cost_matrix(cost_path);
  if (cost.size() != classes) throw ValidationError("cost matrix must be " + std::to_string(classes) + " x " + std::to_string(classes));
  const std::vector<int> labels = classify_rows(table.x, model.theta, model.basis, cost);

  std::vector<std::string> files = {"labels.csv"};
  write_text_atomic((out_dir / "labels.csv").string(), labels_csv(labels, model.label_map));
  json result = {{"rows", labels.size()}};
  if (label) {
    const std::vector<int> truth = remap_labels(table.raw_labels, model.label_map, classes - 1);
    const ClassificationReport report = evaluate_labels(labels, truth, cost);
    json confusion = json::array();
    for (Eigen::Index k = 0; k < report.confusion.rows(); ++k) {
      json row = json::array();
      for (Eigen::Index j = 0; j < report.confusion.cols(); ++j) row.push_back(report.confusion(k, j));
      confusion.push_back(row);
    }
    result["accuracy"] = report.accuracy;
    result["cost"] = report.cost;
    result["class_counts"] = report.class_counts;
    result["confusion"] = confusion;
    result["warnings"] = report.warnings;
    write_text_atomic((out_dir / "report.json").string(), result.dump(2) + "\n");
    files.push_back("report.json");
  }
  std::vector<std::string> inputs = {model_path, input};
  if (!cost_path.empty()) inputs.push_back(cost_path);
  const json config_json = {{"model", model_path}, {"input", input}, {"truth", truth_column}, {"cost", cost_path}};
  write_manifest(out_dir, "classify", config_json, inputs, files, 0, seconds_since(start));
  out << result.dump(2) << "\n";
  return 0;
}

int cmd_simulate(const std::string& scenario_path, const std::string& mode, int reps, int threads,
                 const std::vector<double>& grid, const std::vector<int>& totals, const fs::path& out_dir,
                 std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  const std::vector<ScenarioSpec> scenarios = load_scenarios(scenario_path);
  std::vector<std::string> files;
  json result = json::array();
  if (mode == "table1") {
    std::vector<MetricRow> rows;
    std::string replicates;
    for (const auto& spec : scenarios) {
      Table1Options options;
      options.threads = threads;
      options.replications = reps;
      const Table1Result table = run_table1(spec, options);
      rows.insert(rows.end(), table.rows.begin(), table.rows.end());
      const std::string block = replicates_csv(spec.label, table.records);
      replicates += replicates.empty() ? block : block.substr(block.find('\n') + 1);
    }
    write_text_atomic((out_dir / "metrics.csv").string(), metrics_csv(rows));
    write_text_atomic((out_dir / "replicates.csv").string(), replicates);
    files = {"metrics.csv", "replicates.csv"};
    for (const auto& r : rows) {
      result.push_back({{"scenario", r.scenario}, {"parameter", "pi_" + std::to_string(r.k)}, {"rb_x100", r.rb},
                        {"rmse_x100", r.rmse}, {"cp_x100", r.cp}, {"replicates", r.replicates}, {"failures", r.failures}});
    }
  } else if (mode == "figure2") {
    std::vector<Figure2Row> rows;
    for (const auto& spec : scenarios) {
      Figure2Options options;
      options.threads = threads;
      options.replications = reps;
      const auto part = run_figure2(spec, grid, options);
      rows.insert(rows.end(), part.begin(), part.end());
    }
    write_text_atomic((out_dir / "figure2.csv").string(), figure2_csv(rows));
    files = {"figure2.csv"};
    for (const auto& r : rows) {
      result.push_back({{"pi_novel", r.pi_novel}, {"method", to_string(r.method)}, {"accuracy", r.accuracy},
                        {"standard_error", r.standard_error}, {"replicates", r.replicates}});
    }
  } else {
    const ScenarioSpec& spec = scenarios.front();
    const RateResult rate = run_rate_check(spec, totals, reps > 0 ? reps : spec.replications, threads);
    write_text_atomic((out_dir / "rate.csv").string(), rate_csv(rate));
    files = {"rate.csv"};
    result.push_back({{"slope", rate.slope}});
  }
  json scen = json::array();
  for (const auto& s : scenarios) scen.push_back(to_json(s));
  const json config_json = {{"scenarios", scen}, {"mode", mode}, {"reps", reps}, {"grid", grid}, {"totals", totals}};
  write_manifest(out_dir, "simulate", config_json, {scenario_path}, files, scenarios.front().seed, seconds_since(start));
  out << result.dump(2) << "\n";
  return 0;
}

int cmd_diagnose(const DataOptions& d, const EmOptions& e, int threads, bool skip_fit, const fs::path& out_dir,
                 std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  const Loaded data = load(d);
  const ElProblem problem(data.dataset, data.basis);
  json result;
  if (skip_fit) {
    result["assumptions"] = to_json(assumption_diagnostics(problem));
  } else {
    const EmConfig config = em_config(e, threads);
    const ElSolution solution = fit(problem, config);
    result["assumptions"] = to_json(assumption_diagnostics(problem, &solution));
    result["diagnostics"] = to_json(check_solution(solution, problem));
    result["trace_monotone"] = solution.trace.monotone();
    result["trace_max_decrease"] = solution.trace.max_decrease();
    result["fit"] = summary(solution);
    try {
      const CovarianceEstimate cov = plugin_covariance(solution, problem);
      result["covariance_condition_number"] = cov.condition_number;
    } catch (const Error& ex) {
      result["covariance_error"] = ex.what();
    }
  }
  result["n"] = problem.n();
  result["m"] = problem.m();
  result["k_known"] = problem.classes();
  write_text_atomic((out_dir / "diagnose.json").string(), result.dump(2) + "\n");
  const json config_json = {{"data", data_json(d)}, {"em", em_json(em_config(e, threads))}, {"skip_fit", skip_fit}};
  write_manifest(out_dir, "diagnose", config_json, {d.train, d.test}, {"diagnose.json"}, e.seed, seconds_since(start));
  out << result.dump(2) << "\n";
  return 0;
}

int report_error(std::ostream& err, int code, const std::string& type, const std::string& message) {
  err << json{{"error", {{"code", code}, {"type", type}, {"message", message}}}}.dump() << "\n";
  return code;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Semiparametric open-set label shift estimation"};
  app.require_subcommand(1);
  int threads = 0;
  std::string out_dir = "oslsel_out";
  app.add_option("--threads", threads, "Worker threads (default: hardware, capped by OSLSEL_THREADS)");

  DataOptions fit_data, ci_data, diag_data;
  EmOptions fit_em, ci_em, diag_em;

  auto* fit_cmd = app.add_subcommand("fit", "Fit the maximum empirical likelihood estimate");
  add_data_options(*fit_cmd, fit_data);
  add_em_options(*fit_cmd, fit_em);
  fit_cmd->add_option("--out", out_dir, "Output directory");

  auto* ci_cmd = app.add_subcommand("ci", "Empirical likelihood ratio confidence intervals for proportions");
  add_data_options(*ci_cmd, ci_data);
  add_em_options(*ci_cmd, ci_em);
  std::vector<int> ks;
  double level = 0.95;
  int curve_points = 21;
  ci_cmd->add_option("--k", ks, "Class indices 0..K (default: all)")->delimiter(',');
  ci_cmd->add_option("--level", level, "Confidence level")->check(CLI::Range(0.0, 1.0));
  ci_cmd->add_option("--curve-points", curve_points, "Points on each ratio curve (0 disables)")
      ->check(CLI::NonNegativeNumber);
  ci_cmd->add_option("--out", out_dir, "Output directory");

  auto* classify_cmd = app.add_subcommand("classify", "Cost-sensitive classification with a fitted model");
  std::string model_path, input_path, truth_column, cost_path;
  classify_cmd->add_option("--model", model_path, "theta.json written by fit")->required()->check(CLI::ExistingFile);
  classify_cmd->add_option("--input", input_path, "Feature CSV to label")->required()->check(CLI::ExistingFile);
  classify_cmd->add_option("--label", truth_column, "Column with true labels (enables the report)");
  classify_cmd->add_option("--cost", cost_path, "Headerless (K+1)x(K+1) cost CSV")->check(CLI::ExistingFile);
  classify_cmd->add_option("--out", out_dir, "Output directory");

  auto* sim_cmd = app.add_subcommand("simulate", "Run a simulation study from a scenario file");
  std::string scenario_path, mode = "table1";
  int reps = 0;
  std::vector<double> grid = {0.05, 0.15, 0.25, 0.35, 0.45, 0.55};
  std::vector<int> totals = {600, 1200, 2400, 4800};
  sim_cmd->add_option("--scenario", scenario_path, "Scenario JSON")->required()->check(CLI::ExistingFile);
  sim_cmd->add_option("--mode", mode, "table1, figure2 or rate")->check(CLI::IsMember({"table1", "figure2", "rate"}));
  sim_cmd->add_option("--reps", reps, "Replications (default: from the scenario)")->check(CLI::PositiveNumber);
  sim_cmd->add_option("--grid", grid, "Novel-class proportions for figure2")->delimiter(',');
  sim_cmd->add_option("--totals", totals, "Total sample sizes for rate")->delimiter(',');
  sim_cmd->add_option("--out", out_dir, "Output directory");

  auto* diag_cmd = app.add_subcommand("diagnose", "Check modelling assumptions and solution residuals");
  add_data_options(*diag_cmd, diag_data);
  add_em_options(*diag_cmd, diag_em);
  bool skip_fit = false;
  diag_cmd->add_flag("--skip-fit", skip_fit, "Only check the basis second-moment matrix");
  diag_cmd->add_option("--out", out_dir, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return report_error(err, 2, "usage", e.what());
  }

  if (threads <= 0) threads = default_worker_count();
  const fs::path dir(out_dir);
  try {
    if (*fit_cmd) return cmd_fit(fit_data, fit_em, threads, dir, out);
    if (*ci_cmd) return cmd_ci(ci_data, ci_em, threads, ks, level, curve_points, dir, out);
    if (*classify_cmd) return cmd_classify(model_path, input_path, truth_column, cost_path, dir, out);
    if (*sim_cmd) return cmd_simulate(scenario_path, mode, reps, threads, grid, totals, dir, out);
    if (*diag_cmd) return cmd_diagnose(diag_data, diag_em, threads, skip_fit, dir, out);
  } catch (const ValidationError& e) {
    return report_error(err, 2, "validation", e.what());
  } catch (const SolverError& e) {
    return report_error(err, 3, "solver", e.what());
  } catch (const fs::filesystem_error& e) {
    return report_error(err, 2, "io", e.what());
  } catch (const std::exception& e) {
    return report_error(err, 3, "internal", e.what());
  }
  return report_error(err, 2, "usage", "no subcommand given");
}

}  // namespace oslsel::cli
