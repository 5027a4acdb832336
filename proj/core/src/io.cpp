#include "oslsel/io.hpp"

#include "oslsel/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace oslsel {

const char* const kVersion = "0.1.0";

using nlohmann::json;

int CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw ValidationError("column '" + name + "' not found in CSV header");
  return static_cast<int>(it - header.begin());
}

CsvTable parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  bool closed = false;
  std::size_t i = 0;
  auto end_field = [&] {
    record.push_back(field);
    field.clear();
    field_started = false;
    closed = false;
  };
  auto end_record = [&] {
    end_field();
    if (!(record.size() == 1 && record[0].empty())) records.push_back(record);
    record.clear();
  };
  while (i < text.size()) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          i += 2;
          continue;
        }
        quoted = false;
        closed = true;
      } else {
        field.push_back(ch);
      }
      ++i;
      continue;
    }
    if (closed && ch != ',' && ch != '\r' && ch != '\n') {
      throw ValidationError("malformed CSV: text after a closing quote on record " + std::to_string(records.size() + 1));
    }
    if (ch == '"') {
      if (field_started || !field.empty()) {
        throw ValidationError("malformed CSV: quote inside an unquoted field on record " +
                              std::to_string(records.size() + 1));
      }
      quoted = true;
      field_started = true;
    } else if (ch == ',') {
      end_field();
    } else if (ch == '\r') {
      if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
      end_record();
    } else if (ch == '\n') {
      end_record();
    } else {
      field.push_back(ch);
      field_started = true;
    }
    ++i;
  }
  if (quoted) throw ValidationError("malformed CSV: unterminated quoted field");
  if (field_started || !field.empty() || !record.empty()) end_record();
  if (records.empty()) throw ValidationError("CSV has no header row");

  CsvTable table;
  table.header = std::move(records.front());
  if (!table.header.empty() && table.header[0].rfind("\xEF\xBB\xBF", 0) == 0) table.header[0].erase(0, 3);
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != table.header.size()) {
      throw ValidationError("CSV record " + std::to_string(r + 1) + " has " + std::to_string(records[r].size()) +
                            " fields, header has " + std::to_string(table.header.size()));
    }
    table.rows.push_back(std::move(records[r]));
  }
  return table;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

CsvTable read_csv(const std::string& path) { return parse_csv(read_text(path)); }

std::string csv_field(const std::string& value) {
  if (value.find_first_of(",\"\r\n") == std::string::npos) return value;
  std::string out = "\"";
  for (char ch : value) {
    if (ch == '"') out.push_back('"');
    out.push_back(ch);
  }
  out.push_back('"');
  return out;
}

std::string format_number(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

namespace {

double parse_double(const std::string& cell, std::size_t row, const std::string& column) {
  const char* begin = cell.data();
  const char* end = cell.data() + cell.size();
  while (begin < end && *begin == ' ') ++begin;
  while (end > begin && end[-1] == ' ') --end;
  if (begin < end && *begin == '+') ++begin;
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end || begin == end || !std::isfinite(value)) {
    throw ValidationError("non-numeric cell '" + cell + "' at row " + std::to_string(row) + ", column '" + column + "'");
  }
  return value;
}

long long parse_label(const std::string& cell, std::size_t row, const std::string& column) {
  const double value = parse_double(cell, row, column);
  if (value != std::floor(value) || std::abs(value) > 9e15) {
    throw ValidationError("label '" + cell + "' at row " + std::to_string(row) + " is not an integer code");
  }
  return static_cast<long long>(value);
}

}  // namespace

FeatureTable load_feature_csv(const std::string& path, const std::optional<std::string>& label_column,
                              const std::vector<std::string>& features) {
  const CsvTable table = read_csv(path);
  FeatureTable out;
  std::vector<int> index;
  if (features.empty()) {
    for (std::size_t c = 0; c < table.header.size(); ++c) {
      if (label_column && table.header[c] == *label_column) continue;
      index.push_back(static_cast<int>(c));
      out.columns.push_back(table.header[c]);
    }
  } else {
    for (const auto& name : features) {
      index.push_back(table.column(name));
      out.columns.push_back(name);
    }
  }
  if (index.empty()) throw ValidationError("'" + path + "' has no feature columns");
  const int label_index = label_column ? table.column(*label_column) : -1;
  out.x.resize(static_cast<Eigen::Index>(table.rows.size()), static_cast<Eigen::Index>(index.size()));
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    for (std::size_t c = 0; c < index.size(); ++c) {
      out.x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          parse_double(table.rows[r][static_cast<std::size_t>(index[c])], r + 2, out.columns[c]);
    }
    if (label_index >= 0) {
      out.raw_labels.push_back(parse_label(table.rows[r][static_cast<std::size_t>(label_index)], r + 2, *label_column));
    }
  }
  return out;
}

LabeledTable load_labeled_csv(const std::string& path, const std::string& label_column,
                              const std::vector<std::string>& features) {
  FeatureTable raw = load_feature_csv(path, label_column, features);
  LabeledTable out;
  out.x = std::move(raw.x);
  out.columns = std::move(raw.columns);
  const std::set<long long> distinct(raw.raw_labels.begin(), raw.raw_labels.end());
  out.label_map.assign(distinct.begin(), distinct.end());
  out.y = remap_labels(raw.raw_labels, out.label_map);
  return out;
}

std::vector<int> remap_labels(const std::vector<long long>& raw, const std::vector<long long>& label_map,
                              std::optional<int> novel_code) {
  std::map<long long, int> code;
  for (std::size_t k = 0; k < label_map.size(); ++k) code[label_map[k]] = static_cast<int>(k);
  std::vector<int> out;
  out.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto it = code.find(raw[i]);
    if (it != code.end()) {
      out.push_back(it->second);
    } else if (novel_code) {
      out.push_back(*novel_code);
    } else {
      throw ValidationError("label " + std::to_string(raw[i]) + " at row " + std::to_string(i + 2) +
                            " was not seen in training");
    }
  }
  return out;
}

Standardization fit_standardization(const Matrix& x, const std::vector<std::string>& columns) {
  Standardization s;
  const double rows = static_cast<double>(x.rows());
  if (x.rows() < 2) throw ValidationError("standardization needs at least two rows");
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const double mean = x.col(c).mean();
    const double var = (x.col(c).array() - mean).square().sum() / (rows - 1.0);
    if (!(var > 0.0)) {
      const std::string name = static_cast<std::size_t>(c) < columns.size() ? columns[static_cast<std::size_t>(c)]
                                                                              : std::to_string(c);
      throw ValidationError("column '" + name + "' has zero variance and cannot be standardized");
    }
    s.mean.push_back(mean);
    s.scale.push_back(std::sqrt(var));
  }
  return s;
}

void apply_standardization(Matrix& x, const Standardization& s) {
  if (static_cast<std::size_t>(x.cols()) != s.mean.size()) throw DimensionError("standardization width mismatch");
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    x.col(c).array() = (x.col(c).array() - s.mean[static_cast<std::size_t>(c)]) / s.scale[static_cast<std::size_t>(c)];
  }
}

namespace {

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

json vector_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

Matrix matrix_from(const json& j, const std::string& what) {
  if (!j.is_array()) throw ValidationError(what + " must be an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows > 0 ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const json& row = j.at(static_cast<std::size_t>(r));
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) throw ValidationError(what + " rows are ragged");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

Vector vector_from(const json& j, const std::string& what) {
  if (!j.is_array()) throw ValidationError(what + " must be an array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

template <typename T>
T field_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

}  // namespace

json to_json(const FittedModel& model) {
  json j;
  j["k_known"] = model.theta.classes();
  j["basis"] = {{"kind", to_string(model.basis.kind)}, {"input_dim", model.basis.input_dim}, {"degree", model.basis.degree}};
  j["gamma"] = matrix_json(model.theta.gamma);
  j["pi"] = vector_json(model.theta.pi);
  j["pi0"] = model.theta.pi0();
  j["feature_columns"] = model.feature_columns;
  j["label_column"] = model.label_column;
  j["label_map"] = model.label_map;
  if (model.standardization) {
    j["standardization"] = {{"mean", model.standardization->mean}, {"scale", model.standardization->scale}};
  } else {
    j["standardization"] = nullptr;
  }
  j["log_el"] = model.log_el;
  j["converged"] = model.converged;
  return j;
}

FittedModel model_from_json(const json& j) {
  try {
    FittedModel model;
    model.theta.gamma = matrix_from(j.at("gamma"), "gamma");
    model.theta.pi = vector_from(j.at("pi"), "pi");
    if (j.at("k_known").get<int>() != model.theta.classes()) throw ValidationError("k_known disagrees with pi");
    const json& b = j.at("basis");
    model.basis.kind = parse_basis_kind(b.at("kind").get<std::string>());
    model.basis.input_dim = b.at("input_dim").get<int>();
    model.basis.degree = field_or(b, "degree", 1);
    model.basis.validate();
    if (model.theta.basis_size() != model.basis.q() + 1) throw DimensionError("gamma width does not match the basis");
    model.theta.validate(1e-9);
    model.feature_columns = field_or(j, "feature_columns", std::vector<std::string>{});
    model.label_column = field_or(j, "label_column", std::string{});
    model.label_map = field_or(j, "label_map", std::vector<long long>{});
    if (j.contains("standardization") && !j.at("standardization").is_null()) {
      Standardization s;
      s.mean = j.at("standardization").at("mean").get<std::vector<double>>();
      s.scale = j.at("standardization").at("scale").get<std::vector<double>>();
      model.standardization = s;
    }
    model.log_el = field_or(j, "log_el", 0.0);
    model.converged = field_or(j, "converged", false);
    return model;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid model JSON: ") + e.what());
  }
}

json to_json(const ConfidenceInterval& ci) {
  return {{"k", ci.k},
          {"level", ci.level},
          {"estimate", ci.estimate},
          {"lower", ci.lower},
          {"upper", ci.upper},
          {"lower_at_boundary", ci.lower_at_boundary},
          {"upper_at_boundary", ci.upper_at_boundary}};
}

json to_json(const SolutionDiagnostics& d) {
  return {{"weight_sum_error", d.weight_sum_error},
          {"ratio_constraint_error", d.ratio_constraint_error},
          {"lambda_residual", d.lambda_residual},
          {"lambda_identity_error", d.lambda_identity_error},
          {"pi_fixed_point_error", d.pi_fixed_point_error}};
}

json to_json(const AssumptionReport& report) {
  json distances = json::array();
  for (const auto& [pair, d] : report.beta_distances) distances.push_back({{"k", pair.first}, {"l", pair.second}, {"distance", d}});
  return {{"min_eigenvalue", report.min_eigenvalue},
          {"max_eigenvalue", report.max_eigenvalue},
          {"rank_deficient", report.rank_deficient},
          {"beta_norms", report.beta_norms},
          {"beta_distances", distances},
          {"flags", report.flags}};
}

ScenarioSpec scenario_from_json(const json& j) {
  try {
    ScenarioSpec spec;
    spec.label = field_or(j, "label", spec.label);
    spec.k_known = j.at("k_known").get<int>();
    spec.means = matrix_from(j.at("means"), "means");
    if (j.contains("cov_factor") && !j.at("cov_factor").is_null()) spec.cov_factor = matrix_from(j.at("cov_factor"), "cov_factor");
    spec.n = j.at("n").get<int>();
    spec.m = j.at("m").get<int>();
    spec.m_star = field_or(j, "m_star", spec.m_star);
    spec.train_fractions = vector_from(j.at("train_fractions"), "train_fractions");
    spec.pi = vector_from(j.at("pi"), "pi");
    spec.replications = field_or(j, "replications", spec.replications);
    spec.seed = field_or<std::uint64_t>(j, "seed", spec.seed);
    spec.level = field_or(j, "level", spec.level);
    if (j.contains("em")) {
      const json& e = j.at("em");
      spec.em.tol = field_or(e, "tol", spec.em.tol);
      spec.em.max_iter = field_or(e, "max_iter", spec.em.max_iter);
      spec.em.n_starts = field_or(e, "n_starts", spec.em.n_starts);
      spec.em.seed = field_or<std::uint64_t>(e, "seed", spec.em.seed);
      spec.em.newton_tol = field_or(e, "newton_tol", spec.em.newton_tol);
      spec.em.newton_max_iter = field_or(e, "newton_max_iter", spec.em.newton_max_iter);
    }
    spec.validate();
    return spec;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid scenario JSON: ") + e.what());
  }
}

json to_json(const ScenarioSpec& spec) {
  json j;
  j["label"] = spec.label;
  j["k_known"] = spec.k_known;
  j["means"] = matrix_json(spec.means);
  j["cov_factor"] = spec.cov_factor.size() ? matrix_json(spec.cov_factor) : json(nullptr);
  j["n"] = spec.n;
  j["m"] = spec.m;
  j["m_star"] = spec.m_star;
  j["train_fractions"] = vector_json(spec.train_fractions);
  j["pi"] = vector_json(spec.pi);
  j["replications"] = spec.replications;
  j["seed"] = spec.seed;
  j["level"] = spec.level;
  j["em"] = {{"tol", spec.em.tol},
             {"max_iter", spec.em.max_iter},
             {"n_starts", spec.em.n_starts},
             {"seed", spec.em.seed},
             {"newton_tol", spec.em.newton_tol},
             {"newton_max_iter", spec.em.newton_max_iter}};
  return j;
}

std::vector<ScenarioSpec> load_scenarios(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("'" + path + "' is not valid JSON: " + e.what());
  }
  std::vector<ScenarioSpec> out;
  if (j.contains("scenarios")) {
    for (const auto& s : j.at("scenarios")) out.push_back(scenario_from_json(s));
  } else {
    out.push_back(scenario_from_json(j));
  }
  if (out.empty()) throw ValidationError("'" + path + "' lists no scenarios");
  return out;
}

CostMatrix load_cost_matrix(const std::string& path) {
  // Headerless numeric grid, one row per line.
  const std::string text = read_text(path);
  std::vector<std::vector<double>> rows;
  std::istringstream lines(text);
  std::string line;
  std::size_t r = 0;
  while (std::getline(lines, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++r;
    const CsvTable one = parse_csv(line + "\n");
    std::vector<double> row;
    for (std::size_t c = 0; c < one.header.size(); ++c) row.push_back(parse_double(one.header[c], r, std::to_string(c + 1)));
    rows.push_back(row);
  }
  Matrix q(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (static_cast<Eigen::Index>(rows[i].size()) != q.cols()) throw ValidationError("cost matrix rows are ragged");
    for (std::size_t c = 0; c < rows[i].size(); ++c) q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
  }
  return CostMatrix(q);
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream out;
  out << "scenario,parameter,truth,rb_x100,rmse_x100,cp_x100,replicates,failures\n";
  for (const auto& r : rows) {
    out << csv_field(r.scenario) << ",pi_" << r.k << ',' << format_number(r.truth) << ',' << format_number(r.rb) << ','
        << format_number(r.rmse) << ',' << format_number(r.cp) << ',' << r.replicates << ',' << r.failures << '\n';
  }
  return out.str();
}

std::string replicates_csv(const std::string& label, const std::vector<ReplicateRecord>& records) {
  std::ostringstream out;
  const Eigen::Index classes = [&] {
    for (const auto& r : records) {
      if (r.ok) return r.pi_hat.size();
    }
    return Eigen::Index{0};
  }();
  out << "scenario,replicate,ok";
  for (Eigen::Index k = 1; k <= classes; ++k) out << ",pi_hat_" << k;
  for (Eigen::Index k = 1; k <= classes; ++k) out << ",r_true_" << k;
  for (Eigen::Index k = 1; k <= classes; ++k) out << ",covered_" << k;
  for (Eigen::Index k = 1; k <= classes; ++k) out << ",sigma_pi_" << k;
  out << ",r_at_estimate,min_r,weight_sum_error,ratio_constraint_error,lambda_residual,lambda_identity_error,"
         "pi_fixed_point_error,trace_max_decrease,iterations,converged,polished,accuracy,error\n";
  for (const auto& r : records) {
    out << csv_field(label) << ',' << r.replicate << ',' << (r.ok ? 1 : 0);
    for (Eigen::Index k = 0; k < classes; ++k) out << ',' << (r.ok ? format_number(r.pi_hat(k)) : "");
    for (Eigen::Index k = 0; k < classes; ++k) out << ',' << (r.ok ? format_number(r.r_true(k)) : "");
    for (Eigen::Index k = 0; k < classes; ++k) out << ',' << (r.ok ? std::to_string(r.covered[static_cast<std::size_t>(k)]) : "");
    for (Eigen::Index k = 0; k < classes; ++k) {
      out << ',' << (r.ok && r.plugin_sigma_pi.size() > k ? format_number(r.plugin_sigma_pi(k)) : "");
    }
    const auto& d = r.diagnostics;
    out << ',' << format_number(r.r_at_estimate) << ',' << format_number(r.min_r) << ','
        << format_number(d.weight_sum_error) << ',' << format_number(d.ratio_constraint_error) << ','
        << format_number(d.lambda_residual) << ',' << format_number(d.lambda_identity_error) << ','
        << format_number(d.pi_fixed_point_error) << ',' << format_number(r.trace_max_decrease) << ','
        << r.iterations << ',' << (r.converged ? 1 : 0) << ',' << (r.polished ? 1 : 0) << ','
        << format_number(r.accuracy) << ',' << csv_field(r.error) << '\n';
  }
  return out.str();
}

std::string figure2_csv(const std::vector<Figure2Row>& rows) {
  std::ostringstream out;
  out << "pi_novel,method,accuracy,standard_error,replicates,failures\n";
  for (const auto& r : rows) {
    out << format_number(r.pi_novel) << ',' << to_string(r.method) << ',' << format_number(r.accuracy) << ','
        << format_number(r.standard_error) << ',' << r.replicates << ',' << r.failures << '\n';
  }
  return out.str();
}

std::string rate_csv(const RateResult& result) {
  std::ostringstream out;
  out << "total,mean_distance,replicates,failures\n";
  for (const auto& p : result.points) {
    out << p.total << ',' << format_number(p.mean_distance) << ',' << p.replicates << ',' << p.failures << '\n';
  }
  out << "slope," << format_number(result.slope) << ",,\n";
  return out.str();
}

std::string curves_csv(const std::vector<ElrCurve>& curves) {
  std::ostringstream out;
  out << "k,value,statistic,estimate\n";
  for (const auto& c : curves) {
    for (const auto& [v, r] : c.points) {
      out << c.k << ',' << format_number(v) << ',' << format_number(r) << ',' << format_number(c.mele_value) << '\n';
    }
  }
  return out.str();
}

std::string trace_csv(const EmTrace& trace) {
  std::ostringstream out;
  out << "iteration,log_el,inner_iterations";
  const Eigen::Index classes = trace.records.empty() ? 0 : trace.records.front().pi.size();
  for (Eigen::Index k = 1; k <= classes; ++k) out << ",pi_" << k;
  out << '\n';
  for (const auto& r : trace.records) {
    out << r.iteration << ',' << format_number(r.log_el) << ',' << r.inner_iterations;
    for (Eigen::Index k = 0; k < r.pi.size(); ++k) out << ',' << format_number(r.pi(k));
    out << '\n';
  }
  return out.str();
}

std::string weights_csv(const Vector& p) {
  std::ostringstream out;
  out << "row,p\n";
  for (Eigen::Index i = 0; i < p.size(); ++i) out << i << ',' << format_number(p(i)) << '\n';
  return out.str();
}

std::string labels_csv(const std::vector<int>& labels, const std::vector<long long>& label_map) {
  std::ostringstream out;
  out << "row,class,label\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto k = static_cast<std::size_t>(labels[i]);
    out << i << ',' << labels[i] << ',';
    if (k < label_map.size()) {
      out << label_map[k];
    } else {
      out << "novel";
    }
    out << '\n';
  }
  return out.str();
}

void write_text_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path temp = target.string() + ".tmp";
  {
    std::ofstream out(temp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write '" + temp.string() + "'");
    out << content;
    out.flush();
    if (!out) throw ValidationError("failed writing '" + temp.string() + "'");
  }
  fs::rename(temp, target);
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace oslsel
