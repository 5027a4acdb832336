#pragma once

#include "oslsel/basis.hpp"
#include "oslsel/classify.hpp"
#include "oslsel/inference.hpp"
#include "oslsel/simulation.hpp"
#include "oslsel/types.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace oslsel {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Index of a header column; throws ValidationError when absent.
  int column(const std::string& name) const;
};

/// RFC-4180 reader: header row required, quoted fields may hold commas,
/// doubled quotes and line breaks; CRLF or LF line endings.
CsvTable parse_csv(const std::string& text);
CsvTable read_csv(const std::string& path);

/// Quotes a field when it holds a comma, quote or line break.
std::string csv_field(const std::string& value);
/// 17 significant digits.
std::string format_number(double value);

struct Standardization {
  std::vector<double> mean;
  std::vector<double> scale;
};

/// Per-column mean and standard deviation; a zero-variance column is an error
/// naming the column.
Standardization fit_standardization(const Matrix& x, const std::vector<std::string>& columns);
void apply_standardization(Matrix& x, const Standardization& s);

struct FeatureTable {
  Matrix x;
  std::vector<std::string> columns;
  /// Raw integer labels when a label column was requested.
  std::vector<long long> raw_labels;
};

/// Reads numeric features. With `features` empty every column except the
/// label column is used, in file order.
FeatureTable load_feature_csv(const std::string& path, const std::optional<std::string>& label_column,
                              const std::vector<std::string>& features = {});

struct LabeledTable {
  Matrix x;
  std::vector<int> y;
  std::vector<std::string> columns;
  /// label_map[k] is the raw label coded as k (ascending raw order).
  std::vector<long long> label_map;
};

LabeledTable load_labeled_csv(const std::string& path, const std::string& label_column,
                              const std::vector<std::string>& features = {});

/// Raw labels to codes via label_map; labels not in the map are an error
/// unless `novel_code` is given, in which case they map to it.
std::vector<int> remap_labels(const std::vector<long long>& raw, const std::vector<long long>& label_map,
                              std::optional<int> novel_code = std::nullopt);

struct FittedModel {
  Theta theta;
  BasisSpec basis;
  std::vector<std::string> feature_columns;
  std::string label_column;
  std::vector<long long> label_map;
  std::optional<Standardization> standardization;
  double log_el = 0.0;
  bool converged = false;
};

nlohmann::json to_json(const FittedModel& model);
FittedModel model_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ConfidenceInterval& ci);
nlohmann::json to_json(const SolutionDiagnostics& d);
nlohmann::json to_json(const AssumptionReport& report);

/// Scenario files mirror ScenarioSpec field for field; "pi" lists pi_0..pi_K.
ScenarioSpec scenario_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ScenarioSpec& spec);
/// A file holds one scenario object or {"scenarios": [...]}.
std::vector<ScenarioSpec> load_scenarios(const std::string& path);

CostMatrix load_cost_matrix(const std::string& path);

std::string metrics_csv(const std::vector<MetricRow>& rows);
std::string replicates_csv(const std::string& label, const std::vector<ReplicateRecord>& records);
std::string figure2_csv(const std::vector<Figure2Row>& rows);
std::string rate_csv(const RateResult& result);
std::string curves_csv(const std::vector<ElrCurve>& curves);
std::string trace_csv(const EmTrace& trace);
std::string weights_csv(const Vector& p);
std::string labels_csv(const std::vector<int>& labels, const std::vector<long long>& label_map);

/// Writes to a temporary sibling and renames it over `path`.
void write_text_atomic(const std::string& path, const std::string& content);
std::string read_text(const std::string& path);

/// 64-bit FNV-1a hash of a string, as 16 hex digits.
std::string fnv1a_hex(const std::string& text);

extern const char* const kVersion;

}  // namespace oslsel
