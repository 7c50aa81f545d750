#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <variant>
#include <vector>

namespace capwm {

inline constexpr int kReportSchemaVersion = 1;

enum class ColumnType { kString, kInteger, kReal, kBoolean };

struct Column {
  std::string name;
  ColumnType type;
};

using Cell = std::variant<std::string, std::int64_t, double, bool>;

// Column layouts for every report kind: "experiment", "pareto", "robustness",
// "latency", "perplexity". Throws ConfigError for an unknown kind.
const std::vector<Column>& report_schema(const std::string& kind);

struct Report {
  std::string kind;
  std::vector<std::vector<Cell>> rows;
  // Free-form context: configuration echo, findings.
  nlohmann::json meta = nlohmann::json::object();

  explicit Report(std::string kind_name = "experiment") : kind(std::move(kind_name)) {}

  const std::vector<Column>& columns() const { return report_schema(kind); }
  void add_row(std::vector<Cell> row);
  // Index of a named column.
  std::size_t column(const std::string& name) const;
  const Cell& at(std::size_t row, const std::string& name) const;
  double real(std::size_t row, const std::string& name) const;
  std::string text(std::size_t row, const std::string& name) const;

  // Every row has one cell per column with the declared type.
  void validate() const;
};

std::string to_csv(const Report& report);
nlohmann::json to_json(const Report& report);
// Validates the schema version and every row.
Report report_from_json(const nlohmann::json& j);

// Writes <dir>/<stem>.csv and <dir>/<stem>.json.
void write_report(const Report& report, const std::filesystem::path& dir, const std::string& stem);

}  // namespace capwm
