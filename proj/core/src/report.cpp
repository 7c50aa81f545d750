#include "capwm/harness/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "capwm/common.hpp"

namespace capwm {

namespace {

using T = ColumnType;

const std::map<std::string, std::vector<Column>>& schemas() {
  static const std::map<std::string, std::vector<Column>> table = {
      {"experiment",
       {{"method", T::kString},
        {"scheme", T::kString},
        {"tier", T::kString},
        {"parameter", T::kReal},
        {"n", T::kInteger},
        {"repetitions", T::kInteger},
        {"accuracy", T::kReal},
        {"accuracy_spread", T::kReal},
        {"auroc", T::kReal},
        {"auroc_spread", T::kReal},
        {"f1", T::kReal},
        {"mean_z", T::kReal},
        {"mean_z_clean", T::kReal},
        {"watermarked_fraction", T::kReal},
        {"compute_ratio", T::kReal},
        {"memory_note", T::kString},
        {"seed", T::kInteger}}},
      {"pareto",
       {{"method", T::kString},
        {"scheme", T::kString},
        {"tier", T::kString},
        {"parameter", T::kReal},
        {"auroc", T::kReal},
        {"auroc_spread", T::kReal},
        {"accuracy", T::kReal},
        {"accuracy_spread", T::kReal},
        {"dominated_by_plain", T::kBoolean},
        {"seed", T::kInteger}}},
      {"robustness",
       {{"scheme", T::kString},
        {"method", T::kString},
        {"attack", T::kString},
        {"p", T::kReal},
        {"auroc_clean", T::kReal},
        {"auroc_attacked", T::kReal},
        {"loss_mean", T::kReal},
        {"loss_spread", T::kReal},
        {"repetitions", T::kInteger},
        {"seed", T::kInteger}}},
      {"latency",
       {{"mode", T::kString},
        {"mean_ms", T::kReal},
        {"time_ratio", T::kReal},
        {"peak_scratch_bytes", T::kInteger},
        {"memory_ratio", T::kReal},
        {"avg_candidates", T::kReal},
        {"runs", T::kInteger},
        {"memory_note", T::kString}}},
      {"perplexity",
       {{"condition", T::kString},
        {"n", T::kInteger},
        {"ppl_median", T::kReal},
        {"ppl_mean", T::kReal},
        {"accuracy", T::kReal},
        {"rank_test_p", T::kReal},
        {"dissociation", T::kBoolean},
        {"seed", T::kInteger}}},
  };
  return table;
}

bool matches(const Cell& cell, ColumnType type) {
  switch (type) {
    case T::kString: return std::holds_alternative<std::string>(cell);
    case T::kInteger: return std::holds_alternative<std::int64_t>(cell);
    case T::kReal: return std::holds_alternative<double>(cell);
    case T::kBoolean: return std::holds_alternative<bool>(cell);
  }
  return false;
}

std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

nlohmann::json cell_json(const Cell& cell) {
  return std::visit(
      [](const auto& v) -> nlohmann::json {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, double>) {
          if (!std::isfinite(v)) return nullptr;
        }
        return v;
      },
      cell);
}

Cell cell_from_json(const nlohmann::json& j, ColumnType type) {
  switch (type) {
    case T::kString: return j.get<std::string>();
    case T::kInteger: return j.get<std::int64_t>();
    case T::kReal: return j.is_null() ? std::nan("") : j.get<double>();
    case T::kBoolean: return j.get<bool>();
  }
  return std::string();
}

}  // namespace

const std::vector<Column>& report_schema(const std::string& kind) {
  const auto it = schemas().find(kind);
  if (it == schemas().end()) throw ConfigError("unknown report kind '" + kind + "'");
  return it->second;
}

void Report::add_row(std::vector<Cell> row) { rows.push_back(std::move(row)); }

std::size_t Report::column(const std::string& name) const {
  const auto& cols = columns();
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i].name == name) return i;
  }
  throw UsageError("report '" + kind + "' has no column '" + name + "'");
}

const Cell& Report::at(std::size_t row, const std::string& name) const { return rows.at(row).at(column(name)); }

double Report::real(std::size_t row, const std::string& name) const { return std::get<double>(at(row, name)); }

std::string Report::text(std::size_t row, const std::string& name) const {
  return std::get<std::string>(at(row, name));
}

void Report::validate() const {
  const auto& cols = columns();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != cols.size()) {
      throw DataError("report '" + kind + "' row " + std::to_string(r) + ": expected " +
                      std::to_string(cols.size()) + " cells, got " + std::to_string(rows[r].size()));
    }
    for (std::size_t c = 0; c < cols.size(); ++c) {
      if (!matches(rows[r][c], cols[c].type)) {
        throw DataError("report '" + kind + "' row " + std::to_string(r) + ": column '" + cols[c].name +
                        "' has the wrong type");
      }
    }
  }
}

std::string to_csv(const Report& report) {
  report.validate();
  std::ostringstream out;
  out << "schema_version";
  for (const auto& col : report.columns()) out << ',' << col.name;
  out << '\n';
  for (const auto& row : report.rows) {
    out << kReportSchemaVersion;
    for (const auto& cell : row) {
      out << ',';
      std::visit(
          [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, std::string>) {
              out << csv_escape(v);
            } else if constexpr (std::is_same_v<V, double>) {
              out << format_real(v);
            } else if constexpr (std::is_same_v<V, bool>) {
              out << (v ? "true" : "false");
            } else {
              out << v;
            }
          },
          cell);
    }
    out << '\n';
  }
  return out.str();
}

nlohmann::json to_json(const Report& report) {
  report.validate();
  nlohmann::json rows = nlohmann::json::array();
  const auto& cols = report.columns();
  for (const auto& row : report.rows) {
    nlohmann::json obj = nlohmann::json::object();
    for (std::size_t c = 0; c < cols.size(); ++c) obj[cols[c].name] = cell_json(row[c]);
    rows.push_back(std::move(obj));
  }
  return {{"schema_version", kReportSchemaVersion}, {"kind", report.kind}, {"meta", report.meta}, {"rows", rows}};
}

Report report_from_json(const nlohmann::json& j) {
  try {
    const int version = j.at("schema_version").get<int>();
    if (version != kReportSchemaVersion) {
      throw DataError("unsupported report schema version " + std::to_string(version));
    }
    Report report(j.at("kind").get<std::string>());
    report.meta = j.value("meta", nlohmann::json::object());
    const auto& cols = report.columns();
    for (const auto& obj : j.at("rows")) {
      std::vector<Cell> row;
      for (const auto& col : cols) row.push_back(cell_from_json(obj.at(col.name), col.type));
      report.add_row(std::move(row));
    }
    report.validate();
    return report;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
}

void write_report(const Report& report, const std::filesystem::path& dir, const std::string& stem) {
  std::filesystem::create_directories(dir);
  const auto csv = dir / (stem + ".csv");
  const auto json = dir / (stem + ".json");
  std::ofstream c(csv);
  std::ofstream js(json);
  if (!c || !js) throw DataError("cannot write reports under " + dir.string());
  c << to_csv(report);
  js << to_json(report).dump(2) << '\n';
}

}  // namespace capwm
