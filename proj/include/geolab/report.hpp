#pragma once

// Run reports: a fixed column set written as csv (header line) or json-lines
// (schema line, then one object per row). Missing values are empty in csv and
// null in json. Numbers use the shortest round-trip form, so both formats carry
// identical digits and re-emission is byte-identical.
//
// Wall time is deliberately not a column; the CLI writes it to a separate
// timing file so that reports stay deterministic.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "geolab/error.hpp"

namespace geolab {

struct ReportRow {
  std::string experiment;  // train, eval, sweep, freeze, cross_domain, ablation, baseline, t_test
  std::string task;
  std::string variant;
  std::optional<std::uint64_t> size;
  std::optional<std::uint64_t> replicate;
  std::string stat = "value";  // value, mean, std
  std::string model;           // last, best, or empty
  std::optional<std::uint64_t> epochs;
  std::optional<std::uint64_t> trainable_params;
  std::optional<double> loss;
  std::optional<double> sed;
  std::optional<double> ad;
  std::optional<double> l2_px;
  std::optional<double> angle_mae_deg;
  std::optional<std::uint64_t> degenerate;
  std::optional<double> t;
  std::optional<double> p;
  std::string status = "ok";  // ok, skipped
  std::string note;
  std::string config_hash;

  bool operator==(const ReportRow&) const = default;
};

enum class ReportFormat { Csv, Jsonl };

inline ReportFormat parse_report_format(const std::string& s) {
  if (s == "csv") return ReportFormat::Csv;
  if (s == "jsonl") return ReportFormat::Jsonl;
  throw Error(ErrorKind::ConfigError, "unknown report format '" + s + "' (csv or jsonl)");
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace report_detail {

using Cell = std::variant<std::string*, std::optional<std::uint64_t>*, std::optional<double>*>;

struct Column {
  const char* name;
  Cell (*get)(ReportRow&);
};

#define GEOLAB_COL(field) Column{#field, [](ReportRow& r) -> Cell { return &r.field; }}
inline const std::vector<Column>& columns() {
  static const std::vector<Column> cols{
      GEOLAB_COL(experiment), GEOLAB_COL(task),     GEOLAB_COL(variant), GEOLAB_COL(size),
      GEOLAB_COL(replicate),  GEOLAB_COL(stat),     GEOLAB_COL(model),   GEOLAB_COL(epochs),
      GEOLAB_COL(trainable_params), GEOLAB_COL(loss), GEOLAB_COL(sed),   GEOLAB_COL(ad),
      GEOLAB_COL(l2_px),      GEOLAB_COL(angle_mae_deg), GEOLAB_COL(degenerate), GEOLAB_COL(t),
      GEOLAB_COL(p),          GEOLAB_COL(status),   GEOLAB_COL(note),    GEOLAB_COL(config_hash),
  };
  return cols;
}
#undef GEOLAB_COL

inline std::string number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (v == 0.0 && std::signbit(v)) return "-0.0";  // json readers would parse "-0" as integer 0
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw Error(ErrorKind::FormatError, "bad number '" + s + "'");
  return v;
}

inline std::uint64_t parse_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw Error(ErrorKind::FormatError, "bad integer '" + s + "'");
  return v;
}

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  if (quoted) throw Error(ErrorKind::FormatError, "unterminated quote in csv line");
  return out;
}

}  // namespace report_detail

inline std::vector<std::string> report_columns() {
  std::vector<std::string> out;
  for (const auto& c : report_detail::columns()) out.emplace_back(c.name);
  return out;
}

inline void write_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
  using namespace report_detail;
  const auto& cols = columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i].name;
  out << '\n';
  for (ReportRow row : rows) {
    for (std::size_t i = 0; i < cols.size(); ++i) {
      if (i) out << ',';
      std::visit(
          [&](auto* v) {
            using V = std::remove_pointer_t<decltype(v)>;
            if constexpr (std::is_same_v<V, std::string>) out << csv_quote(*v);
            else if constexpr (std::is_same_v<V, std::optional<std::uint64_t>>) {
              if (*v) out << **v;
            } else if (*v) {
              out << number(**v);
            }
          },
          cols[i].get(row));
    }
    out << '\n';
  }
}

inline void write_jsonl(std::ostream& out, const std::vector<ReportRow>& rows) {
  using namespace report_detail;
  const auto& cols = columns();
  out << R"({"schema":"geolab.report","version":1,"columns":[)";
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << '"' << cols[i].name << '"';
  out << "]}\n";
  for (ReportRow row : rows) {
    out << '{';
    for (std::size_t i = 0; i < cols.size(); ++i) {
      out << (i ? "," : "") << '"' << cols[i].name << "\":";
      std::visit(
          [&](auto* v) {
            using V = std::remove_pointer_t<decltype(v)>;
            if constexpr (std::is_same_v<V, std::string>) out << nlohmann::json(*v).dump();
            else if constexpr (std::is_same_v<V, std::optional<std::uint64_t>>) {
              if (*v) out << **v;
              else out << "null";
            } else if (!*v) {
              out << "null";
            } else if (std::isfinite(**v)) {
              out << number(**v);
            } else {
              out << '"' << number(**v) << '"';
            }
          },
          cols[i].get(row));
    }
    out << "}\n";
  }
}

inline void write_report(std::ostream& out, const std::vector<ReportRow>& rows, ReportFormat f) {
  f == ReportFormat::Csv ? write_csv(out, rows) : write_jsonl(out, rows);
}

inline std::string report_text(const std::vector<ReportRow>& rows, ReportFormat f) {
  std::ostringstream os;
  write_report(os, rows, f);
  return os.str();
}

inline std::vector<ReportRow> read_csv(std::istream& in) {
  using namespace report_detail;
  const auto& cols = columns();
  std::string line;
  if (!std::getline(in, line) || csv_split(line) != report_columns()) {
    throw Error(ErrorKind::FormatError, "csv header does not match the report columns");
  }
  std::vector<ReportRow> rows;
  while (std::getline(in, line)) {
    const auto cells = csv_split(line);
    if (cells.size() != cols.size()) throw Error(ErrorKind::FormatError, "csv row has wrong cell count");
    ReportRow row;
    for (std::size_t i = 0; i < cols.size(); ++i) {
      std::visit(
          [&](auto* v) {
            using V = std::remove_pointer_t<decltype(v)>;
            if constexpr (std::is_same_v<V, std::string>) *v = cells[i];
            else if constexpr (std::is_same_v<V, std::optional<std::uint64_t>>) {
              if (!cells[i].empty()) *v = parse_u64(cells[i]);
            } else if (!cells[i].empty()) {
              *v = parse_double(cells[i]);
            }
          },
          cols[i].get(row));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::vector<ReportRow> read_jsonl(std::istream& in) {
  using namespace report_detail;
  const auto& cols = columns();
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::FormatError, "empty jsonl report");
  try {
    const auto head = nlohmann::json::parse(line);
    if (head.at("schema") != "geolab.report" || head.at("columns").get<std::vector<std::string>>() != report_columns()) {
      throw Error(ErrorKind::FormatError, "jsonl schema line does not match the report columns");
    }
    std::vector<ReportRow> rows;
    while (std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line);
      ReportRow row;
      for (const auto& c : cols) {
        const auto& cell = j.at(c.name);
        std::visit(
            [&](auto* v) {
              using V = std::remove_pointer_t<decltype(v)>;
              if constexpr (std::is_same_v<V, std::string>) *v = cell.template get<std::string>();
              else if constexpr (std::is_same_v<V, std::optional<std::uint64_t>>) {
                if (!cell.is_null()) *v = cell.template get<std::uint64_t>();
              } else if (cell.is_string()) {
                *v = parse_double(cell.template get<std::string>());
              } else if (!cell.is_null()) {
                *v = cell.template get<double>();
              }
            },
            c.get(row));
      }
      rows.push_back(std::move(row));
    }
    return rows;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::FormatError, std::string("jsonl report: ") + e.what());
  }
}

inline std::vector<ReportRow> read_report(std::istream& in, ReportFormat f) {
  return f == ReportFormat::Csv ? read_csv(in) : read_jsonl(in);
}

inline void save_report(const std::string& path, const std::vector<ReportRow>& rows, ReportFormat f) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IOError, "cannot open " + path + " for writing");
  write_report(out, rows, f);
  if (!out) throw Error(ErrorKind::IOError, "failed writing " + path);
}

inline std::vector<ReportRow> load_report(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IOError, "cannot open " + path);
  const bool jsonl = path.size() >= 6 && path.substr(path.size() - 6) == ".jsonl";
  return read_report(in, jsonl ? ReportFormat::Jsonl : ReportFormat::Csv);
}

}  // namespace geolab
