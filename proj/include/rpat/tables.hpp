#pragma once

#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "rpat/core.hpp"
#include "rpat/eval.hpp"

namespace rpat {

inline constexpr double kTableTolerance = 1e-3;

/// A printed number together with the number of decimals it was printed with.
struct PrintedValue {
  double value = 0.0;
  int decimals = 0;
  std::string text;
};

inline PrintedValue parse_printed(const std::string& text) {
  PrintedValue p;
  p.text = text;
  std::size_t used = 0;
  try {
    p.value = std::stod(text, &used);
  } catch (const std::exception&) {
    throw ParseError("not a number: '" + text + "'");
  }
  if (used != text.size()) throw ParseError("trailing characters in number '" + text + "'");
  const auto dot = text.find('.');
  p.decimals = dot == std::string::npos ? 0 : static_cast<int>(text.size() - dot - 1);
  return p;
}

inline double round_to(double v, int decimals) {
  const double scale = std::pow(10.0, decimals);
  return std::round(v * scale) / scale;
}

struct TableRow {
  std::string norm;
  std::string dataset;
  std::string method;
  std::string variant;
  double clean = 0.0;
  double robust = 0.0;
  PrintedValue mean;
  PrintedValue nrr;
};

struct TableCheck {
  TableRow row;
  double mean = 0.0;  // recomputed
  double nrr = 0.0;
  double mean_error = 0.0;  // after rounding to the printed precision
  double nrr_error = 0.0;
  bool ok = false;
};

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}
}  // namespace detail

/// Reads `norm,dataset,method,variant,clean,robust,mean,nrr` rows; lines
/// starting with '#' are comments.
inline std::vector<TableRow> read_table_rows(std::istream& in) {
  std::vector<TableRow> rows;
  bool header = false;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "norm,dataset,method,variant,clean,robust,mean,nrr")
        throw ParseError("unexpected table header: " + line);
      header = true;
      continue;
    }
    const auto c = detail::split_csv_line(line);
    if (c.size() != 8) throw ParseError(fmt::format("line {}: expected 8 cells, got {}", lineno, c.size()));
    TableRow r{c[0], c[1], c[2], c[3], parse_printed(c[4]).value, parse_printed(c[5]).value,
               parse_printed(c[6]), parse_printed(c[7])};
    rows.push_back(std::move(r));
  }
  if (!header) throw ParseError("table file has no header");
  return rows;
}

inline TableCheck check_row(const TableRow& r) {
  TableCheck c;
  c.row = r;
  c.mean = mean_score(r.clean, r.robust);
  c.nrr = nrr(r.clean, r.robust);
  c.mean_error = std::abs(round_to(c.mean, r.mean.decimals) - r.mean.value);
  c.nrr_error = std::abs(round_to(c.nrr, r.nrr.decimals) - r.nrr.value);
  // Small slack so that a difference of exactly one unit in the third decimal passes.
  c.ok = c.mean_error <= kTableTolerance + 1e-9 && c.nrr_error <= kTableTolerance + 1e-9;
  return c;
}

inline std::vector<TableCheck> reproduce_tables(std::istream& in) {
  std::vector<TableCheck> out;
  for (const auto& r : read_table_rows(in)) out.push_back(check_row(r));
  return out;
}

inline std::vector<TableCheck> reproduce_tables(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open table file " + path);
  return reproduce_tables(in);
}

inline void write_table_checks(std::ostream& out, const std::vector<TableCheck>& checks,
                               const std::string& hash) {
  out << "# config=" << hash << '\n'
      << "norm,dataset,method,variant,clean,robust,mean,nrr,printed_mean,printed_nrr,status\n";
  for (const auto& c : checks)
    out << fmt::format("{},{},{},{},{:.2f},{:.2f},{:.3f},{:.3f},{},{},{}\n", c.row.norm,
                       c.row.dataset, c.row.method, c.row.variant, c.row.clean, c.row.robust,
                       c.mean, c.nrr, c.row.mean.text, c.row.nrr.text, c.ok ? "ok" : "MISMATCH");
}

/// Mean and sample standard deviation (n - 1); spread is 0 for a single value.
struct Aggregate {
  double mean = 0.0;
  double spread = 0.0;
  std::size_t n = 0;
};

inline Aggregate aggregate(const std::vector<double>& v) {
  if (v.empty()) throw ContractError("aggregate of no values");
  Aggregate a;
  a.n = v.size();
  for (double x : v) a.mean += x;
  a.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - a.mean) * (x - a.mean);
    a.spread = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return a;
}

/// Reads report CSVs (`# config=` line, then kReportCsvHeader) and groups
/// rows by tag. Each returned entry maps a column name to its aggregate.
struct ReportAggregate {
  std::string tag;
  std::map<std::string, Aggregate> columns;
};

inline std::vector<ReportAggregate> aggregate_reports(const std::vector<std::string>& csv_texts) {
  static const std::vector<std::string> numeric{"clean", "robust_pgd20", "mean", "nrr",
                                                "mse_success", "mse_failure"};
  std::map<std::string, std::map<std::string, std::vector<double>>> values;
  std::vector<std::string> order;
  for (const auto& text : csv_texts) {
    std::istringstream in(text);
    std::vector<std::string> header;
    for (std::string line; std::getline(in, line);) {
      if (line.empty() || line[0] == '#') continue;
      if (header.empty()) {
        header = detail::split_csv_line(line);
        if (line != kReportCsvHeader) throw ParseError("not a report CSV: " + line);
        continue;
      }
      const auto cells = detail::split_csv_line(line);
      if (cells.size() != header.size()) throw ParseError("ragged report row: " + line);
      const std::string& tag = cells[0];
      if (!values.count(tag)) order.push_back(tag);
      auto& cols = values[tag];
      for (std::size_t i = 1; i < cells.size(); ++i) {
        if (cells[i].empty()) continue;
        bool wanted = false;
        for (const auto& n : numeric) wanted |= n == header[i];
        if (wanted) cols[header[i]].push_back(parse_printed(cells[i]).value);
      }
    }
  }
  std::vector<ReportAggregate> out;
  for (const auto& tag : order) {
    ReportAggregate r{tag, {}};
    for (const auto& [col, v] : values[tag]) r.columns[col] = aggregate(v);
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_aggregates(std::ostream& out, const std::vector<ReportAggregate>& aggs,
                             const std::string& hash) {
  out << "# config=" << hash << '\n' << "tag,column,n,mean,spread\n";
  for (const auto& a : aggs)
    for (const auto& [col, v] : a.columns)
      out << fmt::format("{},{},{},{:.6f},{:.6f}\n", a.tag, col, v.n, v.mean, v.spread);
}

}  // namespace rpat
