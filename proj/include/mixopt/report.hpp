#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixopt/common.hpp"
#include "mixopt/dro.hpp"
#include "mixopt/reference_trainer.hpp"
#include "mixopt/weights.hpp"

namespace mixopt {

/// Relative deviation from the uniform row that earns an up/down mark.
constexpr double kMarkThreshold = 0.25;

struct WeightReport {
  std::vector<std::string> method_names;
  std::vector<std::string> domain_names;
  std::vector<std::vector<double>> weights;        // one row per method
  std::vector<std::vector<std::string>> percents;  // rendered cells
  std::vector<std::vector<int>> marks;             // -1 down, 0 none, +1 up
  int baseline_row = -1;                           // index of the uniform row, if any
};

namespace detail {

inline std::string render_percent(double percent, int sig_digits) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.*g", sig_digits, percent);
  return std::string(buf);
}

/// Renders a row of percentages, raising precision until the printed values
/// re-sum to 100 within 0.1.
inline std::vector<std::string> render_percent_row(const std::vector<double>& weights) {
  for (int digits = 3; digits <= 17; ++digits) {
    std::vector<std::string> cells;
    double sum = 0.0;
    for (double w : weights) {
      cells.push_back(render_percent(w * 100.0, digits));
      sum += std::strtod(cells.back().c_str(), nullptr);
    }
    if (std::abs(sum - 100.0) <= 0.1) return cells;
  }
  throw numerical_error("weight row does not sum to 100%");
}

}  // namespace detail

/// Side-by-side weight table. Cells deviating from the uniform row by more
/// than +/-25% relative are marked up/down. The first row with uniform
/// provenance is the baseline; without one, no cells are marked.
inline WeightReport render_weight_table(const std::vector<MixtureWeights>& rows,
                                        const std::vector<std::string>& method_names,
                                        const std::vector<std::string>& domain_names) {
  if (rows.empty() || rows.size() != method_names.size()) {
    throw validation_error("rows/method names mismatch");
  }
  WeightReport rep;
  rep.method_names = method_names;
  rep.domain_names = domain_names;
  for (const auto& r : rows) {
    if (r.alpha.size() != domain_names.size()) {
      throw validation_error("weight vector length does not match domain names");
    }
    validate_simplex(r.alpha, 1e-9);
    rep.weights.push_back(r.alpha);
    rep.percents.push_back(detail::render_percent_row(r.alpha));
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].provenance == Provenance::uniform) {
      rep.baseline_row = static_cast<int>(r);
      break;
    }
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::vector<int> marks(domain_names.size(), 0);
    if (rep.baseline_row >= 0 && static_cast<int>(r) != rep.baseline_row) {
      const auto& base = rep.weights[static_cast<std::size_t>(rep.baseline_row)];
      for (std::size_t i = 0; i < marks.size(); ++i) {
        if (base[i] > 0.0) {
          const double rel = (rep.weights[r][i] - base[i]) / base[i];
          if (rel > kMarkThreshold) marks[i] = 1;
          if (rel < -kMarkThreshold) marks[i] = -1;
        } else if (rep.weights[r][i] > 0.0) {
          marks[i] = 1;
        }
      }
    }
    rep.marks.push_back(std::move(marks));
  }
  return rep;
}

inline std::string weight_table_text(const WeightReport& rep) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header = {"method"};
  for (const auto& d : rep.domain_names) header.push_back(d);
  cells.push_back(header);
  for (std::size_t r = 0; r < rep.weights.size(); ++r) {
    std::vector<std::string> row = {rep.method_names[r]};
    for (std::size_t i = 0; i < rep.domain_names.size(); ++i) {
      std::string cell = rep.percents[r][i] + "%";
      if (rep.marks[r][i] > 0) cell += " (+)";
      if (rep.marks[r][i] < 0) cell += " (-)";
      row.push_back(cell);
    }
    cells.push_back(std::move(row));
  }
  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      out << row[c];
      if (c + 1 < row.size()) out << std::string(width[c] - row[c].size() + 2, ' ');
    }
    out << '\n';
  }
  return out.str();
}

inline std::string weight_table_csv(const WeightReport& rep) {
  std::ostringstream out;
  out << "method,domain,weight,percent,mark\n";
  for (std::size_t r = 0; r < rep.weights.size(); ++r) {
    for (std::size_t i = 0; i < rep.domain_names.size(); ++i) {
      const char* mark = rep.marks[r][i] > 0 ? "up" : (rep.marks[r][i] < 0 ? "down" : "none");
      out << rep.method_names[r] << ',' << rep.domain_names[i] << ','
          << format_double(rep.weights[r][i]) << ',' << rep.percents[r][i] << ',' << mark << '\n';
    }
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Tidy long-format exports: (step, domain, metric, value), one file for the
// alpha trace and one for the reference loss curves, plus a schema stamp.
// ---------------------------------------------------------------------------

struct LongRow {
  std::int64_t step = 0;
  std::string domain;
  std::string metric;
  double value = 0.0;
};

inline void export_trace(const DROTrace& trace, const std::vector<CheckpointRecord>& records,
                         const std::vector<std::string>& record_domains,
                         const std::filesystem::path& out_dir) {
  if (trace.steps() == 0) throw validation_error("empty trace");
  if (records.empty()) throw validation_error("no checkpoint records");
  std::filesystem::create_directories(out_dir);

  {
    std::ofstream out(out_dir / "dro_trace_long.csv");
    if (!out) throw validation_error("cannot write dro_trace_long.csv");
    out << "step,domain,metric,value\n";
    for (std::size_t s = 0; s < trace.steps(); ++s) {
      for (std::size_t i = 0; i < trace.domain_names.size(); ++i) {
        out << (s + 1) << ',' << trace.domain_names[i] << ",alpha,"
            << format_double(trace.alpha[s][i]) << '\n';
        out << (s + 1) << ',' << trace.domain_names[i] << ",excess_loss,"
            << format_double(trace.excess[s][i]) << '\n';
      }
    }
  }
  {
    std::ofstream out(out_dir / "reference_curves_long.csv");
    if (!out) throw validation_error("cannot write reference_curves_long.csv");
    out << "step,domain,metric,value\n";
    for (const auto& rec : records) {
      for (std::size_t i = 0; i < record_domains.size(); ++i) {
        out << rec.step << ',' << record_domains[i] << ",train_loss,"
            << format_double(rec.train_loss[i]) << '\n';
        out << rec.step << ',' << record_domains[i] << ",val_loss,"
            << format_double(rec.val_loss[i]) << '\n';
      }
    }
  }
  nlohmann::json schema;
  schema["version"] = 1;
  schema["columns"] = {"step", "domain", "metric", "value"};
  schema["files"] = {{"dro_trace_long.csv", {"alpha", "excess_loss"}},
                     {"reference_curves_long.csv", {"train_loss", "val_loss"}}};
  std::ofstream out(out_dir / "trace_schema.json");
  out << schema.dump(2) << '\n';
}

inline std::vector<LongRow> read_long_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw validation_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "step,domain,metric,value") {
    throw validation_error("unexpected header in " + path.string());
  }
  std::vector<LongRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    LongRow row;
    std::size_t p0 = line.find(',');
    std::size_t p1 = line.find(',', p0 + 1);
    std::size_t p2 = line.find(',', p1 + 1);
    if (p0 == std::string::npos || p1 == std::string::npos || p2 == std::string::npos) {
      throw validation_error("malformed row in " + path.string());
    }
    row.step = std::stoll(line.substr(0, p0));
    row.domain = line.substr(p0 + 1, p1 - p0 - 1);
    row.metric = line.substr(p1 + 1, p2 - p1 - 1);
    row.value = std::strtod(line.c_str() + p2 + 1, nullptr);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace mixopt
