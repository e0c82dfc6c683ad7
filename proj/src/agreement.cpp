#include "cprobe/agreement.hpp"

#include "cprobe/common.hpp"
#include "cprobe/csv.hpp"
#include "cprobe/error.hpp"

#include <cmath>
#include <map>
#include <sstream>

namespace cprobe::agreement {
namespace {

void check_binary(int v) {
  if (v != 0 && v != 1) throw DataError("kappa inputs must be 0/1 labels");
}

int parse_flag(const std::string& raw, std::size_t row) {
  const auto v = to_lower(trim(raw));
  if (v.empty() || v == "0" || v == "false" || v == "no" || v == "n") return 0;
  if (v == "1" || v == "true" || v == "yes" || v == "y") return 1;
  throw ValueError(row, "bad borderline flag '" + raw + "' on row " + std::to_string(row));
}

const char* rule_name(ConfidenceRule rule) {
  switch (rule) {
    case ConfidenceRule::unanimous: return "unanimous";
    case ConfidenceRule::near_unanimous_clean: return "near_unanimous_clean";
    case ConfidenceRule::dissenter_borderline: return "dissenter_borderline";
  }
  return "unknown";
}

}  // namespace

double cohen_kappa(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw DimensionError("rater label vectors differ in length");
  if (a.empty()) throw DataError("cohen_kappa needs at least one example");
  double agree = 0.0;
  double a1 = 0.0;
  double b1 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    check_binary(a[i]);
    check_binary(b[i]);
    agree += a[i] == b[i];
    a1 += a[i];
    b1 += b[i];
  }
  const double n = static_cast<double>(a.size());
  const double p_o = agree / n;
  const double pa = a1 / n;
  const double pb = b1 / n;
  const double p_e = pa * pb + (1.0 - pa) * (1.0 - pb);
  if (p_e >= 1.0) {
    if (p_o >= 1.0) return 1.0;
    throw UndefinedKappaError("chance agreement is 1 but observed agreement is not");
  }
  return (p_o - p_e) / (1.0 - p_e);
}

double fleiss_kappa(const std::vector<std::vector<int>>& table) {
  if (table.empty()) throw DataError("fleiss_kappa needs at least one example");
  const std::size_t n = table.front().size();
  if (n < 2) throw DataError("fleiss_kappa needs at least two raters");
  double p_bar = 0.0;
  double ones = 0.0;
  for (const auto& row : table) {
    if (row.size() != n) throw DimensionError("every example needs a label from every rater");
    double c1 = 0.0;
    for (const int v : row) {
      check_binary(v);
      c1 += v;
    }
    const double c0 = static_cast<double>(n) - c1;
    const double nn = static_cast<double>(n);
    p_bar += (c0 * c0 + c1 * c1 - nn) / (nn * (nn - 1.0));
    ones += c1;
  }
  const double items = static_cast<double>(table.size());
  p_bar /= items;
  const double p1 = ones / (items * static_cast<double>(n));
  const double p_e = p1 * p1 + (1.0 - p1) * (1.0 - p1);
  if (p_e >= 1.0) {
    if (p_bar >= 1.0) return 1.0;
    throw UndefinedKappaError("chance agreement is 1 but observed agreement is not");
  }
  return (p_bar - p_e) / (1.0 - p_e);
}

void AnnotationTable::validate() const {
  if (labels.size() != example_ids.size() || borderline.size() != example_ids.size()) {
    throw DimensionError("annotation table rows do not match the example list");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].size() != raters.size() || borderline[i].size() != raters.size()) {
      throw DimensionError("annotation row for " + example_ids[i] + " does not cover every rater");
    }
    for (const int v : labels[i]) check_binary(v);
  }
}

std::vector<int> AnnotationTable::rater_column(std::size_t rater) const {
  std::vector<int> col;
  col.reserve(labels.size());
  for (const auto& row : labels) col.push_back(row.at(rater));
  return col;
}

std::vector<ConfidentLabel> confident_filter(const AnnotationTable& table) {
  table.validate();
  const std::size_t n = table.raters.size();
  std::vector<ConfidentLabel> kept;
  for (std::size_t i = 0; i < table.labels.size(); ++i) {
    const auto& row = table.labels[i];
    const auto& flags = table.borderline[i];
    std::size_t ones = 0;
    std::size_t flagged = 0;
    for (std::size_t r = 0; r < n; ++r) {
      ones += row[r] == 1;
      flagged += flags[r] != 0;
    }
    const int majority = 2 * ones > n ? 1 : 0;
    const std::size_t agreeing = majority == 1 ? ones : n - ones;

    std::optional<ConfidenceRule> rule;
    if (agreeing == n) {
      if (flagged < 2) rule = ConfidenceRule::unanimous;
    } else if (agreeing + 1 == n && 2 * agreeing > n) {
      if (flagged == 0) {
        rule = ConfidenceRule::near_unanimous_clean;
      } else if (flagged == 1) {
        for (std::size_t r = 0; r < n; ++r) {
          if (row[r] != majority && flags[r] != 0) rule = ConfidenceRule::dissenter_borderline;
        }
      }
    }
    if (rule) kept.push_back({table.example_ids[i], i, majority, *rule});
  }
  return kept;
}

std::vector<std::vector<double>> kappa_matrix(const AnnotationTable& table) {
  table.validate();
  const std::size_t n = table.raters.size();
  std::vector<std::vector<double>> m(n, std::vector<double>(n, std::nan("")));
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      try {
        m[a][b] = cohen_kappa(table.rater_column(a), table.rater_column(b));
      } catch (const Error&) {
        m[a][b] = std::nan("");
      }
    }
  }
  return m;
}

AnnotationTable read_annotations_csv(const std::filesystem::path& path) {
  const auto csv = read_csv(path);
  const auto c_example = csv.require_column("example_id");
  const auto c_rater = csv.require_column("rater_id");
  const auto c_label = csv.require_column("label");
  const auto c_border = csv.column("borderline");

  AnnotationTable table;
  std::map<std::string, std::size_t> example_index;
  std::map<std::string, std::size_t> rater_index;
  struct Cell {
    std::size_t example, rater;
    int label, borderline;
  };
  std::vector<Cell> cells;
  for (std::size_t r = 0; r < csv.rows.size(); ++r) {
    const auto& row = csv.rows[r];
    const std::size_t lineno = r + 1;
    if (row.size() < csv.header.size()) throw SchemaError("annotation row " + std::to_string(lineno) + " is short");
    const auto label_text = trim(row[c_label]);
    if (label_text != "0" && label_text != "1") {
      throw ValueError(lineno, "label '" + row[c_label] + "' on row " + std::to_string(lineno) + " is not 0/1");
    }
    auto [eit, enew] = example_index.emplace(row[c_example], table.example_ids.size());
    if (enew) table.example_ids.push_back(row[c_example]);
    auto [rit, rnew] = rater_index.emplace(row[c_rater], table.raters.size());
    if (rnew) table.raters.push_back(row[c_rater]);
    cells.push_back({eit->second, rit->second, label_text == "1" ? 1 : 0,
                     c_border ? parse_flag(row[*c_border], lineno) : 0});
  }
  const auto n_ex = table.example_ids.size();
  const auto n_r = table.raters.size();
  table.labels.assign(n_ex, std::vector<int>(n_r, -1));
  table.borderline.assign(n_ex, std::vector<int>(n_r, 0));
  for (const auto& c : cells) {
    if (table.labels[c.example][c.rater] != -1) {
      throw DuplicateIdError("rater " + table.raters[c.rater] + " labels " + table.example_ids[c.example] + " twice");
    }
    table.labels[c.example][c.rater] = c.label;
    table.borderline[c.example][c.rater] = c.borderline;
  }
  for (std::size_t i = 0; i < n_ex; ++i) {
    for (std::size_t r = 0; r < n_r; ++r) {
      if (table.labels[i][r] == -1) {
        throw SchemaError("rater " + table.raters[r] + " has no label for " + table.example_ids[i]);
      }
    }
  }
  return table;
}

void write_confident_csv(const std::filesystem::path& path, const std::vector<ConfidentLabel>& kept) {
  std::ostringstream out;
  write_csv_row(out, {"example_id", "label", "rule"});
  for (const auto& k : kept) write_csv_row(out, {k.example_id, std::to_string(k.label), rule_name(k.rule)});
  write_text_file(path, out.str());
}

void write_kappa_matrix_csv(const std::filesystem::path& path,
                            const std::vector<std::string>& raters,
                            const std::vector<std::vector<double>>& matrix) {
  std::ostringstream out;
  std::vector<std::string> header{"rater"};
  header.insert(header.end(), raters.begin(), raters.end());
  write_csv_row(out, header);
  for (std::size_t a = 0; a < raters.size(); ++a) {
    std::vector<std::string> row{raters[a]};
    for (const double v : matrix[a]) row.push_back(format_number(v));
    write_csv_row(out, row);
  }
  write_text_file(path, out.str());
}

}  // namespace cprobe::agreement
