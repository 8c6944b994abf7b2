#include "detcore/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace detcore {

bool ReportRow::operator==(const ReportRow& o) const {
  const bool same = (std::isnan(value) && std::isnan(o.value)) || value == o.value;
  return label == o.label && metric == o.metric && same;
}

std::string format_value(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_value(std::string_view text) {
  if (text == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (text == "inf") return std::numeric_limits<double>::infinity();
  if (text == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc{} || r.ptr != text.data() + text.size() || text.empty())
    throw std::invalid_argument("not a number: '" + std::string(text) + "'");
  return v;
}

namespace {

std::string quote(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

// Splits one record starting at `pos`; advances past its line break.
std::vector<std::string> read_record(std::string_view text, std::size_t& pos, int line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  bool was_quoted = false;
  while (pos < text.size()) {
    const char c = text[pos++];
    if (quoted) {
      if (c != '"') {
        fields.back() += c;
      } else if (pos < text.size() && text[pos] == '"') {
        fields.back() += '"';
        ++pos;
      } else {
        quoted = false;
      }
      continue;
    }
    if (c == '"') {
      if (!fields.back().empty() || was_quoted)
        throw std::invalid_argument("csv line " + std::to_string(line) + ": stray quote");
      quoted = was_quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
      was_quoted = false;
    } else if (c == '\n') {
      break;
    } else if (c == '\r') {
      if (pos < text.size() && text[pos] == '\n') ++pos;
      break;
    } else {
      if (was_quoted)
        throw std::invalid_argument("csv line " + std::to_string(line) + ": text after quote");
      fields.back() += c;
    }
  }
  if (quoted) throw std::invalid_argument("csv line " + std::to_string(line) + ": open quote");
  return fields;
}

}  // namespace

void write_csv(std::ostream& os, const Report& rows) {
  os << "label,metric,value\n";
  for (const auto& r : rows)
    os << quote(r.label) << ',' << quote(r.metric) << ',' << format_value(r.value) << '\n';
}

std::string to_csv(const Report& rows) {
  std::ostringstream os;
  write_csv(os, rows);
  return os.str();
}

Report parse_csv(std::string_view text) {
  std::size_t pos = 0;
  int line = 1;
  const auto header = read_record(text, pos, line);
  if (header != std::vector<std::string>{"label", "metric", "value"})
    throw std::invalid_argument("csv line 1: expected header label,metric,value");
  Report out;
  while (pos < text.size()) {
    ++line;
    const auto f = read_record(text, pos, line);
    if (f.size() == 1 && f[0].empty()) continue;  // blank line
    if (f.size() != 3)
      throw std::invalid_argument("csv line " + std::to_string(line) + ": expected 3 fields");
    try {
      out.push_back({f[0], f[1], parse_value(f[2])});
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("csv line " + std::to_string(line) + ": " + e.what());
    }
  }
  return out;
}

std::string render_table(const Report& rows, std::string_view corner, int precision) {
  std::vector<std::string> labels, metrics;
  std::map<std::pair<std::string, std::string>, double> cells;
  for (const auto& r : rows) {
    if (std::find(labels.begin(), labels.end(), r.label) == labels.end()) labels.push_back(r.label);
    if (std::find(metrics.begin(), metrics.end(), r.metric) == metrics.end())
      metrics.push_back(r.metric);
    cells[{r.label, r.metric}] = r.value;
  }
  auto cell_text = [&](const std::string& l, const std::string& m) -> std::string {
    auto it = cells.find({l, m});
    if (it == cells.end()) return "-";
    const double v = it->second;
    if (!std::isfinite(v)) return format_value(v);
    std::ostringstream s;
    s << std::fixed << std::setprecision(precision) << v;
    return s.str();
  };

  std::vector<std::vector<std::string>> grid;
  grid.push_back({std::string(corner)});
  for (const auto& m : metrics) grid.back().push_back(m);
  for (const auto& l : labels) {
    grid.push_back({l});
    for (const auto& m : metrics) grid.back().push_back(cell_text(l, m));
  }
  std::vector<std::size_t> width(metrics.size() + 1, 0);
  for (const auto& row : grid)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());

  std::ostringstream os;
  for (std::size_t r = 0; r < grid.size(); ++r) {
    std::string line;
    for (std::size_t c = 0; c < grid[r].size(); ++c) {
      const std::string& t = grid[r][c];
      const std::string pad(width[c] - t.size(), ' ');
      line += c == 0 ? t + pad : "  " + pad + t;  // labels left, numbers right
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    os << line << '\n';
    if (r == 0) {
      std::size_t total = width[0];
      for (std::size_t c = 1; c < width.size(); ++c) total += width[c] + 2;
      os << std::string(total, '-') << '\n';
    }
  }
  return os.str();
}

}  // namespace detcore
