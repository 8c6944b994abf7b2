// Result rows for study harnesses: (label, metric, value) triples rendered as
// CSV or as an aligned pivot table with one row per label.
#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace detcore {

struct ReportRow {
  std::string label;
  std::string metric;
  double value{0};

  bool operator==(const ReportRow& o) const;  // nan equals nan
};

using Report = std::vector<ReportRow>;

/// Shortest text that parses back to the same double; "nan", "inf", "-inf".
std::string format_value(double v);
/// Inverse of format_value. Throws std::invalid_argument on junk.
double parse_value(std::string_view text);

/// Header "label,metric,value"; fields with commas, quotes or newlines are
/// quoted RFC 4180 style.
void write_csv(std::ostream& os, const Report& rows);
std::string to_csv(const Report& rows);
/// Throws std::invalid_argument with a line number on malformed input.
Report parse_csv(std::string_view text);

/// Labels down, metrics across, both in first-appearance order. Missing
/// cells render as "-". `corner` heads the label column.
std::string render_table(const Report& rows, std::string_view corner = "", int precision = 4);

}  // namespace detcore
