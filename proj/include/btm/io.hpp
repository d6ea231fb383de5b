#pragma once

// Delimited-text reading and atomic file output.

#include <filesystem>
#include <istream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace btm {

struct CsvRow {
  int line = 0;  // 1-based line number in the source
  std::vector<std::string> fields;
};

class CsvTable {
 public:
  // Parses comma-separated text with an initial header row. Fields may be
  // double-quoted; blank lines are skipped.
  static CsvTable parse(std::istream& in);
  static CsvTable read(const std::filesystem::path& path);

  const std::vector<std::string>& header() const { return header_; }
  const std::vector<CsvRow>& rows() const { return rows_; }

  std::optional<int> column(std::string_view name) const;
  // Throws DataError naming the missing column.
  int require_column(std::string_view name) const;

 private:
  std::vector<std::string> header_;
  std::vector<CsvRow> rows_;
};

// Numeric field parsers that throw DataError mentioning the line number.
double parse_double(const CsvRow& row, int column, std::string_view name);
std::optional<double> parse_optional_double(const CsvRow& row, int column,
                                            std::string_view name);
long parse_int(const CsvRow& row, int column, std::string_view name);

// Writes to a temporary sibling file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

// Shortest round-trip decimal representation.
std::string format_double(double x);

std::string csv_escape(std::string_view field);

}  // namespace btm
