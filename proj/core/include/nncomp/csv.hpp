// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace nncomp {

using CsvRow = std::vector<std::string>;

/// Header row plus data rows.
struct CsvTable {
  CsvRow header;
  std::vector<CsvRow> rows;

  bool operator==(const CsvTable&) const = default;
};

/// RFC 4180: fields containing a comma, quote, CR or LF are quoted and inner
/// quotes doubled. Lines end in CRLF.
std::string csv_escape(std::string_view field);
std::string write_csv(const CsvTable& table);
CsvTable parse_csv(std::string_view text);

void save_csv(const CsvTable& table, const std::filesystem::path& path);
CsvTable load_csv(const std::filesystem::path& path);

/// Shortest decimal text that reads back to the same double.
std::string format_double(double v);
std::string format_shape(const std::vector<std::size_t>& shape);

}  // namespace nncomp
