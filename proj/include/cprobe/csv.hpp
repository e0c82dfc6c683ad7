#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace cprobe {

// RFC 4180 CSV: quoted fields may contain commas, doubled quotes and newlines.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> column(std::string_view name) const;
  // Throws SchemaError naming the missing column.
  std::size_t require_column(std::string_view name) const;
};

CsvTable parse_csv(std::string_view text);
CsvTable read_csv(const std::filesystem::path& path);

std::string csv_escape(std::string_view field);
void write_csv_row(std::ostream& out, const std::vector<std::string>& fields);

}  // namespace cprobe
