#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace agnocomm {

// Shortest representation that parses back to the same double.
std::string format_double(double v);
double parse_double(std::string_view s);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const;
  double number(std::size_t row, std::string_view name) const;
};

void write_csv(const std::filesystem::path& path, const CsvTable& table);
CsvTable read_csv(const std::filesystem::path& path);

}  // namespace agnocomm
