/*
 * Copyright 2026 The CF-Reg Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "cfreg/textio.hpp"

#include <charconv>
#include <fstream>

#include <fmt/format.h>

#include "cfreg/error.hpp"

namespace cfreg::textio {

std::string_view Trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> SplitCsvLine(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.emplace_back(Trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

CsvTable ReadCsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorCode::kIo, fmt::format("cannot open {}", path));
  CsvTable table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (Trim(line).empty()) continue;
    auto cells = SplitCsvLine(line);
    if (table.header.empty()) {
      table.header = std::move(cells);
      continue;
    }
    if (cells.size() != table.header.size()) {
      Fail(ErrorCode::kParse,
           fmt::format("{}:{}: expected {} cells, found {}", path, line_no,
                       table.header.size(), cells.size()));
    }
    table.rows.push_back(std::move(cells));
  }
  if (table.header.empty()) Fail(ErrorCode::kParse, fmt::format("{}: empty file", path));
  return table;
}

std::string FormatDouble(double v) { return fmt::format("{}", v); }

double ParseDouble(std::string_view cell, const std::string& path, std::size_t row,
                   std::size_t col) {
  cell = Trim(cell);
  double v = 0.0;
  const auto* end = cell.data() + cell.size();
  const auto [ptr, ec] = std::from_chars(cell.data(), end, v);
  if (cell.empty() || ec != std::errc() || ptr != end) {
    Fail(ErrorCode::kParse, fmt::format("{}: row {}, column {}: not a number: '{}'",
                                        path, row + 1, col + 1, cell));
  }
  return v;
}

}  // namespace cfreg::textio
