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

// Small CSV helpers shared by the data loader and the report writers.
// Quoted fields are not supported; none of our inputs need them.

#ifndef CFREG_TEXTIO_HPP_
#define CFREG_TEXTIO_HPP_

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace cfreg::textio {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

// Reads a header line plus rows. Every row must have as many cells as the
// header; a mismatch throws kParse naming the line.
CsvTable ReadCsv(const std::string& path);

// Shortest representation that parses back to the same double.
std::string FormatDouble(double v);

// Strict parse of a whole cell; throws kParse with path/row/column context.
double ParseDouble(std::string_view cell, const std::string& path, std::size_t row,
                   std::size_t col);

std::string_view Trim(std::string_view s);
std::vector<std::string> SplitCsvLine(std::string_view line);

}  // namespace cfreg::textio

#endif  // CFREG_TEXTIO_HPP_
