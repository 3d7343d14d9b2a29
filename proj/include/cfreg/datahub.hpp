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

// Tabular datasets: CSV ingestion with a JSON schema, mean imputation,
// seeded train/test splits with train-only standardization, and synthetic
// Gaussian blobs for small fixtures.

#ifndef CFREG_DATAHUB_HPP_
#define CFREG_DATAHUB_HPP_

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cfreg/ndgraph.hpp"

namespace cfreg::datahub {

using ndgraph::Tensor;

// {"name": ..., "features": [...], "label": ..., "positive": ...}
struct Schema {
  std::string name;
  std::vector<std::string> features;
  std::string label;
  // Label cell value that maps to class 1; compared numerically when both
  // sides parse as numbers, textually otherwise.
  std::string positive = "1";
};

Schema ParseSchema(const std::string& json_text, const std::string& origin = "schema");
Schema LoadSchema(const std::string& path);

struct ColumnAudit {
  std::string column;
  std::size_t missing = 0;
  double impute_value = 0.0;  // column mean over present cells
  double mean = 0.0;          // scaler statistics (train rows)
  double std = 1.0;
  bool degenerate = false;    // std was 0; scaled by 1 instead
};

struct Scaler {
  std::vector<double> mean;
  std::vector<double> std;

  Tensor Apply(const Tensor& rows) const;
  Tensor Invert(const Tensor& rows) const;
};

struct Dataset {
  std::string name;
  std::vector<std::string> feature_names;
  Tensor features;             // (n x d); standardized once split
  std::vector<double> labels;  // {0, 1}
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  std::optional<Scaler> scaler;
  std::vector<ColumnAudit> audit;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
  bool is_split() const { return !train.empty() || !test.empty(); }

  Tensor Rows(const std::vector<std::size_t>& indices) const;
  Tensor Labels(const std::vector<std::size_t>& indices) const;
  std::size_t CountPositive() const;
};

// Cells that are empty, "NA", "NaN" or "null" count as missing and are
// replaced by the column mean. A missing label is an error.
Dataset LoadCsv(const std::string& path, const Schema& schema);

// Features plus a trailing label column named `label`; values use the
// shortest round-trip form so reloading is bit exact.
void WriteCsv(const std::string& path, const Dataset& dataset);
// Schema matching WriteCsv output.
Schema SchemaFor(const Dataset& dataset);

// Seeded shuffle, first floor(train_frac * n) rows train, scaler fitted on
// train rows only and applied to every row.
Dataset SplitStandardize(Dataset dataset, double train_frac, std::uint64_t seed);

// Two unit-variance blobs at -/+ separation/2 along the first axis; exactly
// floor(label_noise * n_per_class) labels flipped in each class. Unsplit.
Dataset SynthGaussians(std::size_t n_per_class, std::size_t dim, double separation,
                       double label_noise, std::uint64_t seed);

// CSV: column,missing,impute_value,mean,std,degenerate
void WriteAuditCsv(const std::string& path, const Dataset& dataset);

}  // namespace cfreg::datahub

#endif  // CFREG_DATAHUB_HPP_
