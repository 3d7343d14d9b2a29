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

#include "cfreg/datahub.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "cfreg/error.hpp"
#include "cfreg/textio.hpp"
#include "json.hpp"

namespace cfreg::datahub {

namespace {

bool IsMissing(std::string_view cell) {
  return cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan" ||
         cell == "null" || cell == "?";
}

std::optional<double> AsNumber(std::string_view s) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (s.empty() || ec != std::errc() || ptr != end) return std::nullopt;
  return v;
}

bool MatchesPositive(std::string_view cell, const std::string& positive) {
  const auto a = AsNumber(cell);
  const auto b = AsNumber(positive);
  if (a && b) return *a == *b;
  return cell == positive;
}

}  // namespace

Schema ParseSchema(const std::string& json_text, const std::string& origin) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorCode::kParse, fmt::format("{}: {}", origin, e.what()));
  }
  Schema s;
  try {
    s.name = j.value("name", std::string("dataset"));
    s.features = j.at("features").get<std::vector<std::string>>();
    s.label = j.at("label").get<std::string>();
    if (j.contains("positive")) {
      const auto& p = j.at("positive");
      s.positive = p.is_string() ? p.get<std::string>() : p.dump();
    }
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorCode::kParse, fmt::format("{}: {}", origin, e.what()));
  }
  if (s.features.empty()) Fail(ErrorCode::kParse, fmt::format("{}: no feature columns", origin));
  return s;
}

Schema LoadSchema(const std::string& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorCode::kIo, fmt::format("cannot open schema {}", path));
  std::stringstream buf;
  buf << in.rdbuf();
  return ParseSchema(buf.str(), path);
}

Tensor Scaler::Apply(const Tensor& rows) const {
  std::vector<double> v = rows.vec();
  const std::size_t d = rows.cols();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] - mean[i % d]) / std[i % d];
  return Tensor(rows.shape(), std::move(v));
}

Tensor Scaler::Invert(const Tensor& rows) const {
  std::vector<double> v = rows.vec();
  const std::size_t d = rows.cols();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = v[i] * std[i % d] + mean[i % d];
  return Tensor(rows.shape(), std::move(v));
}

Tensor Dataset::Rows(const std::vector<std::size_t>& indices) const {
  const std::size_t d = dim();
  std::vector<double> out;
  out.reserve(indices.size() * d);
  const auto& all = features.vec();
  for (auto i : indices) out.insert(out.end(), all.begin() + i * d, all.begin() + (i + 1) * d);
  return Tensor::Matrix(indices.size(), d, std::move(out));
}

Tensor Dataset::Labels(const std::vector<std::size_t>& indices) const {
  std::vector<double> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels[i]);
  return Tensor::Vector(std::move(out));
}

std::size_t Dataset::CountPositive() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1.0));
}

Dataset LoadCsv(const std::string& path, const Schema& schema) {
  const auto table = textio::ReadCsv(path);
  if (table.rows.empty()) Fail(ErrorCode::kParse, fmt::format("{}: no data rows", path));
  auto column_of = [&](const std::string& name) {
    const auto it = std::find(table.header.begin(), table.header.end(), name);
    if (it == table.header.end()) {
      Fail(ErrorCode::kParse, fmt::format("{}: missing column '{}'", path, name));
    }
    return static_cast<std::size_t>(it - table.header.begin());
  };
  std::vector<std::size_t> cols;
  for (const auto& f : schema.features) cols.push_back(column_of(f));
  const std::size_t label_col = column_of(schema.label);

  const std::size_t n = table.rows.size();
  const std::size_t d = cols.size();
  std::vector<double> values(n * d, 0.0);
  std::vector<bool> missing(n * d, false);
  Dataset ds;
  ds.name = schema.name;
  ds.feature_names = schema.features;
  ds.labels.resize(n);
  ds.audit.resize(d);

  for (std::size_t r = 0; r < n; ++r) {
    const auto& row = table.rows[r];
    const std::string& label = row[label_col];
    if (IsMissing(label)) {
      Fail(ErrorCode::kParse, fmt::format("{}: row {}, column {}: missing label", path,
                                          r + 1, label_col + 1));
    }
    ds.labels[r] = MatchesPositive(label, schema.positive) ? 1.0 : 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const std::string& cell = row[cols[j]];
      if (IsMissing(cell)) {
        missing[r * d + j] = true;
        continue;
      }
      const double v = textio::ParseDouble(cell, path, r, cols[j]);
      if (!std::isfinite(v)) {
        Fail(ErrorCode::kParse, fmt::format("{}: row {}, column {}: non-finite value",
                                            path, r + 1, cols[j] + 1));
      }
      values[r * d + j] = v;
    }
  }

  for (std::size_t j = 0; j < d; ++j) {
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t r = 0; r < n; ++r) {
      if (!missing[r * d + j]) {
        sum += values[r * d + j];
        ++present;
      }
    }
    if (present == 0) {
      Fail(ErrorCode::kParse, fmt::format("{}: column '{}' has no values", path,
                                          schema.features[j]));
    }
    auto& a = ds.audit[j];
    a.column = schema.features[j];
    a.missing = n - present;
    a.impute_value = sum / static_cast<double>(present);
    for (std::size_t r = 0; r < n; ++r) {
      if (missing[r * d + j]) values[r * d + j] = a.impute_value;
    }
  }
  ds.features = Tensor::Matrix(n, d, std::move(values));
  return ds;
}

void WriteCsv(const std::string& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) Fail(ErrorCode::kIo, fmt::format("cannot write {}", path));
  for (const auto& name : dataset.feature_names) out << name << ',';
  out << "label\n";
  const std::size_t d = dataset.dim();
  for (std::size_t r = 0; r < dataset.size(); ++r) {
    for (std::size_t j = 0; j < d; ++j) {
      out << textio::FormatDouble(dataset.features.at(r, j)) << ',';
    }
    out << (dataset.labels[r] == 1.0 ? 1 : 0) << '\n';
  }
}

Schema SchemaFor(const Dataset& dataset) {
  return Schema{dataset.name, dataset.feature_names, "label", "1"};
}

Dataset SplitStandardize(Dataset ds, double train_frac, std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) {
    Fail(ErrorCode::kInvalidArgument,
         fmt::format("split: train_frac must be in (0, 1), got {}", train_frac));
  }
  const std::size_t n = ds.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::floor(train_frac * static_cast<double>(n)));
  if (n_train == 0 || n_train == n) {
    Fail(ErrorCode::kInvalidArgument,
         fmt::format("split: {} rows leave an empty train or test side", n));
  }
  ds.train.assign(order.begin(), order.begin() + n_train);
  ds.test.assign(order.begin() + n_train, order.end());

  const std::size_t d = ds.dim();
  Scaler sc;
  sc.mean.assign(d, 0.0);
  sc.std.assign(d, 0.0);
  for (auto i : ds.train)
    for (std::size_t j = 0; j < d; ++j) sc.mean[j] += ds.features.at(i, j);
  for (auto& m : sc.mean) m /= static_cast<double>(n_train);
  for (auto i : ds.train) {
    for (std::size_t j = 0; j < d; ++j) {
      const double c = ds.features.at(i, j) - sc.mean[j];
      sc.std[j] += c * c;
    }
  }
  if (ds.audit.size() != d) {
    ds.audit.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
      ds.audit[j].column = j < ds.feature_names.size() ? ds.feature_names[j] : fmt::format("x{}", j);
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    sc.std[j] = std::sqrt(sc.std[j] / static_cast<double>(n_train));
    ds.audit[j].mean = sc.mean[j];
    ds.audit[j].degenerate = !(sc.std[j] > 0.0);
    if (ds.audit[j].degenerate) sc.std[j] = 1.0;
    ds.audit[j].std = sc.std[j];
  }
  ds.features = sc.Apply(ds.features);
  ds.scaler = std::move(sc);
  return ds;
}

Dataset SynthGaussians(std::size_t n_per_class, std::size_t dim, double separation,
                       double label_noise, std::uint64_t seed) {
  if (n_per_class < 1 || dim < 1) {
    Fail(ErrorCode::kInvalidArgument, "synth: n_per_class and dim must be >= 1");
  }
  if (!(separation >= 0.0)) {
    Fail(ErrorCode::kInvalidArgument, fmt::format("synth: separation {} < 0", separation));
  }
  if (!(label_noise >= 0.0 && label_noise < 0.5)) {
    Fail(ErrorCode::kInvalidArgument,
         fmt::format("synth: label_noise must be in [0, 0.5), got {}", label_noise));
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t n = 2 * n_per_class;
  std::vector<double> x(n * dim);
  Dataset ds;
  ds.name = "synthetic";
  for (std::size_t j = 0; j < dim; ++j) ds.feature_names.push_back(fmt::format("x{}", j));
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double y = i < n_per_class ? 0.0 : 1.0;
    ds.labels[i] = y;
    for (std::size_t j = 0; j < dim; ++j) x[i * dim + j] = gauss(rng);
    x[i * dim] += (y == 1.0 ? 0.5 : -0.5) * separation;
  }
  const auto flips = static_cast<std::size_t>(
      std::floor(label_noise * static_cast<double>(n_per_class)));
  for (std::size_t c = 0; c < 2; ++c) {
    std::vector<std::size_t> members(n_per_class);
    std::iota(members.begin(), members.end(), c * n_per_class);
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t k = 0; k < flips; ++k) ds.labels[members[k]] = 1.0 - ds.labels[members[k]];
  }
  ds.features = Tensor::Matrix(n, dim, std::move(x));
  return ds;
}

void WriteAuditCsv(const std::string& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) Fail(ErrorCode::kIo, fmt::format("cannot write {}", path));
  out << "column,missing,impute_value,mean,std,degenerate\n";
  for (const auto& a : dataset.audit) {
    out << a.column << ',' << a.missing << ',' << textio::FormatDouble(a.impute_value)
        << ',' << textio::FormatDouble(a.mean) << ',' << textio::FormatDouble(a.std) << ','
        << (a.degenerate ? 1 : 0) << '\n';
  }
}

}  // namespace cfreg::datahub
