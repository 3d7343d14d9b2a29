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

#include "cfreg/models.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <utility>

#include <fmt/format.h>

#include "cfreg/error.hpp"
#include "json.hpp"

namespace cfreg::models {

using ndgraph::Shape;

std::uint64_t Binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::uint64_t result = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    // result * (n - k + i) / i stays integral at every step.
    const std::uint64_t num = n - k + i;
    if (result > std::numeric_limits<std::uint64_t>::max() / num) {
      return std::numeric_limits<std::uint64_t>::max();
    }
    result = result * num / i;
  }
  return result;
}

int ChooseDegree(std::size_t n_features, std::size_t n_train) {
  if (n_features == 0 || n_train == 0) {
    Fail(ErrorCode::kInvalidArgument,
         "choose_degree: n_features and n_train must be positive");
  }
  int degree = 0;
  while (Binomial(n_features + degree, degree) <= n_train) ++degree;
  return degree;
}

// --- PolyExpander -----------------------------------------------------------

namespace {

// Exponent vectors of total degree `remaining` over dims [pos, n), in
// lexicographically descending order.
void EnumerateDegree(std::size_t pos, int remaining, std::vector<int>& current,
                     std::vector<std::vector<int>>& out) {
  if (pos + 1 == current.size()) {
    current[pos] = remaining;
    out.push_back(current);
    current[pos] = 0;
    return;
  }
  for (int e = remaining; e >= 0; --e) {
    current[pos] = e;
    EnumerateDegree(pos + 1, remaining - e, current, out);
  }
  current[pos] = 0;
}

}  // namespace

PolyExpander::PolyExpander(std::size_t input_dim, int degree)
    : input_dim_(input_dim), degree_(degree) {
  if (input_dim == 0 || degree < 0) {
    Fail(ErrorCode::kInvalidArgument,
         fmt::format("poly_expand: invalid input_dim {} / degree {}", input_dim,
                     degree));
  }
  std::vector<int> current(input_dim, 0);
  for (int k = 0; k <= degree; ++k) EnumerateDegree(0, k, current, terms_);

  std::map<std::vector<int>, std::size_t> position;
  for (std::size_t t = 0; t < terms_.size(); ++t) position[terms_[t]] = t;
  parent_.assign(terms_.size(), 0);
  factor_.assign(terms_.size(), 0);
  for (std::size_t t = 1; t < terms_.size(); ++t) {
    std::vector<int> e = terms_[t];
    std::size_t j = 0;
    while (e[j] == 0) ++j;
    e[j] -= 1;
    parent_[t] = position.at(e);
    factor_[t] = j;
  }
}

std::vector<double> PolyExpander::Expand(std::span<const double> x) const {
  if (x.size() != input_dim_) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("poly_expand: expected {} features, got {}", input_dim_,
                     x.size()));
  }
  std::vector<double> out(terms_.size());
  out[0] = 1.0;
  for (std::size_t t = 1; t < terms_.size(); ++t) {
    out[t] = out[parent_[t]] * x[factor_[t]];
  }
  return out;
}

Tensor PolyExpander::ExpandRows(const Tensor& rows) const {
  if (rows.rank() != 2 || rows.shape()[1] != input_dim_) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("poly_expand: expected rows of {} features, got {}",
                     input_dim_, ndgraph::ShapeToString(rows.shape())));
  }
  const std::size_t n = rows.shape()[0];
  const std::size_t terms = terms_.size();
  std::vector<double> out(n * terms);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = Expand(rows.data().subspan(i * input_dim_, input_dim_));
    std::copy(row.begin(), row.end(), out.begin() + i * terms);
  }
  return Tensor::Matrix(n, terms, std::move(out));
}

const char* ActivationName(Activation a) {
  return a == Activation::kRelu ? "relu" : "tanh";
}

Activation ParseActivation(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  Fail(ErrorCode::kInvalidArgument,
       fmt::format("unknown activation '{}'", name));
}

// --- Model ------------------------------------------------------------------

namespace {

Tensor UniformTensor(Shape shape, double limit, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

Model Model::Linear(std::size_t n_features, std::uint64_t seed) {
  if (n_features == 0) Fail(ErrorCode::kInvalidArgument, "linear model: zero features");
  std::mt19937_64 rng(seed);
  Model m;
  m.input_dim_ = n_features;
  const double limit = 1.0 / std::sqrt(static_cast<double>(n_features));
  m.impl_ = LinearModel{Expr::Variable(UniformTensor({n_features}, limit, rng))};
  return m;
}

Model Model::LinearFromTheta(Tensor theta) {
  if (theta.rank() != 1 || theta.size() == 0) {
    Fail(ErrorCode::kShapeMismatch, "linear model: theta must be a non-empty vector");
  }
  Model m;
  m.input_dim_ = theta.size();
  m.impl_ = LinearModel{Expr::Variable(std::move(theta))};
  return m;
}

Model Model::Mlp(std::size_t input_dim, std::vector<std::size_t> hidden_widths,
                 Activation activation, double dropout_rate, std::uint64_t seed) {
  if (input_dim == 0) Fail(ErrorCode::kInvalidArgument, "mlp: zero input dim");
  for (auto w : hidden_widths) {
    if (w == 0) Fail(ErrorCode::kInvalidArgument, "mlp: hidden widths must be positive");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    Fail(ErrorCode::kInvalidArgument,
         fmt::format("mlp: dropout rate {} outside [0, 1)", dropout_rate));
  }
  std::mt19937_64 rng(seed);
  MlpModel mlp;
  mlp.hidden_widths = hidden_widths;
  mlp.activation = activation;
  mlp.dropout_rate = dropout_rate;
  std::size_t fan_in = input_dim;
  for (std::size_t width : hidden_widths) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + width));
    mlp.weights.push_back(Expr::Variable(UniformTensor({fan_in, width}, limit, rng)));
    mlp.biases.push_back(Expr::Variable(Tensor::Zeros({width})));
    fan_in = width;
  }
  // Output layer: a weight vector and a scalar bias.
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + 1));
  mlp.weights.push_back(Expr::Variable(UniformTensor({fan_in}, limit, rng)));
  mlp.biases.push_back(Expr::Variable(Tensor::Scalar(0.0)));

  Model m;
  m.input_dim_ = input_dim;
  m.impl_ = std::move(mlp);
  return m;
}

const LinearModel& Model::linear() const {
  if (!is_linear()) Fail(ErrorCode::kUnsupported, "model is not linear");
  return std::get<LinearModel>(impl_);
}

const MlpModel& Model::mlp() const {
  if (is_linear()) Fail(ErrorCode::kUnsupported, "model is not an mlp");
  return std::get<MlpModel>(impl_);
}

std::vector<Expr> Model::params() const {
  if (is_linear()) return {linear().theta};
  const auto& m = mlp();
  std::vector<Expr> out;
  for (std::size_t l = 0; l < m.weights.size(); ++l) {
    out.push_back(m.weights[l]);
    out.push_back(m.biases[l]);
  }
  return out;
}

std::vector<Tensor> Model::param_values() const {
  std::vector<Tensor> out;
  for (const auto& p : params()) out.push_back(p.value());
  return out;
}

std::vector<std::string> Model::param_names() const {
  if (is_linear()) return {"theta"};
  std::vector<std::string> out;
  for (std::size_t l = 0; l < mlp().weights.size(); ++l) {
    out.push_back(fmt::format("W{}", l));
    out.push_back(fmt::format("b{}", l));
  }
  return out;
}

void Model::set_param_values(const std::vector<Tensor>& values) {
  const auto current = params();
  if (values.size() != current.size()) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("set_param_values: expected {} tensors, got {}",
                     current.size(), values.size()));
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != current[i].shape()) {
      Fail(ErrorCode::kShapeMismatch,
           fmt::format("set_param_values: parameter {} shape {} vs {}", i,
                       ndgraph::ShapeToString(current[i].shape()),
                       ndgraph::ShapeToString(values[i].shape())));
    }
  }
  if (is_linear()) {
    std::get<LinearModel>(impl_).theta = Expr::Variable(values[0]);
    return;
  }
  auto& m = std::get<MlpModel>(impl_);
  for (std::size_t l = 0; l < m.weights.size(); ++l) {
    m.weights[l] = Expr::Variable(values[2 * l]);
    m.biases[l] = Expr::Variable(values[2 * l + 1]);
  }
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params()) n += p.value().size();
  return n;
}

std::size_t Model::weight_count() const {
  if (is_linear()) return parameter_count();
  std::size_t n = 0;
  for (const auto& w : mlp().weights) n += w.value().size();
  return n;
}

Expr Model::ForwardLogits(const Expr& rows, Mode mode, std::mt19937_64* rng) const {
  if (rows.value().rank() != 2 || rows.shape()[1] != input_dim_) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("forward: expected rows of {} features, got {}", input_dim_,
                     ndgraph::ShapeToString(rows.shape())));
  }
  if (is_linear()) return ndgraph::MatMul(rows, linear().theta);

  const auto& m = mlp();
  const bool dropout = mode == Mode::kTrain && m.dropout_rate > 0.0;
  if (dropout && rng == nullptr) {
    Fail(ErrorCode::kInvalidArgument, "forward: dropout in train mode needs an rng");
  }
  Expr h = rows;
  for (std::size_t l = 0; l + 1 < m.weights.size(); ++l) {
    h = ndgraph::AddRowBias(ndgraph::MatMul(h, m.weights[l]), m.biases[l]);
    h = m.activation == Activation::kRelu ? ndgraph::Relu(h) : ndgraph::Tanh(h);
    if (dropout) {
      // Inverted dropout: survivors scaled by 1/(1-p).
      std::bernoulli_distribution keep(1.0 - m.dropout_rate);
      const double scale = 1.0 / (1.0 - m.dropout_rate);
      std::vector<double> mask(h.value().size());
      for (auto& v : mask) v = keep(*rng) ? scale : 0.0;
      h = ndgraph::MulConst(h, Tensor(h.shape(), std::move(mask)));
    }
  }
  return ndgraph::AddScalar(ndgraph::MatMul(h, m.weights.back()), m.biases.back());
}

Expr Model::ForwardLogit(const Tensor& x, Mode mode, std::mt19937_64* rng) const {
  if (x.rank() != 1 || x.size() != input_dim_) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("forward: expected {} features, got {}", input_dim_,
                     ndgraph::ShapeToString(x.shape())));
  }
  const Expr row = Expr::Constant(Tensor::Matrix(1, input_dim_, x.vec()));
  return ndgraph::Sum(ForwardLogits(row, mode, rng));
}

Tensor Model::PredictLogits(const Tensor& rows) const {
  ndgraph::NoGradGuard guard;
  return ForwardLogits(Expr::Constant(rows), Mode::kEval).value();
}

Tensor Model::ToModelInput(const Tensor& raw_rows) const {
  return expander_ ? expander_->ExpandRows(raw_rows) : raw_rows;
}

Tensor Model::PredictRawLogits(const Tensor& raw_rows) const {
  return PredictLogits(ToModelInput(raw_rows));
}

// --- Checkpoints ------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'F', 'R', 'E', 'G', 'C', 'K', 'P'};
constexpr std::uint32_t kFormatVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

template <typename T>
void WriteRaw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T ReadRaw(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) Fail(ErrorCode::kParse, fmt::format("checkpoint {}: truncated", path));
  return v;
}

}  // namespace

void SaveCheckpoint(const std::string& path, const Checkpoint& checkpoint) {
  const Model& model = checkpoint.model;
  nlohmann::json header;
  header["kind"] = model.is_linear() ? "linear" : "mlp";
  header["input_dim"] = model.input_dim();
  if (!model.is_linear()) {
    header["hidden_widths"] = model.mlp().hidden_widths;
    header["activation"] = ActivationName(model.mlp().activation);
    header["dropout_rate"] = model.mlp().dropout_rate;
  }
  if (model.expander()) {
    header["poly"] = {{"input_dim", model.expander()->input_dim()},
                      {"degree", model.expander()->degree()}};
  } else {
    header["poly"] = nullptr;
  }
  header["seed"] = checkpoint.seed;
  header["epoch"] = checkpoint.epoch;
  const auto names = model.param_names();
  const auto values = model.param_values();
  nlohmann::json params = nlohmann::json::array();
  for (std::size_t i = 0; i < values.size(); ++i) {
    params.push_back({{"name", names[i]}, {"shape", values[i].shape()}});
  }
  header["params"] = params;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) Fail(ErrorCode::kIo, fmt::format("cannot write checkpoint {}", path));
  out.write(kMagic, sizeof(kMagic));
  WriteRaw(out, kFormatVersion);
  WriteRaw(out, static_cast<std::uint64_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& v : values) {
    out.write(reinterpret_cast<const char*>(v.data().data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) Fail(ErrorCode::kIo, fmt::format("failed writing checkpoint {}", path));
}

Checkpoint LoadCheckpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorCode::kIo, fmt::format("cannot open checkpoint {}", path));
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    Fail(ErrorCode::kParse, fmt::format("{} is not a checkpoint file", path));
  }
  const auto version = ReadRaw<std::uint32_t>(in, path);
  if (version != kFormatVersion) {
    Fail(ErrorCode::kParse,
         fmt::format("checkpoint {}: unsupported version {}", path, version));
  }
  const auto header_len = ReadRaw<std::uint64_t>(in, path);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) Fail(ErrorCode::kParse, fmt::format("checkpoint {}: truncated header", path));

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorCode::kParse, fmt::format("checkpoint {}: bad header: {}", path, e.what()));
  }

  try {
    const std::string kind = header.at("kind");
    const std::size_t input_dim = header.at("input_dim");
    std::optional<Model> model;
    if (kind == "linear") {
      model = Model::LinearFromTheta(Tensor::Zeros({input_dim}));
    } else if (kind == "mlp") {
      model = Model::Mlp(input_dim, header.at("hidden_widths"),
                         ParseActivation(header.at("activation")),
                         header.at("dropout_rate"), 0);
    } else {
      Fail(ErrorCode::kParse, fmt::format("checkpoint {}: unknown kind '{}'", path, kind));
    }
    if (!header.at("poly").is_null()) {
      model->set_expander(PolyExpander(header["poly"].at("input_dim"),
                                       header["poly"].at("degree")));
    }
    std::vector<Tensor> values;
    for (const auto& p : header.at("params")) {
      Shape shape = p.at("shape");
      std::size_t n = 1;
      for (auto d : shape) n *= d;
      std::vector<double> data(n);
      in.read(reinterpret_cast<char*>(data.data()),
              static_cast<std::streamsize>(n * sizeof(double)));
      if (!in) Fail(ErrorCode::kParse, fmt::format("checkpoint {}: truncated payload", path));
      values.emplace_back(std::move(shape), std::move(data));
    }
    model->set_param_values(values);
    return Checkpoint{std::move(*model), header.at("seed"), header.at("epoch")};
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorCode::kParse, fmt::format("checkpoint {}: bad header: {}", path, e.what()));
  }
}

}  // namespace cfreg::models
