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

// Binary classifiers emitting a single logit: logistic regression over
// polynomially expanded features, and dense MLPs with optional dropout.

#ifndef CFREG_MODELS_HPP_
#define CFREG_MODELS_HPP_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cfreg/ndgraph.hpp"

namespace cfreg::models {

using ndgraph::Expr;
using ndgraph::Tensor;

// C(n, k), saturating at UINT64_MAX.
std::uint64_t Binomial(std::uint64_t n, std::uint64_t k);

// Smallest degree d with C(n_features + d, d) > n_train.
int ChooseDegree(std::size_t n_features, std::size_t n_train);

// All monomials of total degree <= `degree`, constant first, then graded
// lexicographic order within each degree: for (a, b) and degree 2 the terms
// are 1, a, b, a^2, ab, b^2.
class PolyExpander {
 public:
  PolyExpander(std::size_t input_dim, int degree);

  std::size_t input_dim() const { return input_dim_; }
  int degree() const { return degree_; }
  std::size_t term_count() const { return terms_.size(); }
  // Exponent vector of each term.
  const std::vector<std::vector<int>>& term_index() const { return terms_; }

  std::vector<double> Expand(std::span<const double> x) const;
  // Row-wise expansion: (rows x input_dim) -> (rows x term_count).
  Tensor ExpandRows(const Tensor& rows) const;

 private:
  std::size_t input_dim_;
  int degree_;
  std::vector<std::vector<int>> terms_;
  // Term k (k > 0) equals term parent_[k] times x[factor_[k]].
  std::vector<std::size_t> parent_;
  std::vector<std::size_t> factor_;
};

enum class Mode { kTrain, kEval };
enum class Activation { kRelu, kTanh };

const char* ActivationName(Activation a);
Activation ParseActivation(const std::string& name);

// Logistic regression; the constant expansion term doubles as the bias.
struct LinearModel {
  Expr theta;
};

struct MlpModel {
  std::vector<std::size_t> hidden_widths;
  Activation activation = Activation::kRelu;
  double dropout_rate = 0.0;
  // weights[l] is (fan_in x fan_out); the last layer has fan_out 1.
  std::vector<Expr> weights;
  std::vector<Expr> biases;
};

class Model {
 public:
  // theta ~ U(-1/sqrt(n), 1/sqrt(n)).
  static Model Linear(std::size_t n_features, std::uint64_t seed);
  static Model LinearFromTheta(Tensor theta);
  // Glorot-uniform weights, zero biases.
  static Model Mlp(std::size_t input_dim, std::vector<std::size_t> hidden_widths,
                   Activation activation, double dropout_rate,
                   std::uint64_t seed);

  bool is_linear() const { return std::holds_alternative<LinearModel>(impl_); }
  const LinearModel& linear() const;
  const MlpModel& mlp() const;

  // Dimension of the model's own input (post-expansion for linear models).
  std::size_t input_dim() const { return input_dim_; }

  // Optional raw-feature transform applied by the *Raw helpers.
  const std::optional<PolyExpander>& expander() const { return expander_; }
  void set_expander(std::optional<PolyExpander> e) { expander_ = std::move(e); }

  // Trainable leaves in a fixed order (linear: theta; mlp: W0, b0, W1, ...).
  std::vector<Expr> params() const;
  std::vector<Tensor> param_values() const;
  // Replaces every parameter with a fresh differentiable leaf.
  void set_param_values(const std::vector<Tensor>& values);
  std::vector<std::string> param_names() const;

  // Every trainable scalar, biases included.
  std::size_t parameter_count() const;
  // Weight-matrix entries only (MLP biases excluded); for linear models this
  // equals parameter_count().
  std::size_t weight_count() const;

  // Logits for a batch (rows x input_dim) -> (rows). `rng` is required in
  // train mode when dropout is active.
  Expr ForwardLogits(const Expr& rows, Mode mode,
                     std::mt19937_64* rng = nullptr) const;
  // Single sample; `x` has length input_dim.
  Expr ForwardLogit(const Tensor& x, Mode mode,
                    std::mt19937_64* rng = nullptr) const;

  // Eval-mode logits without graph recording.
  Tensor PredictLogits(const Tensor& rows) const;
  // As PredictLogits, but `rows` are raw features passed through expander().
  Tensor PredictRawLogits(const Tensor& raw_rows) const;
  Tensor ToModelInput(const Tensor& raw_rows) const;

 private:
  Model() = default;
  std::variant<LinearModel, MlpModel> impl_;
  std::size_t input_dim_ = 0;
  std::optional<PolyExpander> expander_;
};

// Predicted label with the tie rule used everywhere: sigmoid(logit) >= 0.5,
// i.e. logit >= 0, is class 1.
inline int LabelFromLogit(double logit) { return logit >= 0.0 ? 1 : 0; }

// --- Checkpoints ------------------------------------------------------------
//
// File layout (little-endian):
//   8 bytes   magic "CFREGCKP"
//   u32       format version (1)
//   u64       header length H
//   H bytes   UTF-8 JSON header: kind, input_dim, hidden_widths, activation,
//             dropout_rate, poly {input_dim, degree} or null, seed, epoch,
//             params [{name, shape}]
//   f64[]     parameter payload in header order

struct Checkpoint {
  Model model;
  std::uint64_t seed = 0;
  std::int64_t epoch = 0;
};

void SaveCheckpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint LoadCheckpoint(const std::string& path);

}  // namespace cfreg::models

#endif  // CFREG_MODELS_HPP_
