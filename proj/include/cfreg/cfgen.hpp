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

// Score-based counterfactuals: the x' minimizing
//   (f(x') - s)^2 + beta * ||x' - x||^2
// with f the logit. For a linear f with weights w the minimizer is
//   x' = x + t / (beta + ||w||^2) * w,   t = s - f(x).
// Nonlinear models are linearized around x first.
//
// Sign convention: `delta` is stored as x' - x. Only its norm enters the
// regularizer, so the opposite convention gives identical results.

#ifndef CFREG_CFGEN_HPP_
#define CFREG_CFGEN_HPP_

#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cfreg/models.hpp"
#include "cfreg/ndgraph.hpp"

namespace cfreg::cfgen {

using models::Model;
using ndgraph::Expr;
using ndgraph::Tensor;

struct ScoreCfConfig {
  double beta = 1.0;
  // Target score in logit space; 0 is the decision boundary.
  double target = 0.0;
  double validity_tol = 0.1;

  void Validate() const;
};

struct CfResult {
  std::vector<double> delta;
  double norm = 0.0;
  // Logit at x + delta under the linear(ized) model.
  double achieved_score = 0.0;
  bool valid = false;
  // Set when the model was linearized.
  std::optional<std::vector<double>> linearization_point;
  // ||delta|| as a graph node, differentiable in the model parameters when
  // produced with grad mode on. May be undefined (e.g. iterative oracle).
  Expr norm_expr;
};

// (t / (beta + ||w||^2)) * w. Throws kDegenerateModel when w = 0 and beta = 0.
std::vector<double> ClosedFormDelta(std::span<const double> w, double beta,
                                    double t);

// First-order expansion f_lin(x') = f0 + w . (x' - x) of the logit around x.
// `w` is built with build_graph so it stays differentiable in the parameters.
struct Linearization {
  Expr w;
  Expr f0;
  Tensor point;

  double Evaluate(std::span<const double> x) const;
};

Linearization Linearize(const Model& model, const Tensor& x);

// Plain-value view of a linear(ized) model, used by the iterative oracle.
struct LinearView {
  std::vector<double> w;
  double f0 = 0.0;
  std::vector<double> point;

  static LinearView Of(const Model& model, const Tensor& x);
  double Evaluate(std::span<const double> x) const;
};

// Closed-form counterfactual; linear models use theta directly.
CfResult ScoreCf(const Model& model, const Tensor& x, const ScoreCfConfig& config);

// Gradient descent on the score objective from x' = x; returns the iterate
// with the lowest objective. Throws kDivergence on a non-finite objective.
CfResult IterativeScoreCf(const LinearView& view, const Tensor& x,
                          const ScoreCfConfig& config, int steps,
                          double step_size);

// Pluggable generator: any x -> CfResult whose norm_expr is differentiable.
using Generator =
    std::function<CfResult(const Model&, const Tensor&, const ScoreCfConfig&)>;
Generator ClosedFormGenerator();

// Batched counterfactual norms for a block of rows.
struct BatchCounterfactuals {
  Expr logits;  // (rows)
  Expr norms;   // (rows), ||delta_i||
  Tensor input_gradients;  // (rows x dim), w_i of each linearization
};

// With `detach_input_grad` the w_i are constants and gradients reach the
// parameters only through t_i = s - f(x_i). `mode`/`rng` drive dropout.
BatchCounterfactuals ComputeBatch(const Model& model, const Tensor& rows,
                                  const ScoreCfConfig& config,
                                  bool detach_input_grad,
                                  models::Mode mode = models::Mode::kEval,
                                  std::mt19937_64* rng = nullptr);

// One row per point: index, delta_norm, achieved_score, valid, then the
// point's features x_0..x_{n-1}.
struct CfDumpRow {
  std::size_t index = 0;
  double delta_norm = 0.0;
  double achieved_score = 0.0;
  bool valid = false;
  std::vector<double> features;
};

void WriteCfDump(const std::string& path, const std::vector<CfDumpRow>& rows);
std::vector<CfDumpRow> ReadCfDump(const std::string& path);

}  // namespace cfreg::cfgen

#endif  // CFREG_CFGEN_HPP_
