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

// Training objectives: BCE risk, parameter-norm penalties, PGD inputs and the
// counterfactual penalty
//   L = L_emp - alpha * (1/m) * sum_i w_i * ||delta_i||.
// The minus sign rewards points that sit far from the decision boundary.

#ifndef CFREG_OBJECTIVE_HPP_
#define CFREG_OBJECTIVE_HPP_

#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cfreg/cfgen.hpp"
#include "cfreg/models.hpp"
#include "cfreg/ndgraph.hpp"

namespace cfreg::objective {

using models::Model;
using ndgraph::Expr;
using ndgraph::Tensor;

struct NoReg {};
struct L1 {
  double lambda = 0.0;
};
struct L2 {
  double lambda = 0.0;
  // Ridge convention; false uses the plain (unsquared) norm.
  bool squared = true;
};
struct Dropout {
  double p = 0.0;
};
struct EarlyStopping {
  int patience = 0;
};
struct Pgd {
  double step = 0.0;
  double eps = 0.0;
  int iters = 1;
};

enum class WeightScheme { kUniform, kVcp };

struct CfReg {
  double alpha = 0.0;
  double beta = 1.0;
  double target = 0.0;
  WeightScheme scheme = WeightScheme::kUniform;
  double vcp_epsilon = 0.1;
  int vcp_refresh = 50;
  bool detach_input_grad = false;

  cfgen::ScoreCfConfig ScoreConfig() const;
};

using RegularizerSpec =
    std::variant<NoReg, L1, L2, Dropout, EarlyStopping, Pgd, CfReg>;

// Throws kInvalidArgument on negative rates, p >= 1, iters < 1, etc.
void ValidateSpec(const RegularizerSpec& spec);
// "none", "l1", "l2", "dropout", "early_stopping", "pgd", "cf_reg".
std::string SpecName(const RegularizerSpec& spec);

// A mini-batch in model input space. `indices` point back into the training
// set and select per-sample weights; they may be empty for uniform weights.
struct Batch {
  Tensor rows;    // (m x input_dim)
  Tensor labels;  // (m), entries in {0, 1}
  std::vector<std::size_t> indices;

  std::size_t size() const { return rows.rows(); }
};

// Mean BCE-with-logits.
Expr EmpiricalLoss(const Expr& logits, const Tensor& labels);
Expr EmpiricalLoss(const Model& model, const Batch& batch,
                   models::Mode mode = models::Mode::kEval,
                   std::mt19937_64* rng = nullptr);

// lambda * sum|theta| or lambda * sum theta^2 over every parameter.
Expr NormPenalty(const Model& model, const RegularizerSpec& spec);

struct CfPenaltyReport {
  Expr mean;  // differentiable (1/m) sum w_i ||delta_i||
  double mean_weighted_norm = 0.0;
  std::vector<double> per_sample_norms;
  std::vector<double> weights_used;
  Expr logits;  // forward pass shared with the empirical term
};

// `vcp_weights` is indexed by batch.indices and is required under the vcp
// scheme. With a custom `generator` every sample goes through it one at a
// time; the default path batches the closed form.
CfPenaltyReport CfPenalty(const Model& model, const Batch& batch, const CfReg& spec,
                          std::optional<std::span<const double>> vcp_weights = {},
                          models::Mode mode = models::Mode::kEval,
                          std::mt19937_64* rng = nullptr,
                          const cfgen::Generator* generator = nullptr);

struct LossTerms {
  Expr total;
  Expr empirical;
  std::optional<CfPenaltyReport> cf;
};

// NoReg, Dropout, EarlyStopping and Pgd reduce to the empirical loss here
// (the model or trainer handles them); L1/L2 add the penalty; CfReg subtracts
// alpha times the penalty mean.
LossTerms TotalLoss(const Model& model, const Batch& batch,
                    const RegularizerSpec& spec,
                    std::optional<std::span<const double>> vcp_weights = {},
                    models::Mode mode = models::Mode::kEval,
                    std::mt19937_64* rng = nullptr);

// l_inf PGD with sign steps, projected onto the eps box around the input.
// Starts from a uniform point in the box unless `random_start` is false.
Tensor PgdAttack(const Model& model, const Tensor& rows, const Tensor& labels,
                 const Pgd& spec, std::mt19937_64& rng, bool random_start = true);

}  // namespace cfreg::objective

#endif  // CFREG_OBJECTIVE_HPP_
