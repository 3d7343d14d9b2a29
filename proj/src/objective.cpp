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

#include "cfreg/objective.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "cfreg/error.hpp"

namespace cfreg::objective {

using namespace ndgraph;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

cfgen::ScoreCfConfig CfReg::ScoreConfig() const {
  cfgen::ScoreCfConfig c;
  c.beta = beta;
  c.target = target;
  return c;
}

namespace {

void RequireNonNegative(double v, const char* what) {
  if (!(v >= 0.0) || !std::isfinite(v)) {
    Fail(ErrorCode::kInvalidArgument, fmt::format("{} must be >= 0, got {}", what, v));
  }
}

}  // namespace

void ValidateSpec(const RegularizerSpec& spec) {
  std::visit(Overloaded{
                 [](const NoReg&) {},
                 [](const L1& s) { RequireNonNegative(s.lambda, "l1 lambda"); },
                 [](const L2& s) { RequireNonNegative(s.lambda, "l2 lambda"); },
                 [](const Dropout& s) {
                   RequireNonNegative(s.p, "dropout p");
                   if (!(s.p < 1.0)) {
                     Fail(ErrorCode::kInvalidArgument,
                          fmt::format("dropout p must be < 1, got {}", s.p));
                   }
                 },
                 [](const EarlyStopping& s) {
                   if (s.patience < 0) {
                     Fail(ErrorCode::kInvalidArgument,
                          fmt::format("patience must be >= 0, got {}", s.patience));
                   }
                 },
                 [](const Pgd& s) {
                   RequireNonNegative(s.step, "pgd step");
                   RequireNonNegative(s.eps, "pgd eps");
                   if (s.iters < 1) {
                     Fail(ErrorCode::kInvalidArgument,
                          fmt::format("pgd iters must be >= 1, got {}", s.iters));
                   }
                 },
                 [](const CfReg& s) {
                   RequireNonNegative(s.alpha, "cf alpha");
                   RequireNonNegative(s.beta, "cf beta");
                   if (!std::isfinite(s.target)) {
                     Fail(ErrorCode::kInvalidArgument, "cf target must be finite");
                   }
                   if (s.scheme == WeightScheme::kVcp) {
                     if (!(s.vcp_epsilon > 0.0)) {
                       Fail(ErrorCode::kInvalidArgument,
                            fmt::format("vcp epsilon must be > 0, got {}", s.vcp_epsilon));
                     }
                     if (s.vcp_refresh < 1) {
                       Fail(ErrorCode::kInvalidArgument,
                            fmt::format("vcp refresh must be >= 1, got {}", s.vcp_refresh));
                     }
                   }
                 },
             },
             spec);
}

std::string SpecName(const RegularizerSpec& spec) {
  return std::visit(Overloaded{
                        [](const NoReg&) { return "none"; },
                        [](const L1&) { return "l1"; },
                        [](const L2&) { return "l2"; },
                        [](const Dropout&) { return "dropout"; },
                        [](const EarlyStopping&) { return "early_stopping"; },
                        [](const Pgd&) { return "pgd"; },
                        [](const CfReg&) { return "cf_reg"; },
                    },
                    spec);
}

Expr EmpiricalLoss(const Expr& logits, const Tensor& labels) {
  if (labels.size() == 0) Fail(ErrorCode::kInvalidArgument, "empirical loss: empty batch");
  for (double y : labels.vec()) {
    if (y != 0.0 && y != 1.0) {
      Fail(ErrorCode::kInvalidArgument,
           fmt::format("empirical loss: label {} is not 0 or 1", y));
    }
  }
  return Mean(BceWithLogits(logits, labels));
}

Expr EmpiricalLoss(const Model& model, const Batch& batch, models::Mode mode,
                   std::mt19937_64* rng) {
  if (batch.size() == 0) Fail(ErrorCode::kInvalidArgument, "empirical loss: empty batch");
  return EmpiricalLoss(model.ForwardLogits(Expr::Constant(batch.rows), mode, rng),
                       batch.labels);
}

Expr NormPenalty(const Model& model, const RegularizerSpec& spec) {
  const auto params = model.params();
  auto sum_over = [&](auto term) {
    Expr acc = term(params.front());
    for (std::size_t i = 1; i < params.size(); ++i) acc = Add(acc, term(params[i]));
    return acc;
  };
  if (const auto* l1 = std::get_if<L1>(&spec)) {
    return Scale(sum_over([](const Expr& p) { return Sum(Abs(p)); }), l1->lambda);
  }
  if (const auto* l2 = std::get_if<L2>(&spec)) {
    Expr sq = sum_over([](const Expr& p) { return L2NormSquared(p); });
    if (!l2->squared) sq = Sqrt(sq);
    return Scale(sq, l2->lambda);
  }
  Fail(ErrorCode::kInvalidArgument,
       fmt::format("norm penalty: spec '{}' is not l1 or l2", SpecName(spec)));
}

CfPenaltyReport CfPenalty(const Model& model, const Batch& batch, const CfReg& spec,
                          std::optional<std::span<const double>> vcp_weights,
                          models::Mode mode, std::mt19937_64* rng,
                          const cfgen::Generator* generator) {
  const std::size_t m = batch.size();
  if (m == 0) Fail(ErrorCode::kInvalidArgument, "cf penalty: empty batch");

  CfPenaltyReport report;
  report.weights_used.assign(m, 1.0);
  const bool weighted = spec.scheme == WeightScheme::kVcp;
  if (weighted) {
    if (!vcp_weights) {
      Fail(ErrorCode::kInvalidArgument, "cf penalty: vcp scheme needs weights");
    }
    if (batch.indices.size() != m) {
      Fail(ErrorCode::kInvalidArgument, "cf penalty: vcp scheme needs batch indices");
    }
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t idx = batch.indices[i];
      if (idx >= vcp_weights->size()) {
        Fail(ErrorCode::kInvalidArgument,
             fmt::format("cf penalty: sample index {} outside {} weights", idx,
                         vcp_weights->size()));
      }
      report.weights_used[i] = (*vcp_weights)[idx];
    }
  }

  const auto cfg = spec.ScoreConfig();
  Expr norms;
  if (generator == nullptr) {
    const auto b = cfgen::ComputeBatch(model, batch.rows, cfg, spec.detach_input_grad,
                                       mode, rng);
    norms = b.norms;
    report.logits = b.logits;
  } else {
    // Per-sample path: weighted terms are summed directly.
    const std::size_t dim = batch.rows.cols();
    Expr acc;
    report.per_sample_norms.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      const Tensor x = Tensor::Vector(std::vector<double>(
          batch.rows.vec().begin() + i * dim, batch.rows.vec().begin() + (i + 1) * dim));
      cfgen::CfResult r;
      try {
        r = (*generator)(model, x, cfg);
      } catch (const Error& e) {
        Fail(e.code(), fmt::format("{} (sample {})", e.what(), i));
      }
      if (!r.norm_expr.defined()) {
        Fail(ErrorCode::kUnsupported,
             "cf penalty: generator did not return a differentiable norm");
      }
      report.per_sample_norms[i] = r.norm;
      Expr term = spec.detach_input_grad ? Expr::Constant(r.norm_expr.value()) : r.norm_expr;
      if (weighted) term = Scale(term, report.weights_used[i]);
      acc = acc.defined() ? Add(acc, term) : term;
    }
    report.mean = Scale(acc, 1.0 / static_cast<double>(m));
    report.mean_weighted_norm = report.mean.item();
    report.logits = model.ForwardLogits(Expr::Constant(batch.rows), mode, rng);
    return report;
  }

  report.per_sample_norms = norms.value().vec();
  report.mean = weighted ? Mean(MulConst(norms, Tensor::Vector(report.weights_used)))
                         : Mean(norms);
  report.mean_weighted_norm = report.mean.item();
  return report;
}

LossTerms TotalLoss(const Model& model, const Batch& batch, const RegularizerSpec& spec,
                    std::optional<std::span<const double>> vcp_weights,
                    models::Mode mode, std::mt19937_64* rng) {
  LossTerms terms;
  if (const auto* cf = std::get_if<CfReg>(&spec)) {
    auto report = CfPenalty(model, batch, *cf, vcp_weights, mode, rng);
    terms.empirical = EmpiricalLoss(report.logits, batch.labels);
    terms.total = cf->alpha == 0.0
                      ? terms.empirical
                      : Sub(terms.empirical, Scale(report.mean, cf->alpha));
    terms.cf = std::move(report);
    return terms;
  }
  terms.empirical = EmpiricalLoss(model, batch, mode, rng);
  if (std::holds_alternative<L1>(spec) || std::holds_alternative<L2>(spec)) {
    terms.total = Add(terms.empirical, NormPenalty(model, spec));
  } else {
    terms.total = terms.empirical;
  }
  return terms;
}

Tensor PgdAttack(const Model& model, const Tensor& rows, const Tensor& labels,
                 const Pgd& spec, std::mt19937_64& rng, bool random_start) {
  ValidateSpec(spec);
  const auto& x0 = rows.vec();
  std::vector<double> x = x0;
  if (spec.eps == 0.0) return rows;
  if (random_start) {
    std::uniform_real_distribution<double> u(-spec.eps, spec.eps);
    for (auto& v : x) v += u(rng);
  }
  GradModeGuard grad_on(true);
  for (int k = 0; k < spec.iters; ++k) {
    const Expr input = Expr::Variable(Tensor(rows.shape(), x));
    const Expr loss =
        Sum(BceWithLogits(model.ForwardLogits(input, models::Mode::kEval), labels));
    const std::vector<double> g = Grad(loss, {input})[0].value().vec();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double sign = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
      x[i] = std::clamp(x[i] + spec.step * sign, x0[i] - spec.eps, x0[i] + spec.eps);
    }
  }
  return Tensor(rows.shape(), std::move(x));
}

}  // namespace cfreg::objective
