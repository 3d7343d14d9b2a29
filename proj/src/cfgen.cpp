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

#include "cfreg/cfgen.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "cfreg/error.hpp"
#include "cfreg/textio.hpp"

namespace cfreg::cfgen {

using models::LabelFromLogit;
using namespace ndgraph;

void ScoreCfConfig::Validate() const {
  if (!(beta >= 0.0)) {
    Fail(ErrorCode::kInvalidArgument, fmt::format("score cf: beta {} < 0", beta));
  }
  if (!(validity_tol >= 0.0)) {
    Fail(ErrorCode::kInvalidArgument,
         fmt::format("score cf: validity_tol {} < 0", validity_tol));
  }
  if (!std::isfinite(target)) {
    Fail(ErrorCode::kInvalidArgument, "score cf: target must be finite");
  }
}

namespace {

double Dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

double Norm(std::span<const double> a) { return std::sqrt(Dot(a, a)); }

bool IsValid(double f0, double achieved, const ScoreCfConfig& config) {
  return std::abs(achieved - config.target) <= config.validity_tol ||
         LabelFromLogit(achieved) != LabelFromLogit(f0);
}

}  // namespace

std::vector<double> ClosedFormDelta(std::span<const double> w, double beta,
                                    double t) {
  if (!(beta >= 0.0)) {
    Fail(ErrorCode::kInvalidArgument, fmt::format("closed form: beta {} < 0", beta));
  }
  const double denom = beta + Dot(w, w);
  if (!(denom > 0.0)) {
    Fail(ErrorCode::kDegenerateModel,
         "closed form: zero weights with beta = 0 leave the direction undefined");
  }
  std::vector<double> delta(w.size());
  const double c = t / denom;
  for (std::size_t i = 0; i < w.size(); ++i) delta[i] = c * w[i];
  return delta;
}

double Linearization::Evaluate(std::span<const double> x) const {
  const auto& wv = w.value().vec();
  const auto& p = point.vec();
  double acc = f0.item();
  for (std::size_t i = 0; i < wv.size(); ++i) acc += wv[i] * (x[i] - p[i]);
  return acc;
}

Linearization Linearize(const Model& model, const Tensor& x) {
  if (x.rank() != 1 || x.size() != model.input_dim()) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("linearize: expected {} features, got {}", model.input_dim(),
                     ShapeToString(x.shape())));
  }
  GradModeGuard grad_on(true);
  if (model.is_linear()) {
    const Expr& theta = model.linear().theta;
    return Linearization{theta, Sum(Mul(theta, Expr::Constant(x))), x};
  }
  const Expr row = Expr::Variable(Tensor::Matrix(1, x.size(), x.vec()));
  const Expr f0 = Sum(model.ForwardLogits(row, models::Mode::kEval));
  const Expr w = Reshape(Grad(f0, {row}, /*build_graph=*/true)[0], {x.size()});
  return Linearization{w, f0, x};
}

LinearView LinearView::Of(const Model& model, const Tensor& x) {
  const Linearization lin = Linearize(model, x);
  return LinearView{lin.w.value().vec(), lin.f0.item(), x.vec()};
}

double LinearView::Evaluate(std::span<const double> x) const {
  double acc = f0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * (x[i] - point[i]);
  return acc;
}

CfResult ScoreCf(const Model& model, const Tensor& x, const ScoreCfConfig& config) {
  config.Validate();
  const Linearization lin = Linearize(model, x);
  const auto& w = lin.w.value().vec();
  const double f0 = lin.f0.item();
  const double t = config.target - f0;

  CfResult result;
  result.delta = ClosedFormDelta(w, config.beta, t);
  result.norm = Norm(result.delta);
  result.achieved_score = f0 + Dot(w, result.delta);
  result.valid = IsValid(f0, result.achieved_score, config);
  if (!model.is_linear()) result.linearization_point = x.vec();

  // |t| * ||w|| / (beta + ||w||^2) as a graph in the parameters.
  const Expr q = L2NormSquared(lin.w);
  const Expr t_expr = AddConst(Neg(lin.f0), config.target);
  result.norm_expr = Mul(Abs(t_expr), Div(Sqrt(q), AddConst(q, config.beta)));
  return result;
}

CfResult IterativeScoreCf(const LinearView& view, const Tensor& x,
                          const ScoreCfConfig& config, int steps,
                          double step_size) {
  config.Validate();
  if (steps < 1) {
    Fail(ErrorCode::kInvalidArgument, fmt::format("iterative cf: steps {} < 1", steps));
  }
  if (!(step_size >= 0.0)) {
    Fail(ErrorCode::kInvalidArgument,
         fmt::format("iterative cf: step_size {} < 0", step_size));
  }
  if (x.size() != view.w.size()) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("iterative cf: expected {} features, got {}", view.w.size(),
                     x.size()));
  }
  GradModeGuard grad_on(true);
  const std::size_t n = x.size();
  const Tensor w = Tensor::Vector(view.w);
  const Expr origin = Expr::Constant(x);
  const Expr anchor = Expr::Constant(Tensor::Vector(view.point));

  auto objective = [&](const Expr& candidate) {
    const Expr f = AddConst(Sum(MulConst(Sub(candidate, anchor), w)), view.f0);
    const Expr fit = Square(AddConst(f, -config.target));
    return Add(fit, Scale(L2NormSquared(Sub(candidate, origin)), config.beta));
  };

  std::vector<double> current = x.vec();
  std::vector<double> best = current;
  double best_value = std::numeric_limits<double>::infinity();
  for (int step = 0; step <= steps; ++step) {
    const Expr candidate = Expr::Variable(Tensor::Vector(current));
    const Expr value = objective(candidate);
    const double v = value.item();
    if (!std::isfinite(v)) {
      Fail(ErrorCode::kDivergence,
           fmt::format("iterative cf: objective diverged at step {} with step_size {}",
                       step, step_size));
    }
    if (v < best_value) {
      best_value = v;
      best = current;
    }
    if (step == steps) break;
    const auto g = Grad(value, {candidate})[0].value().vec();
    for (std::size_t i = 0; i < n; ++i) current[i] -= step_size * g[i];
  }

  CfResult result;
  result.delta.resize(n);
  for (std::size_t i = 0; i < n; ++i) result.delta[i] = best[i] - x[i];
  result.norm = Norm(result.delta);
  const double f0 = view.Evaluate(x.vec());
  result.achieved_score = view.Evaluate(best);
  result.valid = IsValid(f0, result.achieved_score, config);
  result.linearization_point = view.point;
  return result;
}

Generator ClosedFormGenerator() {
  return [](const Model& model, const Tensor& x, const ScoreCfConfig& config) {
    return ScoreCf(model, x, config);
  };
}

BatchCounterfactuals ComputeBatch(const Model& model, const Tensor& rows,
                                  const ScoreCfConfig& config,
                                  bool detach_input_grad, models::Mode mode,
                                  std::mt19937_64* rng) {
  config.Validate();
  BatchCounterfactuals out;
  if (model.is_linear()) {
    out.logits = model.ForwardLogits(Expr::Constant(rows), mode, rng);
    const Expr& theta = model.linear().theta;
    const Expr w = detach_input_grad ? Expr::Constant(theta.value()) : theta;
    const Expr q = L2NormSquared(w);
    if (!(config.beta + q.item() > 0.0)) {
      Fail(ErrorCode::kDegenerateModel,
           "cf batch: zero weights with beta = 0 (sample 0)");
    }
    const Expr factor = Div(Sqrt(q), AddConst(q, config.beta));
    const Expr t = AddConst(Neg(out.logits), config.target);
    out.norms = MulScalar(Abs(t), factor);
    return out;
  }

  Expr w;
  {
    GradModeGuard grad_on(true);
    const Expr x = Expr::Variable(rows);
    out.logits = model.ForwardLogits(x, mode, rng);
    w = Grad(Sum(out.logits), {x}, /*build_graph=*/!detach_input_grad)[0];
  }
  if (!GradModeEnabled()) out.logits = Expr::Constant(out.logits.value());
  if (detach_input_grad || !GradModeEnabled()) w = Expr::Constant(w.value());
  out.input_gradients = w.value();
  const Expr q = RowSquaredNorms(w);
  for (std::size_t i = 0; i < q.value().size(); ++i) {
    if (!(config.beta + q.value()[i] > 0.0)) {
      Fail(ErrorCode::kDegenerateModel,
           fmt::format("cf batch: zero input gradient with beta = 0 (sample {})", i));
    }
  }
  const Expr t = AddConst(Neg(out.logits), config.target);
  out.norms = Div(Mul(Abs(t), Sqrt(q)), AddConst(q, config.beta));
  return out;
}

// --- Dump files -------------------------------------------------------------

void WriteCfDump(const std::string& path, const std::vector<CfDumpRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) Fail(ErrorCode::kIo, fmt::format("cannot write {}", path));
  const std::size_t dim = rows.empty() ? 0 : rows.front().features.size();
  out << "index,delta_norm,achieved_score,valid";
  for (std::size_t j = 0; j < dim; ++j) out << ",x_" << j;
  out << '\n';
  for (const auto& r : rows) {
    out << r.index << ',' << textio::FormatDouble(r.delta_norm) << ','
        << textio::FormatDouble(r.achieved_score) << ',' << (r.valid ? 1 : 0);
    for (double v : r.features) out << ',' << textio::FormatDouble(v);
    out << '\n';
  }
}

std::vector<CfDumpRow> ReadCfDump(const std::string& path) {
  const auto table = textio::ReadCsv(path);
  if (table.header.size() < 4 || table.header[0] != "index" ||
      table.header[1] != "delta_norm") {
    Fail(ErrorCode::kParse, fmt::format("{}: not a counterfactual dump", path));
  }
  std::vector<CfDumpRow> rows;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& cells = table.rows[r];
    CfDumpRow row;
    row.index = static_cast<std::size_t>(textio::ParseDouble(cells[0], path, r, 0));
    row.delta_norm = textio::ParseDouble(cells[1], path, r, 1);
    row.achieved_score = textio::ParseDouble(cells[2], path, r, 2);
    row.valid = textio::ParseDouble(cells[3], path, r, 3) != 0.0;
    for (std::size_t j = 4; j < cells.size(); ++j) {
      row.features.push_back(textio::ParseDouble(cells[j], path, r, j));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace cfreg::cfgen
