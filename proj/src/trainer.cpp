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

#include "cfreg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "cfreg/error.hpp"
#include "cfreg/vcp.hpp"

namespace cfreg::trainer {

using namespace ndgraph;
using Clock = std::chrono::steady_clock;

namespace {

// Rows per forward pass in evaluation sweeps; bounds peak memory on large
// datasets with wide networks.
constexpr std::size_t kEvalChunk = 4096;

double Seconds(Clock::time_point since) {
  return std::chrono::duration<double>(Clock::now() - since).count();
}

Tensor SliceRows(const Tensor& rows, std::size_t begin, std::size_t end) {
  const std::size_t d = rows.cols();
  return Tensor::Matrix(end - begin, d,
                        std::vector<double>(rows.vec().begin() + begin * d,
                                            rows.vec().begin() + end * d));
}

Tensor Gather(const Tensor& rows, const std::vector<std::size_t>& idx) {
  const std::size_t d = rows.cols();
  std::vector<double> out;
  out.reserve(idx.size() * d);
  for (auto i : idx) {
    out.insert(out.end(), rows.vec().begin() + i * d, rows.vec().begin() + (i + 1) * d);
  }
  return Tensor::Matrix(idx.size(), d, std::move(out));
}

Tensor GatherLabels(const Tensor& labels, const std::vector<std::size_t>& idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(labels[i]);
  return Tensor::Vector(std::move(out));
}

std::string WithContext(std::int64_t epoch, std::size_t batch, const char* what) {
  return fmt::format("epoch {}, batch {}: {}", epoch, batch, what);
}

}  // namespace

const char* OptimizerName(Optimizer o) { return o == Optimizer::kAdam ? "adam" : "sgd"; }

Optimizer ParseOptimizer(const std::string& name) {
  if (name == "adam") return Optimizer::kAdam;
  if (name == "sgd") return Optimizer::kSgd;
  Fail(ErrorCode::kInvalidArgument, fmt::format("unknown optimizer '{}'", name));
}

void TrainConfig::Validate() const {
  if (epochs < 0) Fail(ErrorCode::kInvalidArgument, fmt::format("epochs {} < 0", epochs));
  if (batch_size == 0) Fail(ErrorCode::kInvalidArgument, "batch_size must be > 0");
  if (!(learning_rate > 0.0)) {
    Fail(ErrorCode::kInvalidArgument, fmt::format("learning rate {} must be > 0", learning_rate));
  }
  if (checkpoint_every < 0 || vcp_every < 0) {
    Fail(ErrorCode::kInvalidArgument, "checkpoint_every and vcp_every must be >= 0");
  }
  if (checkpoint_every > 0 && checkpoint_dir.empty()) {
    Fail(ErrorCode::kInvalidArgument, "checkpoint_every needs a checkpoint_dir");
  }
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    Fail(ErrorCode::kInvalidArgument,
         fmt::format("val_fraction must be in (0, 1), got {}", val_fraction));
  }
  if (vcp_every > 0 && (!(vcp_epsilon > 0.0) || vcp_samples == 0)) {
    Fail(ErrorCode::kInvalidArgument, "vcp diagnostics need epsilon > 0 and samples >= 1");
  }
  trace_config.Validate();
}

void AdamStep(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
              AdamState& state, const TrainConfig& config) {
  if (params.size() != grads.size()) {
    Fail(ErrorCode::kShapeMismatch, "adam: parameter and gradient counts differ");
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  ++state.t;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].shape() != grads[k].shape()) {
      Fail(ErrorCode::kShapeMismatch,
           fmt::format("adam: parameter {} is {} but its gradient is {}", k,
                       ShapeToString(params[k].shape()), ShapeToString(grads[k].shape())));
    }
    std::vector<double> p = params[k].vec();
    const auto& g = grads[k].vec();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      p[i] -= config.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.adam_eps);
    }
    params[k] = Tensor(params[k].shape(), std::move(p));
  }
}

void SgdStep(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
             const TrainConfig& config) {
  if (params.size() != grads.size()) {
    Fail(ErrorCode::kShapeMismatch, "sgd: parameter and gradient counts differ");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::vector<double> p = params[k].vec();
    const auto& g = grads[k].vec();
    if (g.size() != p.size()) Fail(ErrorCode::kShapeMismatch, "sgd: gradient shape differs");
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= config.learning_rate * g[i];
    params[k] = Tensor(params[k].shape(), std::move(p));
  }
}

Evaluation Evaluate(const Model& model, const Tensor& rows, const Tensor& labels) {
  const std::size_t n = rows.rank() == 2 ? rows.rows() : 0;
  if (n == 0) Fail(ErrorCode::kInvalidArgument, "evaluate: empty rows");
  if (labels.size() != n) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("evaluate: {} rows but {} labels", n, labels.size()));
  }
  NoGradGuard off;
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < n; begin += kEvalChunk) {
    const std::size_t end = std::min(n, begin + kEvalChunk);
    const Tensor z = model.PredictLogits(begin == 0 && end == n ? rows : SliceRows(rows, begin, end));
    const Tensor y = Tensor::Vector(std::vector<double>(labels.vec().begin() + begin,
                                                        labels.vec().begin() + end));
    loss += Sum(BceWithLogits(Expr::Constant(z), y)).item();
    for (std::size_t i = 0; i < z.size(); ++i) {
      correct += models::LabelFromLogit(z[i]) == static_cast<int>(y[i]);
    }
  }
  return Evaluation{loss / static_cast<double>(n),
                    static_cast<double>(correct) / static_cast<double>(n)};
}

double MeanDeltaNorm(const Model& model, const Tensor& rows,
                     const cfgen::ScoreCfConfig& config) {
  const std::size_t n = rows.rows();
  if (n == 0) Fail(ErrorCode::kInvalidArgument, "mean delta norm: empty rows");
  NoGradGuard off;
  double total = 0.0;
  for (std::size_t begin = 0; begin < n; begin += kEvalChunk) {
    const std::size_t end = std::min(n, begin + kEvalChunk);
    const auto b = cfgen::ComputeBatch(
        model, begin == 0 && end == n ? rows : SliceRows(rows, begin, end), config, true);
    for (double v : b.norms.value().vec()) total += v;
  }
  return total / static_cast<double>(n);
}

TrainResult Train(Model model, const datahub::Dataset& dataset,
                  const objective::RegularizerSpec& spec, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  config.Validate();
  objective::ValidateSpec(spec);
  if (!dataset.is_split()) Fail(ErrorCode::kInvalidArgument, "train: dataset is not split");
  const auto start = Clock::now();

  std::mt19937_64 rng(config.seed);
  const auto* early = std::get_if<objective::EarlyStopping>(&spec);
  const auto* pgd = std::get_if<objective::Pgd>(&spec);
  const auto* cf = std::get_if<objective::CfReg>(&spec);

  // Validation carve-out for early stopping, drawn from a separate stream so
  // the batch order matches a run without it as closely as possible.
  std::vector<std::size_t> fit = dataset.train;
  std::vector<std::size_t> val;
  if (early) {
    std::mt19937_64 val_rng(config.seed ^ 0x5EEDF00DULL);
    std::shuffle(fit.begin(), fit.end(), val_rng);
    const auto n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(config.val_fraction * fit.size())));
    if (n_val >= fit.size()) {
      Fail(ErrorCode::kInvalidArgument, "train: validation carve-out leaves no train rows");
    }
    val.assign(fit.end() - n_val, fit.end());
    fit.resize(fit.size() - n_val);
    std::sort(fit.begin(), fit.end());
    std::sort(val.begin(), val.end());
  }
  if (fit.empty()) Fail(ErrorCode::kInvalidArgument, "train: no train rows");

  const Tensor raw_fit = dataset.Rows(fit);
  const Tensor x_fit = model.ToModelInput(raw_fit);
  const Tensor y_fit = dataset.Labels(fit);
  const Tensor x_test = dataset.test.empty() ? Tensor() : model.ToModelInput(dataset.Rows(dataset.test));
  const Tensor y_test = dataset.Labels(dataset.test);
  const Tensor x_val = val.empty() ? Tensor() : model.ToModelInput(dataset.Rows(val));
  const Tensor y_val = dataset.Labels(val);
  if (x_fit.cols() != model.input_dim()) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("train: rows have {} model inputs, model expects {}", x_fit.cols(),
                     model.input_dim()));
  }

  TrainResult result{model, {}, {}, 0, 0.0, fit};
  auto save_checkpoint = [&](std::int64_t epoch) {
    if (config.checkpoint_every == 0) return;
    std::filesystem::create_directories(config.checkpoint_dir);
    const auto path = (std::filesystem::path(config.checkpoint_dir) /
                       fmt::format("epoch_{:06d}.ckpt", epoch))
                          .string();
    models::SaveCheckpoint(path, models::Checkpoint{model, config.seed, epoch});
    result.checkpoints.push_back(path);
  };
  save_checkpoint(0);

  std::vector<double> vcp_weights;
  std::vector<std::size_t> order(fit.size());
  std::iota(order.begin(), order.end(), 0);
  AdamState adam;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<Tensor> best_params = model.param_values();
  int bad_epochs = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto epoch_start = Clock::now();
    if (cf && cf->scheme == objective::WeightScheme::kVcp &&
        (epoch - 1) % cf->vcp_refresh == 0) {
      const auto sweep = vcp::MeanVcp(model, raw_fit, cf->vcp_epsilon, config.vcp_samples,
                                      config.seed + static_cast<std::uint64_t>(epoch),
                                      config.workers);
      vcp_weights.clear();
      for (const auto& e : sweep.per_point) vcp_weights.push_back(e.p_hat);
    }

    std::shuffle(order.begin(), order.end(), rng);
    std::size_t batch_no = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size, ++batch_no) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      objective::Batch batch;
      batch.indices.assign(order.begin() + begin, order.begin() + end);
      batch.rows = Gather(x_fit, batch.indices);
      batch.labels = GatherLabels(y_fit, batch.indices);
      if (pgd) batch.rows = objective::PgdAttack(model, batch.rows, batch.labels, *pgd, rng);

      std::vector<Tensor> grads;
      try {
        GradModeGuard on(true);
        std::optional<std::span<const double>> weights;
        if (!vcp_weights.empty()) weights = std::span<const double>(vcp_weights);
        const auto terms = objective::TotalLoss(model, batch, spec, weights,
                                                models::Mode::kTrain, &rng);
        if (!std::isfinite(terms.total.item())) {
          Fail(ErrorCode::kNonFinite, WithContext(epoch, batch_no, "loss is not finite"));
        }
        for (const auto& g : Grad(terms.total, model.params())) grads.push_back(g.value());
      } catch (const Error& e) {
        if (e.code() == ErrorCode::kNonFinite) throw;
        Fail(e.code(), WithContext(epoch, batch_no, e.what()));
      }
      for (const auto& g : grads) {
        if (!g.AllFinite()) {
          Fail(ErrorCode::kNonFinite, WithContext(epoch, batch_no, "gradient is not finite"));
        }
      }
      std::vector<Tensor> params = model.param_values();
      if (config.optimizer == Optimizer::kAdam) {
        AdamStep(params, grads, adam, config);
      } else {
        SgdStep(params, grads, config);
      }
      model.set_param_values(params);
    }

    MetricsRecord rec;
    rec.epoch = epoch;
    const Evaluation tr = Evaluate(model, x_fit, y_fit);
    rec.train_loss = tr.loss;
    rec.train_acc = tr.accuracy;
    if (!dataset.test.empty()) {
      const Evaluation te = Evaluate(model, x_test, y_test);
      rec.test_loss = te.loss;
      rec.test_acc = te.accuracy;
    }
    if (cf || config.trace_delta) {
      rec.mean_delta_norm =
          MeanDeltaNorm(model, x_fit, cf ? cf->ScoreConfig() : config.trace_config);
    }
    if (config.vcp_every > 0 && epoch % config.vcp_every == 0) {
      rec.mean_vcp = vcp::MeanVcp(model, raw_fit, config.vcp_epsilon, config.vcp_samples,
                                  config.seed, config.workers)
                         .mean;
    }
    bool stop = false;
    if (early) {
      rec.val_loss = Evaluate(model, x_val, y_val).loss;
      if (*rec.val_loss < best_val) {
        best_val = *rec.val_loss;
        best_params = model.param_values();
        result.best_epoch = epoch;
        bad_epochs = 0;
      } else if (++bad_epochs >= early->patience) {
        stop = true;
      }
    } else {
      result.best_epoch = epoch;
    }
    if (config.checkpoint_every > 0 &&
        (epoch % config.checkpoint_every == 0 || epoch == config.epochs || stop)) {
      save_checkpoint(epoch);
    }
    rec.wall_seconds = Seconds(epoch_start);
    result.metrics.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stop) break;
  }

  if (early && !result.metrics.empty()) model.set_param_values(best_params);
  result.model = model;
  result.total_seconds = Seconds(start);
  return result;
}

}  // namespace cfreg::trainer
