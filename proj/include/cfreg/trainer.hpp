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

// Mini-batch training with Adam or SGD, per-epoch metrics, early stopping on
// a validation carve-out, periodic checkpoints and optional diagnostics
// (mean counterfactual distance, mean VCP).

#ifndef CFREG_TRAINER_HPP_
#define CFREG_TRAINER_HPP_

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cfreg/cfgen.hpp"
#include "cfreg/datahub.hpp"
#include "cfreg/models.hpp"
#include "cfreg/objective.hpp"

namespace cfreg::trainer {

using models::Model;
using ndgraph::Tensor;

enum class Optimizer { kAdam, kSgd };

const char* OptimizerName(Optimizer o);
Optimizer ParseOptimizer(const std::string& name);

struct TrainConfig {
  int epochs = 100;
  std::size_t batch_size = 128;
  double learning_rate = 1e-3;
  Optimizer optimizer = Optimizer::kAdam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  // Save a checkpoint at epoch 0 and every N epochs after; 0 disables.
  int checkpoint_every = 0;
  std::string checkpoint_dir;
  // Share of train rows held out when early stopping is active.
  double val_fraction = 0.1;
  // Record mean ||delta|| over the train rows every epoch, whatever the regularizer.
  bool trace_delta = false;
  cfgen::ScoreCfConfig trace_config;
  // Record mean VCP every N epochs (0 disables).
  int vcp_every = 0;
  double vcp_epsilon = 1.5;
  std::size_t vcp_samples = 100;
  int workers = 1;

  void Validate() const;
};

struct MetricsRecord {
  std::int64_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_loss = 0.0;
  double test_acc = 0.0;
  std::optional<double> val_loss;
  std::optional<double> mean_delta_norm;
  std::optional<double> mean_vcp;
  // Kept out of the metric files so reruns stay byte identical.
  double wall_seconds = 0.0;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t t = 0;
};

// In-place updates. Gradients must match parameter shapes.
void AdamStep(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
              AdamState& state, const TrainConfig& config);
void SgdStep(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
             const TrainConfig& config);

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

// Mean BCE and accuracy (logit >= 0 predicts 1) on rows in model input space.
Evaluation Evaluate(const Model& model, const Tensor& rows, const Tensor& labels);

// Mean closed-form ||delta|| over rows in model input space.
double MeanDeltaNorm(const Model& model, const Tensor& rows,
                     const cfgen::ScoreCfConfig& config);

struct TrainResult {
  Model model;
  std::vector<MetricsRecord> metrics;
  std::vector<std::string> checkpoints;
  // Epoch of the returned parameters (the best one under early stopping).
  std::int64_t best_epoch = 0;
  double total_seconds = 0.0;
  // Train rows actually fitted (train split minus any validation carve-out).
  std::vector<std::size_t> fit_indices;
};

using EpochCallback = std::function<void(const MetricsRecord&)>;

// `dataset` must be split; rows are fed through model.ToModelInput.
TrainResult Train(Model model, const datahub::Dataset& dataset,
                  const objective::RegularizerSpec& spec, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

}  // namespace cfreg::trainer

#endif  // CFREG_TRAINER_HPP_
