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

// Config-driven experiments: INI parsing, dataset/model construction, and
// the command implementations behind the CLI (train, compare, vcp-profile,
// margin-hist, delta-trace, explain). Every command writes its artifacts
// under one output directory and is a pure function of config and seed.

#ifndef CFREG_EXPERIMENT_HPP_
#define CFREG_EXPERIMENT_HPP_

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cfreg/datahub.hpp"
#include "cfreg/models.hpp"
#include "cfreg/objective.hpp"
#include "cfreg/trainer.hpp"
#include "cfreg/vcp.hpp"

namespace cfreg::experiment {

// Name of the environment variable holding the default output root.
inline constexpr const char* kOutputRootEnv = "CFREG_OUTPUT_ROOT";

struct DatasetRef {
  std::string path;    // CSV, resolved against the config directory
  std::string schema;  // JSON schema, likewise
  bool synthetic = false;
  std::size_t n_per_class = 500;
  std::size_t dim = 2;
  double separation = 2.0;
  double label_noise = 0.0;
  std::uint64_t synth_seed = 0;
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;
};

struct ModelSpec {
  std::string kind = "mlp";  // "lr" or "mlp"
  std::vector<std::size_t> widths = {100, 30};
  models::Activation activation = models::Activation::kRelu;
  double dropout = 0.0;
  int poly_degree = -1;  // -1: smallest degree with more terms than train rows
};

struct Cell {
  std::string name;
  objective::RegularizerSpec spec;
};

struct CheckpointList {
  std::vector<std::string> files;
  std::string dir;  // every *.ckpt inside, sorted by name
};

struct ProfileSpec {
  CheckpointList checkpoints;
  double epsilon = 1.5;
  std::size_t samples = 100;
};

struct MarginSpec {
  CheckpointList checkpoints;
  std::size_t bins = 20;
  double lo = 0.0;
  std::optional<double> hi;  // default: largest margin seen
};

struct ExplainSpec {
  std::string run_dir;
  std::vector<double> query;
  std::size_t k = 1;
  bool query_standardized = false;
};

struct ExperimentConfig {
  std::string origin;    // file the config came from
  std::string base_dir;  // relative paths resolve here
  DatasetRef dataset;
  ModelSpec model;
  objective::RegularizerSpec reg = objective::NoReg{};
  trainer::TrainConfig train;
  std::vector<std::uint64_t> seeds = {0};
  std::string output_dir;
  std::vector<Cell> cells;
  ProfileSpec profile;
  MarginSpec margin;
  ExplainSpec explain;
  // Raw key/value pairs as read ("section.key" -> value).
  std::map<std::string, std::string> entries;
};

ExperimentConfig ParseConfig(const std::string& text, const std::string& base_dir,
                             const std::string& origin = "config");
ExperimentConfig LoadConfig(const std::string& path);
// Applies one "section.key=value" override and re-validates.
void ApplyOverride(ExperimentConfig& config, const std::string& key, const std::string& value);

struct RunOptions {
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  int workers = 1;
  bool verbose = false;
};

// --out if given, else $CFREG_OUTPUT_ROOT (default "runs") joined with the
// config's output_dir (default: config file stem).
std::string ResolveOutputDir(const ExperimentConfig& config, const RunOptions& options);

datahub::Dataset BuildDataset(const ExperimentConfig& config);
models::Model BuildModel(const ModelSpec& spec, const objective::RegularizerSpec& reg,
                         const datahub::Dataset& dataset, std::uint64_t seed);

struct RunSummary {
  std::string cell;
  std::uint64_t seed = 0;
  std::string dir;
  std::int64_t epochs_run = 0;
  std::int64_t best_epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_loss = 0.0;
  double test_acc = 0.0;
  std::optional<double> mean_delta_norm;
};

// train: one run per seed under <out>/seed_<n>.
std::vector<RunSummary> CmdTrain(const ExperimentConfig& config, const RunOptions& options);

struct ComparisonRow {
  std::string cell;
  std::string regularizer;
  std::vector<double> per_seed;
  double mean = 0.0;
  double std = 0.0;
  bool best = false;
  bool significant = false;  // best beats runner-up at the 0.05 level
  std::optional<double> p_value;
  std::string error;         // non-empty when the cell failed
};

struct ComparisonReport {
  std::vector<ComparisonRow> rows;
  bool partial = false;
};

ComparisonReport CmdCompare(const ExperimentConfig& config, const RunOptions& options);

struct ProfileRow {
  std::string checkpoint;
  std::int64_t epoch = 0;
  double train_acc = 0.0;
  double mean_vcp = 0.0;
};

std::vector<ProfileRow> CmdVcpProfile(const ExperimentConfig& config, const RunOptions& options);

std::vector<vcp::MarginHistogram> CmdMarginHist(const ExperimentConfig& config,
                                                const RunOptions& options);

struct TraceRow {
  std::int64_t epoch = 0;
  double test_loss = 0.0;
  double mean_delta_norm = 0.0;
};

// One trace per seed; the run always trains without regularization.
std::vector<std::vector<TraceRow>> CmdDeltaTrace(const ExperimentConfig& config,
                                                 const RunOptions& options);

struct ExplainHit {
  double distance = 0.0;
  cfgen::CfDumpRow record;
};

std::vector<ExplainHit> CmdExplain(const ExperimentConfig& config, const RunOptions& options);

// Writes the per-point counterfactual dump used by explain.
std::vector<cfgen::CfDumpRow> BuildCfDump(const models::Model& model,
                                          const datahub::Dataset& dataset,
                                          const std::vector<std::size_t>& indices,
                                          const cfgen::ScoreCfConfig& config);

}  // namespace cfreg::experiment

#endif  // CFREG_EXPERIMENT_HPP_
