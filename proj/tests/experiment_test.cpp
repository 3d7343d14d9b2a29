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

#include "cfreg/experiment.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cfreg/error.hpp"
#include "doctest.h"

namespace cfreg::experiment {
namespace {

namespace fs = std::filesystem;

fs::path Scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "cfreg_experiment_test" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// Small blob problem shared by most cases.
const char* kBlobs = R"(
[dataset]
synthetic = true
n_per_class = 40
dim = 2
separation = 3
synth_seed = 4
train_fraction = 0.75
split_seed = 4

[model]
kind = mlp
widths = 8, 4

[train]
epochs = 5
batch_size = 16
learning_rate = 0.01
)";

ErrorCode CodeOf(const std::string& text) {
  try {
    ParseConfig(text, "", "t.ini");
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kInternal;
}

std::string MessageOf(const std::string& text) {
  try {
    ParseConfig(text, "", "t.ini");
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

TEST_CASE("config parses every section and keeps defaults") {
  const auto c = ParseConfig(std::string(kBlobs) + R"(
[reg]
kind = cf_reg
alpha = 0.25
beta = 0.5
weights = vcp
[run]
seeds = 1, 2, 3
output_dir = blobs
)",
                             "/base");
  CHECK(c.dataset.synthetic);
  CHECK(c.dataset.n_per_class == 40);
  CHECK(c.model.widths == std::vector<std::size_t>{8, 4});
  CHECK(c.train.epochs == 5);
  CHECK(c.seeds == std::vector<std::uint64_t>{1, 2, 3});
  CHECK(c.output_dir == "blobs");
  const auto& cf = std::get<objective::CfReg>(c.reg);
  CHECK(cf.alpha == 0.25);
  CHECK(cf.beta == 0.5);
  CHECK(cf.scheme == objective::WeightScheme::kVcp);
  // The delta trace picks up the regularizer's beta unless told otherwise.
  CHECK(c.train.trace_config.beta == 0.5);
  CHECK(c.model.poly_degree == -1);
}

TEST_CASE("config errors name the offending key") {
  const std::string synth = "[dataset]\nsynthetic = true\n";
  CHECK(CodeOf(synth + "[train]\nepochs = ten\n") == ErrorCode::kInvalidArgument);
  CHECK(MessageOf(synth + "[train]\nepochs = ten\n").find("train.epochs") != std::string::npos);
  CHECK(MessageOf(synth + "[model]\nwidthz = 3\n").find("model.widthz") != std::string::npos);
  CHECK(MessageOf(synth + "[bogus]\nx = 3\n").find("bogus.x") != std::string::npos);
  CHECK(MessageOf(std::string(kBlobs) + "[reg]\nalpah = 1\n").find("reg.alpah") !=
        std::string::npos);
  CHECK(MessageOf(std::string(kBlobs) + "[reg]\nkind = bogus\n").find("reg.kind") !=
        std::string::npos);
  CHECK(MessageOf(std::string(kBlobs) + "[reg]\nkind = cf_reg\nbeta = -1\n").find("[reg]") !=
        std::string::npos);
  CHECK(MessageOf(std::string(kBlobs) + "[compare]\ncells = a, b\n").find("cell.a") !=
        std::string::npos);
  CHECK(MessageOf("[dataset]\npath = x.csv\n").find("dataset.schema") != std::string::npos);
}

TEST_CASE("every shipped config parses") {
  std::size_t n = 0;
  for (const auto& entry : fs::recursive_directory_iterator(fs::path(CFREG_SOURCE_DIR) / "configs")) {
    if (entry.path().extension() != ".ini") continue;
    CHECK_NOTHROW_MESSAGE(LoadConfig(entry.path().string()), entry.path().string());
    ++n;
  }
  CHECK(n >= 62);
  const auto c = LoadConfig(std::string(CFREG_SOURCE_DIR) + "/configs/presets/water_lr_cfreg.ini");
  const auto& cf = std::get<objective::CfReg>(c.reg);
  CHECK(cf.alpha == 3.353e-1);
  CHECK(cf.beta == 9.816e-1);
  CHECK(c.model.kind == "lr");
  CHECK(c.seeds.size() == 5);
  const auto grid =
      LoadConfig(std::string(CFREG_SOURCE_DIR) + "/configs/presets/water_mlp_small_grid.ini");
  CHECK(grid.cells.size() == 7);
}

TEST_CASE("duplicate sections are a parse error") {
  CHECK(CodeOf(std::string(kBlobs) + "[model]\nkind = lr\n") == ErrorCode::kParse);
}

TEST_CASE("overrides rebuild the typed view") {
  auto c = ParseConfig(kBlobs, "");
  ApplyOverride(c, "train.epochs", "7");
  CHECK(c.train.epochs == 7);
  ApplyOverride(c, "reg.kind", "l2");
  CHECK(std::holds_alternative<objective::L2>(c.reg));
  CHECK_THROWS_AS(ApplyOverride(c, "train.nope", "1"), Error);
}

TEST_CASE("output root comes from the flag, then the environment") {
  auto c = ParseConfig(kBlobs, "");
  c.output_dir = "leaf";
  RunOptions o;
  o.out_dir = "/explicit";
  CHECK(ResolveOutputDir(c, o) == "/explicit");
  o.out_dir.clear();
  ::setenv(kOutputRootEnv, "/env_root", 1);
  CHECK(ResolveOutputDir(c, o) == "/env_root/leaf");
  ::unsetenv(kOutputRootEnv);
  CHECK(ResolveOutputDir(c, o) == "runs/leaf");
}

TEST_CASE("lr model picks the smallest degree that overparameterizes") {
  auto c = ParseConfig(kBlobs, "");
  c.model.kind = "lr";
  const auto ds = BuildDataset(c);
  const auto m = BuildModel(c.model, objective::NoReg{}, ds, 0);
  REQUIRE(m.expander().has_value());
  // 60 train rows, 2 features: C(2+d, d) > 60 first at d = 10 (66 terms).
  CHECK(m.expander()->degree() == 10);
  CHECK(m.input_dim() == 66);
  CHECK_THROWS_AS(BuildModel(c.model, objective::Dropout{0.2}, ds, 0), Error);
}

TEST_CASE("zero epochs still writes a complete run") {
  auto c = ParseConfig(kBlobs, "");
  c.train.epochs = 0;
  RunOptions o;
  o.out_dir = Scratch("zero").string();
  const auto runs = CmdTrain(c, o);
  REQUIRE(runs.size() == 1);
  CHECK(runs[0].epochs_run == 0);
  const fs::path dir = runs[0].dir;
  for (const char* f : {"metrics.jsonl", "metrics.csv", "timings.csv", "summary.json",
                        "final.ckpt"}) {
    CHECK_MESSAGE(fs::exists(dir / f), f);
  }
  CHECK(fs::exists(fs::path(o.out_dir) / "summary.csv"));
  CHECK(fs::exists(fs::path(o.out_dir) / "audit.csv"));
}

TEST_CASE("reruns with the same seed are byte-identical") {
  auto c = ParseConfig(std::string(kBlobs) + "[reg]\nkind = cf_reg\nalpha = 0.1\n", "");
  RunOptions a;
  a.out_dir = Scratch("rerun_a").string();
  RunOptions b = a;
  b.out_dir = Scratch("rerun_b").string();
  b.workers = 3;
  CmdTrain(c, a);
  CmdTrain(c, b);
  for (const char* f : {"metrics.jsonl", "metrics.csv", "summary.json", "final.ckpt",
                        "cf_dump.csv"}) {
    CHECK_MESSAGE(Slurp(fs::path(a.out_dir) / "seed_0" / f) ==
                      Slurp(fs::path(b.out_dir) / "seed_0" / f),
                  f);
  }
}

TEST_CASE("separated blobs are learned almost perfectly") {
  auto c = ParseConfig(kBlobs, "");
  c.dataset.separation = 8.0;
  c.dataset.n_per_class = 100;
  c.train.epochs = 30;
  RunOptions o;
  o.out_dir = Scratch("easy").string();
  const auto runs = CmdTrain(c, o);
  CHECK(runs[0].test_acc > 0.99);
}

TEST_CASE("compare with an inert cf cell stars nothing") {
  auto c = ParseConfig(std::string(kBlobs) + R"(
[run]
seeds = 0, 1, 2
[compare]
cells = plain, inert
[cell.plain]
kind = none
[cell.inert]
kind = cf_reg
alpha = 0
)",
                       "");
  RunOptions o;
  o.out_dir = Scratch("compare").string();
  o.workers = 4;
  const auto report = CmdCompare(c, o);
  REQUIRE(report.rows.size() == 2);
  CHECK_FALSE(report.partial);
  // alpha = 0 leaves the objective untouched, so both cells train identically.
  CHECK(report.rows[0].per_seed == report.rows[1].per_seed);
  CHECK_FALSE(report.rows[0].significant);
  CHECK_FALSE(report.rows[1].significant);
  CHECK(fs::exists(fs::path(o.out_dir) / "comparison.csv"));
  CHECK(fs::exists(fs::path(o.out_dir) / "inert" / "seed_2" / "cf_dump.csv"));
}

TEST_CASE("compare reports a failing cell and keeps the rest") {
  auto c = ParseConfig(std::string(kBlobs) + R"(
[run]
seeds = 0, 1
[compare]
cells = ok, bad, ok2
[cell.ok]
kind = none
[cell.ok2]
kind = l2
lambda = 0.001
[cell.bad]
kind = dropout
p = 0.3
)",
                       "");
  c.model.kind = "lr";
  c.model.poly_degree = 2;
  RunOptions o;
  o.out_dir = Scratch("partial").string();
  const auto report = CmdCompare(c, o);
  CHECK(report.partial);
  CHECK(report.rows[1].error.find("dropout") != std::string::npos);
  CHECK(report.rows[0].per_seed.size() == 2);
}

TEST_CASE("explain returns the nearest cached points") {
  auto c = ParseConfig(std::string(kBlobs) + "[reg]\nkind = cf_reg\nalpha = 0.05\n", "");
  RunOptions o;
  o.out_dir = Scratch("explain_run").string();
  const auto runs = CmdTrain(c, o);
  const auto dump = cfgen::ReadCfDump((fs::path(runs[0].dir) / "cf_dump.csv").string());
  REQUIRE(dump.size() == 60);

  // Querying a cached point in standardized space finds that point at distance 0.
  c.explain.run_dir = runs[0].dir;
  c.explain.query = dump[7].features;
  c.explain.query_standardized = true;
  c.explain.k = 3;
  RunOptions eo;
  eo.out_dir = Scratch("explain_out").string();
  auto hits = CmdExplain(c, eo);
  REQUIRE(hits.size() == 3);
  CHECK(hits[0].record.index == dump[7].index);
  CHECK(hits[0].distance == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(hits[1].distance <= hits[2].distance);

  // The same point in raw units goes through the saved scaler.
  const auto ds = BuildDataset(c);
  const auto raw = ds.scaler->Invert(ndgraph::Tensor::Matrix(1, 2, dump[7].features)).vec();
  c.explain.query = raw;
  c.explain.query_standardized = false;
  hits = CmdExplain(c, eo);
  CHECK(hits[0].record.index == dump[7].index);
  CHECK(hits[0].distance < 1e-9);

  c.explain.k = 61;
  CHECK_THROWS_AS(CmdExplain(c, eo), Error);
  c.explain.k = 1;
  c.explain.query = {1.0};
  CHECK_THROWS_AS(CmdExplain(c, eo), Error);
}

TEST_CASE("explain breaks distance ties on the lower index") {
  const fs::path run = Scratch("explain_ties");
  cfgen::WriteCfDump((run / "cf_dump.csv").string(),
                     {{9, 0.1, 0.0, true, {1.0, 1.0}},
                      {3, 0.2, 0.0, true, {1.0, 1.0}},
                      {5, 0.3, 0.0, true, {0.0, 0.0}},
                      {1, 0.4, 0.0, true, {3.0, 4.0}}});
  auto c = ParseConfig(kBlobs, "");
  c.explain.run_dir = run.string();
  c.explain.query = {1.0, 1.0};
  c.explain.query_standardized = true;
  c.explain.k = 4;
  RunOptions o;
  o.out_dir = run.string();
  const auto hits = CmdExplain(c, o);
  REQUIRE(hits.size() == 4);
  CHECK(hits[0].record.index == 3);
  CHECK(hits[1].record.index == 9);
  CHECK(hits[2].record.index == 5);
  CHECK(hits[3].record.index == 1);
  for (std::size_t i = 1; i < hits.size(); ++i) CHECK(hits[i - 1].distance <= hits[i].distance);
}

TEST_CASE("explain refuses runs without a counterfactual dump") {
  auto c = ParseConfig(kBlobs, "");
  RunOptions o;
  o.out_dir = Scratch("explain_plain").string();
  const auto runs = CmdTrain(c, o);
  c.explain.run_dir = runs[0].dir;
  c.explain.query = {0.0, 0.0};
  CHECK_THROWS_AS(CmdExplain(c, o), Error);
}

TEST_CASE("delta trace ignores the cf weight") {
  auto base = std::string(kBlobs) + "[trace]\nbeta = 0.7\n[reg]\nkind = cf_reg\nbeta = 0.7\n";
  auto low = ParseConfig(base + "alpha = 0.01\n", "");
  auto high = ParseConfig(base + "alpha = 5\n", "");
  RunOptions a;
  a.out_dir = Scratch("trace_low").string();
  RunOptions b;
  b.out_dir = Scratch("trace_high").string();
  const auto t1 = CmdDeltaTrace(low, a);
  const auto t2 = CmdDeltaTrace(high, b);
  REQUIRE(t1.size() == 1);
  REQUIRE(t1[0].size() == 5);
  for (std::size_t e = 0; e < t1[0].size(); ++e) {
    CHECK(t1[0][e].mean_delta_norm == t2[0][e].mean_delta_norm);
    CHECK(t1[0][e].mean_delta_norm > 0.0);
  }
  CHECK(Slurp(fs::path(a.out_dir) / "delta_trace_seed_0.csv") ==
        Slurp(fs::path(b.out_dir) / "delta_trace_seed_0.csv"));
}

TEST_CASE("profile and histograms read checkpoints") {
  auto c = ParseConfig(kBlobs, "");
  ApplyOverride(c, "train.checkpoint_every", "2");
  c.model.kind = "lr";
  c.model.poly_degree = 1;
  RunOptions o;
  o.out_dir = Scratch("ckpts").string();
  const auto runs = CmdTrain(c, o);
  const fs::path ckpt_dir = fs::path(runs[0].dir) / "checkpoints";
  // Epochs 0, 2, 4 and the final 5.
  CHECK(std::distance(fs::directory_iterator(ckpt_dir), fs::directory_iterator()) == 4);

  c.profile.checkpoints.dir = ckpt_dir.string();
  c.profile.samples = 20;
  RunOptions po;
  po.out_dir = Scratch("profile").string();
  const auto rows = CmdVcpProfile(c, po);
  REQUIRE(rows.size() == 4);
  CHECK(rows.front().epoch == 0);
  CHECK(rows.back().epoch == 5);
  for (const auto& r : rows) CHECK((r.mean_vcp >= 0.0 && r.mean_vcp <= 1.0));

  c.margin.checkpoints.files = {(ckpt_dir / "epoch_000004.ckpt").string()};
  c.margin.bins = 5;
  const auto hists = CmdMarginHist(c, po);
  REQUIRE(hists.size() == 1);
  std::size_t total = 0;
  for (auto n : hists[0].counts) total += n;
  CHECK(total == 60);
  CHECK(fs::exists(fs::path(po.out_dir) / "margin_hist_epoch_000004.csv"));

  // Histograms need a linear decision boundary.
  auto mlp = ParseConfig(kBlobs, "");
  RunOptions mo;
  mo.out_dir = Scratch("mlp_hist").string();
  const auto mlp_runs = CmdTrain(mlp, mo);
  mlp.margin.checkpoints.files = {(fs::path(mlp_runs[0].dir) / "final.ckpt").string()};
  CHECK_THROWS_AS(CmdMarginHist(mlp, mo), Error);
}

}  // namespace
}  // namespace cfreg::experiment
