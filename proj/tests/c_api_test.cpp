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

// Exercises libcfreg through its C header only.

#include "cfreg/cfreg.h"

#include <cmath>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "doctest.h"

namespace {

namespace fs = std::filesystem;

const char* kConfig = R"(
[dataset]
synthetic = true
n_per_class = 30
dim = 3
separation = 4
[model]
kind = lr
poly_degree = 1
[reg]
kind = cf_reg
alpha = 0.1
[train]
epochs = 3
batch_size = 8
learning_rate = 0.05
)";

std::string Scratch(const char* name) {
  const fs::path p = fs::temp_directory_path() / "cfreg_c_api_test" / name;
  fs::remove_all(p);
  return p.string();
}

TEST_CASE("status names and version") {
  CHECK(std::string(cfreg_status_name(CFREG_OK)) == "ok");
  CHECK(std::string(cfreg_status_name(CFREG_PARSE)) == "parse error");
  CHECK(std::string(cfreg_version()).size() > 0);
  CHECK(std::string(cfreg_output_root_env()) == "CFREG_OUTPUT_ROOT");
}

TEST_CASE("errors come back as codes with a message") {
  cfreg_config* cfg = nullptr;
  CHECK(cfreg_config_load("/no/such/file.ini", &cfg) == CFREG_IO);
  CHECK(cfg == nullptr);
  CHECK(std::string(cfreg_last_error()).find("/no/such/file.ini") != std::string::npos);

  CHECK(cfreg_config_parse("[dataset]\nsynthetic = true\n[train]\nepoch = 1\n", nullptr, &cfg) ==
        CFREG_INVALID_ARGUMENT);
  CHECK(std::string(cfreg_last_error()).find("train.epoch") != std::string::npos);
  CHECK(cfreg_config_parse(nullptr, nullptr, &cfg) == CFREG_INVALID_ARGUMENT);

  cfreg_command cmd;
  CHECK(cfreg_command_parse("delta-trace", &cmd) == CFREG_OK);
  CHECK(cmd == CFREG_CMD_DELTA_TRACE);
  CHECK(cfreg_command_parse("fly", &cmd) == CFREG_INVALID_ARGUMENT);
}

TEST_CASE("the last error is per thread") {
  cfreg_config* cfg = nullptr;
  CHECK(cfreg_config_load("/missing.ini", &cfg) == CFREG_IO);
  std::string other;
  std::thread([&] { other = cfreg_last_error(); }).join();
  CHECK(other.empty());
  CHECK_FALSE(std::string(cfreg_last_error()).empty());
}

TEST_CASE("train, reload and predict") {
  cfreg_config* cfg = nullptr;
  REQUIRE(cfreg_config_parse(kConfig, nullptr, &cfg) == CFREG_OK);
  CHECK(cfreg_config_set(cfg, "train.epochs", "many") == CFREG_INVALID_ARGUMENT);
  REQUIRE(cfreg_config_set(cfg, "train.epochs", "4") == CFREG_OK);

  const std::string out = Scratch("train");
  cfreg_run_options opts{1, 7, out.c_str(), 2, 0};
  REQUIRE_MESSAGE(cfreg_run(cfg, CFREG_CMD_TRAIN, &opts) == CFREG_OK, cfreg_last_error());
  CHECK(std::string(cfreg_last_output_dir()) == out);
  CHECK(std::string(cfreg_last_report()).find("seed 7") != std::string::npos);
  const fs::path run = fs::path(out) / "seed_7";
  CHECK(fs::exists(run / "cf_dump.csv"));

  cfreg_model* model = nullptr;
  REQUIRE(cfreg_model_load((run / "final.ckpt").c_str(), &model) == CFREG_OK);
  CHECK(cfreg_model_feature_count(model) == 3);
  CHECK(cfreg_model_parameter_count(model) == 4);  // C(3 + 1, 1)
  const std::vector<double> rows = {0, 0, 0, 1, -1, 2};
  double logits[2] = {NAN, NAN};
  REQUIRE(cfreg_model_predict(model, rows.data(), 2, 3, logits) == CFREG_OK);
  CHECK(std::isfinite(logits[0]));
  CHECK(std::isfinite(logits[1]));
  CHECK(cfreg_model_predict(model, rows.data(), 3, 2, logits) == CFREG_SHAPE_MISMATCH);
  cfreg_model_free(model);

  // Explain against the run just written.
  REQUIRE(cfreg_config_set(cfg, "explain.run_dir", run.c_str()) == CFREG_OK);
  REQUIRE(cfreg_config_set(cfg, "explain.query", "0, 0, 0") == CFREG_OK);
  REQUIRE(cfreg_config_set(cfg, "explain.k", "2") == CFREG_OK);
  const std::string explain_out = Scratch("explain");
  cfreg_run_options eo{0, 0, explain_out.c_str(), 1, 0};
  REQUIRE_MESSAGE(cfreg_run(cfg, CFREG_CMD_EXPLAIN, &eo) == CFREG_OK, cfreg_last_error());
  CHECK(std::string(cfreg_last_report()).find("#2") != std::string::npos);
  CHECK(fs::exists(fs::path(explain_out) / "explain.csv"));

  // Compare needs two cells.
  CHECK(cfreg_run(cfg, CFREG_CMD_COMPARE, &eo) == CFREG_INVALID_ARGUMENT);
  cfreg_config_free(cfg);
}

TEST_CASE("model load rejects garbage") {
  const fs::path p = fs::path(Scratch("garbage")) / "x.ckpt";
  fs::create_directories(p.parent_path());
  { std::FILE* f = std::fopen(p.c_str(), "wb"); std::fputs("nope", f); std::fclose(f); }
  cfreg_model* model = nullptr;
  CHECK(cfreg_model_load(p.c_str(), &model) != CFREG_OK);
  CHECK(model == nullptr);
}

}  // namespace
