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

#include "cfreg/cfreg.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <new>
#include <string>

#include <fmt/format.h>

#include "cfreg/error.hpp"
#include "cfreg/experiment.hpp"
#include "cfreg/models.hpp"

struct cfreg_config {
  cfreg::experiment::ExperimentConfig value;
};

struct cfreg_model {
  cfreg::models::Model value;
};

namespace {

using namespace cfreg;
namespace ex = cfreg::experiment;

thread_local std::string g_last_error;
thread_local std::string g_last_output_dir;
thread_local std::string g_last_report;

cfreg_status ToStatus(ErrorCode code) {
  const int c = static_cast<int>(code);
  return c >= CFREG_INVALID_ARGUMENT && c <= CFREG_INTERNAL ? static_cast<cfreg_status>(c)
                                                            : CFREG_INTERNAL;
}

cfreg_status Fault(cfreg_status status, std::string message) {
  g_last_error = std::move(message);
  return status;
}

// Translates every exception into a status; nothing escapes the C boundary.
template <typename Fn>
cfreg_status Guard(Fn&& fn) {
  g_last_error.clear();
  try {
    fn();
    return CFREG_OK;
  } catch (const Error& e) {
    return Fault(ToStatus(e.code()), e.what());
  } catch (const std::bad_alloc&) {
    return Fault(CFREG_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return Fault(CFREG_INTERNAL, e.what());
  } catch (...) {
    return Fault(CFREG_INTERNAL, "unknown failure");
  }
}

std::string Fixed(double v) { return fmt::format("{:.4f}", v); }

std::string ReportTrain(const std::vector<ex::RunSummary>& runs) {
  std::string out;
  for (const auto& r : runs) {
    out += fmt::format("seed {}: epochs {} train_acc {} test_acc {} test_loss {}", r.seed,
                       r.epochs_run, Fixed(r.train_acc), Fixed(r.test_acc), Fixed(r.test_loss));
    if (r.mean_delta_norm) out += fmt::format(" mean_delta {}", Fixed(*r.mean_delta_norm));
    out += '\n';
  }
  return out;
}

std::string ReportCompare(const ex::ComparisonReport& report) {
  std::size_t width = 4;
  for (const auto& r : report.rows) width = std::max(width, r.cell.size());
  std::string out = fmt::format("{:<{}}  {:<14}  {:>8}  {:>8}\n", "cell", width, "regularizer",
                                "mean", "std");
  for (const auto& r : report.rows) {
    if (!r.error.empty()) {
      out += fmt::format("{:<{}}  {:<14}  FAILED: {}\n", r.cell, width, r.regularizer, r.error);
      continue;
    }
    std::string mark = r.best ? (r.significant ? " best*" : " best") : "";
    if (r.p_value) mark += fmt::format(" (p = {:.3g})", *r.p_value);
    out += fmt::format("{:<{}}  {:<14}  {:>8}  {:>8}{}\n", r.cell, width, r.regularizer,
                       Fixed(r.mean), Fixed(r.std), mark);
  }
  if (report.partial) out += "report is partial: at least one cell failed\n";
  return out;
}

std::string ReportProfile(const std::vector<ex::ProfileRow>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += fmt::format("{} (epoch {}): train_acc {} mean_vcp {}\n", r.checkpoint, r.epoch,
                       Fixed(r.train_acc), Fixed(r.mean_vcp));
  }
  return out;
}

std::string ReportMargins(const std::vector<vcp::MarginHistogram>& hists) {
  std::string out;
  for (const auto& h : hists) {
    out += fmt::format("epoch {}: mean_margin {}\n", h.epoch, Fixed(h.mean_margin));
  }
  return out;
}

std::string ReportTrace(const std::vector<std::vector<ex::TraceRow>>& traces,
                        const std::vector<std::uint64_t>& seeds) {
  std::string out;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto& t = traces[i];
    if (t.empty()) {
      out += fmt::format("seed {}: no epochs\n", seeds[i]);
      continue;
    }
    const auto best = std::min_element(t.begin(), t.end(), [](const auto& a, const auto& b) {
      return a.test_loss < b.test_loss;
    });
    out += fmt::format(
        "seed {}: min test_loss {} at epoch {} (mean_delta {}); final epoch {} mean_delta {}\n",
        seeds[i], Fixed(best->test_loss), best->epoch, Fixed(best->mean_delta_norm),
        t.back().epoch, Fixed(t.back().mean_delta_norm));
  }
  return out;
}

std::string ReportExplain(const std::vector<ex::ExplainHit>& hits) {
  std::string out;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    const auto& h = hits[i];
    out += fmt::format("#{} train index {}: distance {} delta_norm {} valid {}\n", i + 1,
                       h.record.index, Fixed(h.distance), Fixed(h.record.delta_norm),
                       h.record.valid ? "yes" : "no");
  }
  return out;
}

}  // namespace

extern "C" {

const char* cfreg_version(void) { return "1.0.0"; }

const char* cfreg_status_name(cfreg_status status) {
  switch (status) {
    case CFREG_OK: return "ok";
    case CFREG_INVALID_ARGUMENT: return "invalid argument";
    case CFREG_SHAPE_MISMATCH: return "shape mismatch";
    case CFREG_IO: return "i/o error";
    case CFREG_PARSE: return "parse error";
    case CFREG_DEGENERATE_MODEL: return "degenerate model";
    case CFREG_DIVERGENCE: return "divergence";
    case CFREG_NON_FINITE: return "non-finite value";
    case CFREG_UNSUPPORTED: return "unsupported";
    case CFREG_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* cfreg_last_error(void) { return g_last_error.c_str(); }

const char* cfreg_output_root_env(void) { return ex::kOutputRootEnv; }

cfreg_status cfreg_config_load(const char* path, cfreg_config** out) {
  if (!path || !out) return Fault(CFREG_INVALID_ARGUMENT, "config_load: null argument");
  return Guard([&] { *out = new cfreg_config{ex::LoadConfig(path)}; });
}

cfreg_status cfreg_config_parse(const char* text, const char* base_dir, cfreg_config** out) {
  if (!text || !out) return Fault(CFREG_INVALID_ARGUMENT, "config_parse: null argument");
  return Guard([&] {
    *out = new cfreg_config{ex::ParseConfig(text, base_dir ? base_dir : "", "<string>")};
  });
}

cfreg_status cfreg_config_set(cfreg_config* config, const char* key, const char* value) {
  if (!config || !key || !value) return Fault(CFREG_INVALID_ARGUMENT, "config_set: null argument");
  return Guard([&] { ex::ApplyOverride(config->value, key, value); });
}

void cfreg_config_free(cfreg_config* config) { delete config; }

cfreg_status cfreg_command_parse(const char* name, cfreg_command* out) {
  if (!name || !out) return Fault(CFREG_INVALID_ARGUMENT, "command_parse: null argument");
  static constexpr std::pair<const char*, cfreg_command> kNames[] = {
      {"train", CFREG_CMD_TRAIN},             {"compare", CFREG_CMD_COMPARE},
      {"vcp-profile", CFREG_CMD_VCP_PROFILE}, {"margin-hist", CFREG_CMD_MARGIN_HIST},
      {"delta-trace", CFREG_CMD_DELTA_TRACE}, {"explain", CFREG_CMD_EXPLAIN}};
  for (const auto& [n, cmd] : kNames) {
    if (std::strcmp(n, name) == 0) {
      *out = cmd;
      return CFREG_OK;
    }
  }
  return Fault(CFREG_INVALID_ARGUMENT, fmt::format("unknown command '{}'", name));
}

cfreg_status cfreg_run(const cfreg_config* config, cfreg_command command,
                       const cfreg_run_options* options) {
  if (!config) return Fault(CFREG_INVALID_ARGUMENT, "run: null config");
  return Guard([&] {
    ex::RunOptions o;
    if (options) {
      if (options->has_seed) o.seed = options->seed;
      if (options->out_dir) o.out_dir = options->out_dir;
      o.workers = std::max(1, options->workers);
      o.verbose = options->verbose != 0;
    }
    const auto& c = config->value;
    g_last_output_dir = ex::ResolveOutputDir(c, o);
    g_last_report.clear();
    switch (command) {
      case CFREG_CMD_TRAIN: g_last_report = ReportTrain(ex::CmdTrain(c, o)); break;
      case CFREG_CMD_COMPARE: g_last_report = ReportCompare(ex::CmdCompare(c, o)); break;
      case CFREG_CMD_VCP_PROFILE: g_last_report = ReportProfile(ex::CmdVcpProfile(c, o)); break;
      case CFREG_CMD_MARGIN_HIST: g_last_report = ReportMargins(ex::CmdMarginHist(c, o)); break;
      case CFREG_CMD_DELTA_TRACE: {
        const auto seeds = o.seed ? std::vector<std::uint64_t>{*o.seed} : c.seeds;
        g_last_report = ReportTrace(ex::CmdDeltaTrace(c, o), seeds);
        break;
      }
      case CFREG_CMD_EXPLAIN: g_last_report = ReportExplain(ex::CmdExplain(c, o)); break;
      default: Fail(ErrorCode::kInvalidArgument, "run: unknown command");
    }
  });
}

const char* cfreg_last_output_dir(void) { return g_last_output_dir.c_str(); }

const char* cfreg_last_report(void) { return g_last_report.c_str(); }

cfreg_status cfreg_model_load(const char* checkpoint_path, cfreg_model** out) {
  if (!checkpoint_path || !out) return Fault(CFREG_INVALID_ARGUMENT, "model_load: null argument");
  return Guard([&] { *out = new cfreg_model{models::LoadCheckpoint(checkpoint_path).model}; });
}

size_t cfreg_model_feature_count(const cfreg_model* model) {
  if (!model) return 0;
  const auto& m = model->value;
  return m.expander() ? m.expander()->input_dim() : m.input_dim();
}

size_t cfreg_model_parameter_count(const cfreg_model* model) {
  return model ? model->value.parameter_count() : 0;
}

cfreg_status cfreg_model_predict(const cfreg_model* model, const double* rows, size_t n_rows,
                                 size_t n_features, double* logits_out) {
  if (!model || (n_rows > 0 && (!rows || !logits_out))) {
    return Fault(CFREG_INVALID_ARGUMENT, "model_predict: null argument");
  }
  const size_t expected = cfreg_model_feature_count(model);
  if (n_features != expected) {
    return Fault(CFREG_SHAPE_MISMATCH, fmt::format("model_predict: model expects {} features, got {}",
                                                   expected, n_features));
  }
  if (n_rows == 0) return CFREG_OK;
  return Guard([&] {
    const ndgraph::Tensor x = ndgraph::Tensor::Matrix(
        n_rows, n_features, std::vector<double>(rows, rows + n_rows * n_features));
    const auto logits = model->value.PredictRawLogits(x);
    std::copy(logits.vec().begin(), logits.vec().end(), logits_out);
  });
}

void cfreg_model_free(cfreg_model* model) { delete model; }

}  // extern "C"
