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

// cfreg: command-line front end over the libcfreg C interface.

#include <cstdint>
#include <cstdio>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cfreg/cfreg.h"

namespace {

struct Args {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int workers = 1;
  bool quiet = false;
  std::vector<std::string> overrides;
  std::string query;
  std::optional<int> k;
  bool standardized = false;
};

using ConfigPtr = std::unique_ptr<cfreg_config, decltype(&cfreg_config_free)>;

int Report(cfreg_status status, const std::string& context) {
  std::fprintf(stderr, "cfreg: %s: %s: %s\n", context.c_str(), cfreg_status_name(status),
               cfreg_last_error());
  // Exit codes 10+ mirror the library status so scripts can branch on them.
  return 10 + static_cast<int>(status);
}

int Run(const std::string& verb, const Args& args) {
  cfreg_command command;
  if (const auto s = cfreg_command_parse(verb.c_str(), &command); s != CFREG_OK) {
    return Report(s, verb);
  }
  cfreg_config* raw = nullptr;
  if (const auto s = cfreg_config_load(args.config.c_str(), &raw); s != CFREG_OK) {
    return Report(s, "loading config");
  }
  ConfigPtr config(raw, &cfreg_config_free);

  std::vector<std::pair<std::string, std::string>> sets;
  for (const auto& o : args.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) {
      std::fprintf(stderr, "cfreg: --set expects section.key=value, got '%s'\n", o.c_str());
      return 2;
    }
    sets.emplace_back(o.substr(0, eq), o.substr(eq + 1));
  }
  if (!args.query.empty()) sets.emplace_back("explain.query", args.query);
  if (args.k) sets.emplace_back("explain.k", std::to_string(*args.k));
  if (args.standardized) sets.emplace_back("explain.space", "standardized");
  for (const auto& [key, value] : sets) {
    if (const auto s = cfreg_config_set(config.get(), key.c_str(), value.c_str()); s != CFREG_OK) {
      return Report(s, "override " + key);
    }
  }

  cfreg_run_options options{};
  options.has_seed = args.seed.has_value();
  options.seed = args.seed.value_or(0);
  options.out_dir = args.out.empty() ? nullptr : args.out.c_str();
  options.workers = args.workers;
  options.verbose = !args.quiet;
  if (const auto s = cfreg_run(config.get(), command, &options); s != CFREG_OK) {
    return Report(s, verb);
  }
  std::fputs(cfreg_last_report(), stdout);
  std::printf("outputs: %s\n", cfreg_last_output_dir());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CF-Reg: counterfactual regularization experiments"};
  app.set_version_flag("--version", std::string(cfreg_version()));
  app.require_subcommand(1);

  Args args;
  const std::string env_note =
      std::string("Output root defaults to $") + cfreg_output_root_env() + " or ./runs.";
  app.footer(env_note);

  struct Verb {
    const char* name;
    const char* help;
  };
  const Verb verbs[] = {
      {"train", "Train one configuration for each seed"},
      {"compare", "Run every [cell.*] for every seed and test the winner"},
      {"vcp-profile", "Mean eps-VCP and train accuracy per checkpoint"},
      {"margin-hist", "Margin-distance histograms for linear checkpoints"},
      {"delta-trace", "Unregularized run tracing mean counterfactual norm per epoch"},
      {"explain", "Nearest cached counterfactuals for a query point"},
  };
  for (const auto& v : verbs) {
    CLI::App* sub = app.add_subcommand(v.name, v.help);
    sub->add_option("--config", args.config, "INI experiment file")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", args.seed, "Run this seed instead of run.seeds");
    sub->add_option("--out", args.out, "Output directory");
    sub->add_option("--workers", args.workers, "Parallel runs")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    sub->add_option("--set", args.overrides, "Override a config entry: section.key=value");
    sub->add_flag("--quiet", args.quiet, "No progress output");
    if (std::string(v.name) == "explain") {
      sub->add_option("--query", args.query, "Comma-separated feature values");
      sub->add_option("--k", args.k, "Number of neighbours")->check(CLI::PositiveNumber);
      sub->add_flag("--standardized", args.standardized,
                    "Query is already in standardized units");
    }
  }

  CLI11_PARSE(app, argc, argv);
  return Run(app.get_subcommands().front()->get_name(), args);
}
