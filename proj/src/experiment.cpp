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

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include "cfreg/error.hpp"
#include "cfreg/stats.hpp"
#include "cfreg/textio.hpp"
#include "json.hpp"

namespace cfreg::experiment {

namespace fs = std::filesystem;
using nlohmann::json;
using ndgraph::Tensor;
using objective::RegularizerSpec;

namespace {

// --- Config parsing ---------------------------------------------------------

const std::set<std::string> kRegKeys = {
    "kind",  "lambda", "squared", "p",      "patience",    "step",        "eps",
    "iters", "alpha",  "beta",    "target", "weights",     "vcp_epsilon", "vcp_refresh",
    "detach"};

const std::map<std::string, std::set<std::string>> kSections = {
    {"dataset",
     {"path", "schema", "synthetic", "n_per_class", "dim", "separation", "label_noise",
      "synth_seed", "train_fraction", "split_seed"}},
    {"model", {"kind", "widths", "activation", "dropout", "poly_degree"}},
    {"reg", kRegKeys},
    {"train",
     {"epochs", "batch_size", "learning_rate", "optimizer", "checkpoint_every",
      "val_fraction", "vcp_every", "vcp_epsilon", "vcp_samples"}},
    {"trace", {"beta", "target"}},
    {"run", {"seeds", "output_dir"}},
    {"compare", {"cells"}},
    {"profile", {"checkpoints", "checkpoint_dir", "epsilon", "samples"}},
    {"margin", {"checkpoints", "checkpoint_dir", "bins", "lo", "hi"}},
    {"explain", {"run_dir", "query", "k", "space"}},
};

[[noreturn]] void BadValue(const std::string& origin, const std::string& key,
                           const std::string& what, const std::string& value) {
  Fail(ErrorCode::kInvalidArgument,
       fmt::format("{}: {}: expected {}, got '{}'", origin, key, what, value));
}

class Reader {
 public:
  Reader(const std::map<std::string, std::string>& entries, std::string origin)
      : entries_(entries), origin_(std::move(origin)) {}

  const std::string& origin() const { return origin_; }

  std::optional<std::string> Raw(const std::string& key) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  std::string String(const std::string& key, const std::string& fallback) const {
    return Raw(key).value_or(fallback);
  }

  double Double(const std::string& key, double fallback) const {
    const auto raw = Raw(key);
    if (!raw) return fallback;
    return ParseDouble(key, *raw);
  }

  template <typename Int>
  Int Integer(const std::string& key, Int fallback) const {
    const auto raw = Raw(key);
    if (!raw) return fallback;
    return ParseInt<Int>(key, *raw);
  }

  bool Bool(const std::string& key, bool fallback) const {
    const auto raw = Raw(key);
    if (!raw) return fallback;
    if (*raw == "true" || *raw == "1" || *raw == "yes" || *raw == "on") return true;
    if (*raw == "false" || *raw == "0" || *raw == "no" || *raw == "off") return false;
    BadValue(origin_, key, "a boolean", *raw);
  }

  std::vector<std::string> List(const std::string& key) const {
    std::vector<std::string> out;
    const auto raw = Raw(key);
    if (!raw) return out;
    for (const auto& cell : textio::SplitCsvLine(*raw)) {
      if (!cell.empty()) out.push_back(cell);
    }
    return out;
  }

  std::vector<double> DoubleList(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : List(key)) out.push_back(ParseDouble(key, s));
    return out;
  }

  template <typename Int>
  std::vector<Int> IntList(const std::string& key) const {
    std::vector<Int> out;
    for (const auto& s : List(key)) out.push_back(ParseInt<Int>(key, s));
    return out;
  }

 private:
  double ParseDouble(const std::string& key, const std::string& s) const {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
      BadValue(origin_, key, "a number", s);
    }
    return v;
  }

  template <typename Int>
  Int ParseInt(const std::string& key, const std::string& s) const {
    Int v{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
      BadValue(origin_, key, "an integer", s);
    }
    return v;
  }

  const std::map<std::string, std::string>& entries_;
  std::string origin_;
};

RegularizerSpec ParseReg(const Reader& r, const std::string& section) {
  const auto key = [&](const char* k) { return section + "." + k; };
  const std::string kind = r.String(key("kind"), "none");
  RegularizerSpec spec;
  if (kind == "none") {
    spec = objective::NoReg{};
  } else if (kind == "l1") {
    spec = objective::L1{r.Double(key("lambda"), 0.0)};
  } else if (kind == "l2") {
    spec = objective::L2{r.Double(key("lambda"), 0.0), r.Bool(key("squared"), true)};
  } else if (kind == "dropout") {
    spec = objective::Dropout{r.Double(key("p"), 0.5)};
  } else if (kind == "early_stopping") {
    spec = objective::EarlyStopping{r.Integer<int>(key("patience"), 10)};
  } else if (kind == "pgd") {
    spec = objective::Pgd{r.Double(key("step"), 0.01), r.Double(key("eps"), 0.03),
                          r.Integer<int>(key("iters"), 5)};
  } else if (kind == "cf_reg") {
    objective::CfReg cf;
    cf.alpha = r.Double(key("alpha"), 0.1);
    cf.beta = r.Double(key("beta"), 1.0);
    cf.target = r.Double(key("target"), 0.0);
    const std::string weights = r.String(key("weights"), "uniform");
    if (weights == "uniform") {
      cf.scheme = objective::WeightScheme::kUniform;
    } else if (weights == "vcp") {
      cf.scheme = objective::WeightScheme::kVcp;
    } else {
      BadValue(r.origin(), key("weights"), "'uniform' or 'vcp'", weights);
    }
    cf.vcp_epsilon = r.Double(key("vcp_epsilon"), 1.5);
    cf.vcp_refresh = r.Integer<int>(key("vcp_refresh"), 50);
    cf.detach_input_grad = r.Bool(key("detach"), false);
    spec = cf;
  } else {
    BadValue(r.origin(), key("kind"),
             "one of none, l1, l2, dropout, early_stopping, pgd, cf_reg", kind);
  }
  try {
    objective::ValidateSpec(spec);
  } catch (const Error& e) {
    Fail(ErrorCode::kInvalidArgument, fmt::format("{}: [{}] {}", r.origin(), section, e.what()));
  }
  return spec;
}

CheckpointList ParseCheckpoints(const Reader& r, const std::string& section) {
  return CheckpointList{r.List(section + ".checkpoints"),
                        r.String(section + ".checkpoint_dir", "")};
}

void CheckKeys(const std::map<std::string, std::string>& entries, const std::string& origin) {
  for (const auto& [key, value] : entries) {
    const auto dot = key.find('.');
    if (dot == std::string::npos) {
      Fail(ErrorCode::kInvalidArgument,
           fmt::format("{}: key '{}' must live in a section", origin, key));
    }
    const std::string section = key.substr(0, dot);
    const std::string name = key.substr(dot + 1);
    if (section == "cell") {
      const auto inner = name.find('.');
      if (inner != std::string::npos && kRegKeys.count(name.substr(inner + 1))) continue;
    } else if (const auto it = kSections.find(section);
               it != kSections.end() && it->second.count(name)) {
      continue;
    }
    Fail(ErrorCode::kInvalidArgument, fmt::format("{}: unknown key '{}'", origin, key));
  }
}

ExperimentConfig Build(std::map<std::string, std::string> entries, const std::string& base_dir,
                       const std::string& origin) {
  CheckKeys(entries, origin);
  ExperimentConfig c;
  c.origin = origin;
  c.base_dir = base_dir;
  c.entries = std::move(entries);
  const Reader r(c.entries, origin);

  auto& d = c.dataset;
  d.path = r.String("dataset.path", "");
  d.schema = r.String("dataset.schema", "");
  d.synthetic = r.Bool("dataset.synthetic", false);
  d.n_per_class = r.Integer<std::size_t>("dataset.n_per_class", d.n_per_class);
  d.dim = r.Integer<std::size_t>("dataset.dim", d.dim);
  d.separation = r.Double("dataset.separation", d.separation);
  d.label_noise = r.Double("dataset.label_noise", d.label_noise);
  d.synth_seed = r.Integer<std::uint64_t>("dataset.synth_seed", d.synth_seed);
  d.train_fraction = r.Double("dataset.train_fraction", d.train_fraction);
  d.split_seed = r.Integer<std::uint64_t>("dataset.split_seed", d.split_seed);
  if (!d.synthetic && (d.path.empty() || d.schema.empty())) {
    Fail(ErrorCode::kInvalidArgument,
         fmt::format("{}: dataset.path and dataset.schema are required unless "
                     "dataset.synthetic = true",
                     origin));
  }

  auto& m = c.model;
  m.kind = r.String("model.kind", m.kind);
  if (m.kind != "lr" && m.kind != "mlp") BadValue(origin, "model.kind", "'lr' or 'mlp'", m.kind);
  if (r.Raw("model.widths")) m.widths = r.IntList<std::size_t>("model.widths");
  try {
    m.activation = models::ParseActivation(r.String("model.activation", "relu"));
  } catch (const Error& e) {
    Fail(ErrorCode::kInvalidArgument, fmt::format("{}: model.activation: {}", origin, e.what()));
  }
  m.dropout = r.Double("model.dropout", 0.0);
  const std::string degree = r.String("model.poly_degree", "auto");
  m.poly_degree = degree == "auto" ? -1 : r.Integer<int>("model.poly_degree", -1);
  if (m.kind == "mlp" && m.widths.empty()) {
    Fail(ErrorCode::kInvalidArgument, fmt::format("{}: model.widths is empty", origin));
  }
  if (!(m.dropout >= 0.0 && m.dropout < 1.0)) {
    BadValue(origin, "model.dropout", "a value in [0, 1)", r.String("model.dropout", ""));
  }

  c.reg = ParseReg(r, "reg");

  auto& t = c.train;
  t.epochs = r.Integer<int>("train.epochs", t.epochs);
  t.batch_size = r.Integer<std::size_t>("train.batch_size", t.batch_size);
  t.learning_rate = r.Double("train.learning_rate", t.learning_rate);
  try {
    t.optimizer = trainer::ParseOptimizer(r.String("train.optimizer", "adam"));
  } catch (const Error& e) {
    Fail(ErrorCode::kInvalidArgument, fmt::format("{}: train.optimizer: {}", origin, e.what()));
  }
  t.checkpoint_every = r.Integer<int>("train.checkpoint_every", 0);
  t.val_fraction = r.Double("train.val_fraction", t.val_fraction);
  t.vcp_every = r.Integer<int>("train.vcp_every", 0);
  t.vcp_epsilon = r.Double("train.vcp_epsilon", t.vcp_epsilon);
  t.vcp_samples = r.Integer<std::size_t>("train.vcp_samples", t.vcp_samples);
  // Trace defaults follow the CF-Reg settings when present.
  if (const auto* cf = std::get_if<objective::CfReg>(&c.reg)) {
    t.trace_config = cf->ScoreConfig();
  }
  t.trace_config.beta = r.Double("trace.beta", t.trace_config.beta);
  t.trace_config.target = r.Double("trace.target", t.trace_config.target);
  try {
    auto probe = t;
    if (probe.checkpoint_every > 0) probe.checkpoint_dir = "checkpoints";
    probe.Validate();
  } catch (const Error& e) {
    Fail(ErrorCode::kInvalidArgument, fmt::format("{}: [train] {}", origin, e.what()));
  }

  if (r.Raw("run.seeds")) c.seeds = r.IntList<std::uint64_t>("run.seeds");
  if (c.seeds.empty()) Fail(ErrorCode::kInvalidArgument, fmt::format("{}: run.seeds is empty", origin));
  c.output_dir = r.String("run.output_dir", "");

  for (const auto& name : r.List("compare.cells")) {
    const std::string section = "cell." + name;
    bool defined = false;
    for (const auto& [k, v] : c.entries) defined |= k.rfind(section + ".", 0) == 0;
    if (!defined) {
      Fail(ErrorCode::kInvalidArgument,
           fmt::format("{}: compare.cells names '{}' but [{}] is missing", origin, name, section));
    }
    c.cells.push_back(Cell{name, ParseReg(r, section)});
  }

  c.profile.checkpoints = ParseCheckpoints(r, "profile");
  c.profile.epsilon = r.Double("profile.epsilon", c.profile.epsilon);
  c.profile.samples = r.Integer<std::size_t>("profile.samples", c.profile.samples);
  if (!(c.profile.epsilon > 0.0) || c.profile.samples == 0) {
    Fail(ErrorCode::kInvalidArgument,
         fmt::format("{}: profile.epsilon must be > 0 and profile.samples >= 1", origin));
  }

  c.margin.checkpoints = ParseCheckpoints(r, "margin");
  c.margin.bins = r.Integer<std::size_t>("margin.bins", c.margin.bins);
  c.margin.lo = r.Double("margin.lo", c.margin.lo);
  if (r.Raw("margin.hi")) c.margin.hi = r.Double("margin.hi", 0.0);

  c.explain.run_dir = r.String("explain.run_dir", "");
  c.explain.query = r.DoubleList("explain.query");
  c.explain.k = r.Integer<std::size_t>("explain.k", 1);
  const std::string space = r.String("explain.space", "raw");
  if (space != "raw" && space != "standardized") {
    BadValue(origin, "explain.space", "'raw' or 'standardized'", space);
  }
  c.explain.query_standardized = space == "standardized";
  return c;
}

std::string Resolve(const ExperimentConfig& c, const std::string& path) {
  if (path.empty()) return path;
  const fs::path p(path);
  if (p.is_absolute() || c.base_dir.empty()) return p.string();
  return (fs::path(c.base_dir) / p).lexically_normal().string();
}

// --- Output helpers ---------------------------------------------------------

std::ofstream OpenOut(const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) Fail(ErrorCode::kIo, fmt::format("cannot write {}", path.string()));
  return out;
}

std::string Opt(const std::optional<double>& v) {
  return v ? textio::FormatDouble(*v) : std::string();
}

json MetricsJson(const trainer::MetricsRecord& m) {
  json j = {{"epoch", m.epoch},         {"train_loss", m.train_loss},
            {"train_acc", m.train_acc}, {"test_loss", m.test_loss},
            {"test_acc", m.test_acc}};
  if (m.val_loss) j["val_loss"] = *m.val_loss;
  if (m.mean_delta_norm) j["mean_delta_norm"] = *m.mean_delta_norm;
  if (m.mean_vcp) j["mean_vcp"] = *m.mean_vcp;
  return j;
}

void WriteMetricsCsv(const fs::path& path, const std::vector<trainer::MetricsRecord>& metrics) {
  auto out = OpenOut(path);
  out << "epoch,train_loss,train_acc,test_loss,test_acc,val_loss,mean_delta_norm,mean_vcp\n";
  for (const auto& m : metrics) {
    out << m.epoch << ',' << textio::FormatDouble(m.train_loss) << ','
        << textio::FormatDouble(m.train_acc) << ',' << textio::FormatDouble(m.test_loss) << ','
        << textio::FormatDouble(m.test_acc) << ',' << Opt(m.val_loss) << ','
        << Opt(m.mean_delta_norm) << ',' << Opt(m.mean_vcp) << '\n';
  }
}

void WriteScaler(const fs::path& path, const datahub::Dataset& ds) {
  json j = {{"features", ds.feature_names},
            {"mean", ds.scaler ? ds.scaler->mean : std::vector<double>{}},
            {"std", ds.scaler ? ds.scaler->std : std::vector<double>{}}};
  OpenOut(path) << j.dump(2) << '\n';
}

datahub::Scaler ReadScaler(const fs::path& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorCode::kIo, fmt::format("cannot open {}", path.string()));
  try {
    const json j = json::parse(in);
    return datahub::Scaler{j.at("mean").get<std::vector<double>>(),
                           j.at("std").get<std::vector<double>>()};
  } catch (const json::exception& e) {
    Fail(ErrorCode::kParse, fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::string SpecLabel(const RegularizerSpec& spec) { return objective::SpecName(spec); }

// Runs fn(i) for i in [0, n) on up to `workers` threads; the first error
// wins and stops new work from starting.
template <typename Fn>
void ParallelFor(std::size_t n, int workers, Fn fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  const int threads = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  if (threads == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(work);
  }
  if (failure) std::rethrow_exception(failure);
}

std::vector<std::uint64_t> SeedsFor(const ExperimentConfig& c, const RunOptions& o) {
  if (o.seed) return {*o.seed};
  return c.seeds;
}

// One training run with every artifact written under `dir`.
RunSummary RunOne(const ExperimentConfig& c, const Cell& cell, std::uint64_t seed,
                  const datahub::Dataset& ds, const fs::path& dir, int vcp_workers,
                  bool verbose, bool trace_delta) {
  fs::create_directories(dir);
  const models::Model model = BuildModel(c.model, cell.spec, ds, seed);
  trainer::TrainConfig tc = c.train;
  tc.seed = seed;
  tc.workers = vcp_workers;
  tc.trace_delta = trace_delta;
  if (tc.checkpoint_every > 0) tc.checkpoint_dir = (dir / "checkpoints").string();

  auto jsonl = OpenOut(dir / "metrics.jsonl");
  const int report_every = std::max(1, tc.epochs / 10);
  auto on_epoch = [&](const trainer::MetricsRecord& m) {
    jsonl << MetricsJson(m).dump() << '\n';
    jsonl.flush();
    if (verbose && (m.epoch % report_every == 0)) {
      fmt::print(stderr, "[{} seed {}] epoch {}/{} train_acc {:.4f} test_acc {:.4f}\n",
                 cell.name, seed, m.epoch, tc.epochs, m.train_acc, m.test_acc);
    }
  };
  const trainer::TrainResult result = [&] {
    try {
      return trainer::Train(model, ds, cell.spec, tc, on_epoch);
    } catch (const Error& e) {
      Fail(e.code(), fmt::format("run '{}' seed {}: {}", cell.name, seed, e.what()));
    }
  }();
  WriteMetricsCsv(dir / "metrics.csv", result.metrics);
  {
    auto out = OpenOut(dir / "timings.csv");
    out << "epoch,wall_seconds\n";
    for (const auto& m : result.metrics) out << m.epoch << ',' << m.wall_seconds << '\n';
    out << "total," << result.total_seconds << '\n';
  }
  models::SaveCheckpoint((dir / "final.ckpt").string(),
                         models::Checkpoint{result.model, seed, result.best_epoch});

  RunSummary s;
  s.cell = cell.name;
  s.seed = seed;
  s.dir = dir.string();
  s.epochs_run = static_cast<std::int64_t>(result.metrics.size());
  s.best_epoch = result.best_epoch;
  const auto& fit = result.fit_indices;
  const auto x_fit = result.model.ToModelInput(ds.Rows(fit));
  const auto train_eval = trainer::Evaluate(result.model, x_fit, ds.Labels(fit));
  s.train_loss = train_eval.loss;
  s.train_acc = train_eval.accuracy;
  if (!ds.test.empty()) {
    const auto test_eval = trainer::Evaluate(
        result.model, result.model.ToModelInput(ds.Rows(ds.test)), ds.Labels(ds.test));
    s.test_loss = test_eval.loss;
    s.test_acc = test_eval.accuracy;
  }
  if (!result.metrics.empty()) s.mean_delta_norm = result.metrics.back().mean_delta_norm;

  if (const auto* cf = std::get_if<objective::CfReg>(&cell.spec)) {
    cfgen::WriteCfDump((dir / "cf_dump.csv").string(),
                       BuildCfDump(result.model, ds, ds.train, cf->ScoreConfig()));
    WriteScaler(dir / "scaler.json", ds);
  }

  json summary = {{"cell", s.cell},
                  {"regularizer", SpecLabel(cell.spec)},
                  {"seed", s.seed},
                  {"model", c.model.kind},
                  {"dataset", ds.name},
                  {"parameters", result.model.parameter_count()},
                  {"epochs_run", s.epochs_run},
                  {"best_epoch", s.best_epoch},
                  {"train_loss", s.train_loss},
                  {"train_acc", s.train_acc},
                  {"test_loss", s.test_loss},
                  {"test_acc", s.test_acc}};
  if (s.mean_delta_norm) summary["mean_delta_norm"] = *s.mean_delta_norm;
  OpenOut(dir / "summary.json") << summary.dump(2) << '\n';
  return s;
}

void WriteRunTable(const fs::path& path, const std::vector<RunSummary>& runs) {
  auto out = OpenOut(path);
  out << "cell,seed,epochs_run,best_epoch,train_loss,train_acc,test_loss,test_acc,"
         "mean_delta_norm\n";
  for (const auto& s : runs) {
    out << s.cell << ',' << s.seed << ',' << s.epochs_run << ',' << s.best_epoch << ','
        << textio::FormatDouble(s.train_loss) << ',' << textio::FormatDouble(s.train_acc) << ','
        << textio::FormatDouble(s.test_loss) << ',' << textio::FormatDouble(s.test_acc) << ','
        << Opt(s.mean_delta_norm) << '\n';
  }
}

std::vector<std::string> ListCheckpoints(const ExperimentConfig& c, const CheckpointList& list,
                                         const char* section) {
  std::vector<std::string> files;
  for (const auto& f : list.files) files.push_back(Resolve(c, f));
  if (!list.dir.empty()) {
    const fs::path dir = Resolve(c, list.dir);
    if (!fs::is_directory(dir)) {
      Fail(ErrorCode::kIo, fmt::format("{}.checkpoint_dir: {} is not a directory", section,
                                       dir.string()));
    }
    std::vector<std::string> found;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.path().extension() == ".ckpt") found.push_back(entry.path().string());
    }
    std::sort(found.begin(), found.end());
    files.insert(files.end(), found.begin(), found.end());
  }
  if (files.empty()) {
    Fail(ErrorCode::kInvalidArgument,
         fmt::format("{}: set {}.checkpoints or {}.checkpoint_dir", c.origin, section, section));
  }
  return files;
}

void CheckCompatible(const models::Model& first, const models::Model& other,
                     const std::string& path) {
  const bool same_family = first.is_linear() == other.is_linear() &&
                           first.input_dim() == other.input_dim() &&
                           first.expander().has_value() == other.expander().has_value() &&
                           (!first.expander() ||
                            first.expander()->degree() == other.expander()->degree());
  if (!same_family) {
    Fail(ErrorCode::kInvalidArgument,
         fmt::format("incompatible checkpoint {}: model family differs from the first one", path));
  }
}

}  // namespace

// --- Public API -------------------------------------------------------------

ExperimentConfig ParseConfig(const std::string& text, const std::string& base_dir,
                             const std::string& origin) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    Fail(ErrorCode::kParse, fmt::format("{}:{}: {}", origin, e.line(), e.message()));
  }
  std::map<std::string, std::string> entries;
  for (const auto& [section, body] : tree) {
    if (body.empty()) {
      entries[section] = body.data();  // rejected by CheckKeys
      continue;
    }
    for (const auto& [key, value] : body) {
      entries[section + "." + key] = std::string(textio::Trim(value.data()));
    }
  }
  return Build(std::move(entries), base_dir, origin);
}

ExperimentConfig LoadConfig(const std::string& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorCode::kIo, fmt::format("cannot open config {}", path));
  std::stringstream buf;
  buf << in.rdbuf();
  auto c = ParseConfig(buf.str(), fs::path(path).parent_path().string(), path);
  if (c.output_dir.empty()) c.output_dir = fs::path(path).stem().string();
  return c;
}

void ApplyOverride(ExperimentConfig& config, const std::string& key, const std::string& value) {
  auto entries = config.entries;
  entries[key] = value;
  const std::string output_dir = config.output_dir;
  auto rebuilt = Build(std::move(entries), config.base_dir, config.origin);
  if (rebuilt.output_dir.empty()) rebuilt.output_dir = output_dir;
  config = std::move(rebuilt);
}

std::string ResolveOutputDir(const ExperimentConfig& config, const RunOptions& options) {
  if (!options.out_dir.empty()) return options.out_dir;
  const char* env = std::getenv(kOutputRootEnv);
  const fs::path root = env && *env ? fs::path(env) : fs::path("runs");
  const std::string leaf = config.output_dir.empty() ? "run" : config.output_dir;
  if (fs::path(leaf).is_absolute()) return leaf;
  return (root / leaf).string();
}

datahub::Dataset BuildDataset(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  datahub::Dataset ds =
      d.synthetic ? datahub::SynthGaussians(d.n_per_class, d.dim, d.separation, d.label_noise,
                                            d.synth_seed)
                  : datahub::LoadCsv(Resolve(c, d.path), datahub::LoadSchema(Resolve(c, d.schema)));
  return datahub::SplitStandardize(std::move(ds), d.train_fraction, d.split_seed);
}

models::Model BuildModel(const ModelSpec& spec, const RegularizerSpec& reg,
                         const datahub::Dataset& dataset, std::uint64_t seed) {
  const auto* dropout = std::get_if<objective::Dropout>(&reg);
  const std::size_t d = dataset.dim();
  if (spec.kind == "lr") {
    if (dropout) {
      Fail(ErrorCode::kUnsupported, "dropout has no meaning for logistic regression");
    }
    const int degree =
        spec.poly_degree >= 0 ? spec.poly_degree : models::ChooseDegree(d, dataset.train.size());
    models::Model m = models::Model::Linear(models::Binomial(d + degree, degree), seed);
    m.set_expander(models::PolyExpander(d, degree));
    return m;
  }
  return models::Model::Mlp(d, spec.widths, spec.activation,
                            dropout ? dropout->p : spec.dropout, seed);
}

std::vector<cfgen::CfDumpRow> BuildCfDump(const models::Model& model,
                                          const datahub::Dataset& dataset,
                                          const std::vector<std::size_t>& indices,
                                          const cfgen::ScoreCfConfig& config) {
  const Tensor raw = dataset.Rows(indices);
  const Tensor input = model.ToModelInput(raw);
  const std::size_t d = dataset.dim();
  const std::size_t n_in = input.cols();
  std::vector<cfgen::CfDumpRow> rows;
  rows.reserve(indices.size());
  ndgraph::NoGradGuard off;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Tensor x = Tensor::Vector(std::vector<double>(input.vec().begin() + i * n_in,
                                                        input.vec().begin() + (i + 1) * n_in));
    const auto r = cfgen::ScoreCf(model, x, config);
    rows.push_back(cfgen::CfDumpRow{
        indices[i], r.norm, r.achieved_score, r.valid,
        std::vector<double>(raw.vec().begin() + i * d, raw.vec().begin() + (i + 1) * d)});
  }
  return rows;
}

std::vector<RunSummary> CmdTrain(const ExperimentConfig& config, const RunOptions& options) {
  const fs::path out = ResolveOutputDir(config, options);
  fs::create_directories(out);
  const datahub::Dataset ds = BuildDataset(config);
  datahub::WriteAuditCsv((out / "audit.csv").string(), ds);
  const auto seeds = SeedsFor(config, options);
  const Cell cell{objective::SpecName(config.reg), config.reg};
  std::vector<RunSummary> runs(seeds.size());
  // Seeds run in parallel; each run keeps VCP sampling single-threaded then.
  const int run_workers = std::max(1, std::min<int>(options.workers, static_cast<int>(seeds.size())));
  const int inner = std::max(1, options.workers / run_workers);
  ParallelFor(seeds.size(), run_workers, [&](std::size_t i) {
    runs[i] = RunOne(config, cell, seeds[i], ds, out / fmt::format("seed_{}", seeds[i]), inner,
                     options.verbose, false);
  });
  WriteRunTable(out / "summary.csv", runs);
  return runs;
}

ComparisonReport CmdCompare(const ExperimentConfig& config, const RunOptions& options) {
  if (config.cells.size() < 2) {
    Fail(ErrorCode::kInvalidArgument,
         fmt::format("{}: compare needs at least two cells in compare.cells", config.origin));
  }
  const auto seeds = SeedsFor(config, options);
  if (seeds.size() < 2) {
    Fail(ErrorCode::kInvalidArgument,
         fmt::format("{}: compare needs at least two seeds", config.origin));
  }
  const fs::path out = ResolveOutputDir(config, options);
  fs::create_directories(out);
  const datahub::Dataset ds = BuildDataset(config);
  datahub::WriteAuditCsv((out / "audit.csv").string(), ds);

  const std::size_t n_runs = config.cells.size() * seeds.size();
  std::vector<std::optional<RunSummary>> runs(n_runs);
  std::vector<std::string> errors(config.cells.size());
  std::mutex error_mu;
  ParallelFor(n_runs, options.workers, [&](std::size_t k) {
    const std::size_t c = k / seeds.size();
    const std::uint64_t seed = seeds[k % seeds.size()];
    const Cell& cell = config.cells[c];
    try {
      runs[k] = RunOne(config, cell, seed, ds, out / cell.name / fmt::format("seed_{}", seed), 1,
                       options.verbose, false);
    } catch (const std::exception& e) {
      std::lock_guard lock(error_mu);
      if (errors[c].empty()) errors[c] = e.what();
    }
  });

  ComparisonReport report;
  std::vector<RunSummary> finished;
  for (std::size_t c = 0; c < config.cells.size(); ++c) {
    ComparisonRow row;
    row.cell = config.cells[c].name;
    row.regularizer = SpecLabel(config.cells[c].spec);
    row.error = errors[c];
    if (row.error.empty()) {
      for (std::size_t s = 0; s < seeds.size(); ++s) {
        const auto& r = *runs[c * seeds.size() + s];
        row.per_seed.push_back(r.test_acc);
        finished.push_back(r);
      }
      row.mean = stats::Mean(row.per_seed);
      row.std = stats::SampleStd(row.per_seed);
    } else {
      report.partial = true;
    }
    report.rows.push_back(std::move(row));
  }

  // Best and runner-up among completed cells; ties keep the earlier cell.
  std::vector<std::size_t> ok;
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    if (report.rows[i].error.empty()) ok.push_back(i);
  }
  std::stable_sort(ok.begin(), ok.end(), [&](auto a, auto b) {
    return report.rows[a].mean > report.rows[b].mean;
  });
  if (!ok.empty()) report.rows[ok[0]].best = true;
  if (ok.size() >= 2) {
    auto& best = report.rows[ok[0]];
    const auto& second = report.rows[ok[1]];
    const auto w = stats::WelchTTest(best.per_seed, second.per_seed);
    best.p_value = w.p_two_sided;
    best.significant = best.mean > second.mean && w.p_two_sided < 0.05;
  }

  WriteRunTable(out / "runs.csv", finished);
  {
    auto csv = OpenOut(out / "comparison.csv");
    csv << "cell,regularizer,n_seeds,mean_test_acc,std_test_acc,per_seed,best,significant,"
           "p_value,status\n";
    for (const auto& r : report.rows) {
      std::string per;
      for (std::size_t i = 0; i < r.per_seed.size(); ++i) {
        per += (i ? ";" : "") + textio::FormatDouble(r.per_seed[i]);
      }
      csv << r.cell << ',' << r.regularizer << ',' << r.per_seed.size() << ','
          << (r.error.empty() ? textio::FormatDouble(r.mean) : "") << ','
          << (r.error.empty() ? textio::FormatDouble(r.std) : "") << ',' << per << ','
          << (r.best ? 1 : 0) << ',' << (r.significant ? 1 : 0) << ',' << Opt(r.p_value) << ','
          << (r.error.empty() ? "ok" : "failed") << '\n';
    }
  }
  json j = {{"partial", report.partial}, {"seeds", seeds}, {"rows", json::array()}};
  for (const auto& r : report.rows) {
    json row = {{"cell", r.cell},   {"regularizer", r.regularizer}, {"per_seed", r.per_seed},
                {"best", r.best},   {"significant", r.significant}};
    if (r.error.empty()) {
      row["mean"] = r.mean;
      row["std"] = r.std;
    } else {
      row["error"] = r.error;
    }
    if (r.p_value) row["p_value"] = *r.p_value;
    j["rows"].push_back(row);
  }
  OpenOut(out / "comparison.json") << j.dump(2) << '\n';
  return report;
}

std::vector<ProfileRow> CmdVcpProfile(const ExperimentConfig& config, const RunOptions& options) {
  const auto files = ListCheckpoints(config, config.profile.checkpoints, "profile");
  const fs::path out = ResolveOutputDir(config, options);
  fs::create_directories(out);
  const datahub::Dataset ds = BuildDataset(config);
  const Tensor raw_train = ds.Rows(ds.train);
  const Tensor y_train = ds.Labels(ds.train);
  const std::uint64_t seed = SeedsFor(config, options).front();

  std::vector<ProfileRow> rows;
  std::optional<models::Model> first;
  for (const auto& path : files) {
    const auto ckpt = models::LoadCheckpoint(path);
    if (first) {
      CheckCompatible(*first, ckpt.model, path);
    } else {
      first = ckpt.model;
    }
    if (ckpt.model.expander() ? ckpt.model.expander()->input_dim() != ds.dim()
                              : ckpt.model.input_dim() != ds.dim()) {
      Fail(ErrorCode::kInvalidArgument,
           fmt::format("incompatible checkpoint {}: dataset has {} features", path, ds.dim()));
    }
    ProfileRow row;
    row.checkpoint = fs::path(path).filename().string();
    row.epoch = ckpt.epoch;
    row.train_acc =
        trainer::Evaluate(ckpt.model, ckpt.model.ToModelInput(raw_train), y_train).accuracy;
    row.mean_vcp = vcp::MeanVcp(ckpt.model, raw_train, config.profile.epsilon,
                                config.profile.samples, seed, options.workers)
                       .mean;
    rows.push_back(row);
  }
  auto csv = OpenOut(out / "vcp_profile.csv");
  csv << "checkpoint,epoch,train_acc,mean_vcp\n";
  for (const auto& r : rows) {
    csv << r.checkpoint << ',' << r.epoch << ',' << textio::FormatDouble(r.train_acc) << ','
        << textio::FormatDouble(r.mean_vcp) << '\n';
  }
  return rows;
}

std::vector<vcp::MarginHistogram> CmdMarginHist(const ExperimentConfig& config,
                                                const RunOptions& options) {
  const auto files = ListCheckpoints(config, config.margin.checkpoints, "margin");
  const fs::path out = ResolveOutputDir(config, options);
  fs::create_directories(out);
  const datahub::Dataset ds = BuildDataset(config);
  const Tensor raw_train = ds.Rows(ds.train);

  std::vector<models::Checkpoint> ckpts;
  double hi = config.margin.lo;
  for (const auto& path : files) {
    auto ckpt = models::LoadCheckpoint(path);
    if (!ckpts.empty()) CheckCompatible(ckpts.front().model, ckpt.model, path);
    if (!config.margin.hi) {
      for (double m : vcp::LinearMargins(ckpt.model, raw_train)) hi = std::max(hi, m);
    }
    ckpts.push_back(std::move(ckpt));
  }
  if (config.margin.hi) hi = *config.margin.hi;
  if (!(hi > config.margin.lo)) hi = config.margin.lo + 1.0;
  const auto edges = vcp::UniformEdges(config.margin.lo, hi, config.margin.bins);

  std::vector<vcp::MarginHistogram> hists;
  for (const auto& ckpt : ckpts) {
    hists.push_back(vcp::BuildMarginHistogram(ckpt.model, raw_train, edges, ckpt.epoch));
    vcp::WriteHistogramCsv((out / fmt::format("margin_hist_epoch_{:06d}.csv", ckpt.epoch)).string(),
                           {hists.back()});
  }
  vcp::WriteHistogramCsv((out / "margin_hist.csv").string(), hists);
  auto csv = OpenOut(out / "margin_means.csv");
  csv << "epoch,mean_margin\n";
  for (const auto& h : hists) csv << h.epoch << ',' << textio::FormatDouble(h.mean_margin) << '\n';
  return hists;
}

std::vector<std::vector<TraceRow>> CmdDeltaTrace(const ExperimentConfig& config,
                                                 const RunOptions& options) {
  const fs::path out = ResolveOutputDir(config, options);
  fs::create_directories(out);
  const datahub::Dataset ds = BuildDataset(config);
  const auto seeds = SeedsFor(config, options);
  const Cell cell{"delta_trace", objective::NoReg{}};
  std::vector<std::vector<TraceRow>> traces(seeds.size());
  ParallelFor(seeds.size(), options.workers, [&](std::size_t i) {
    const fs::path dir = out / fmt::format("seed_{}", seeds[i]);
    RunOne(config, cell, seeds[i], ds, dir, 1, options.verbose, true);
    // Re-read the metrics this run just wrote.
    std::ifstream in(dir / "metrics.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      const json j = json::parse(line);
      traces[i].push_back(TraceRow{j.at("epoch").get<std::int64_t>(),
                                   j.at("test_loss").get<double>(),
                                   j.at("mean_delta_norm").get<double>()});
    }
    auto csv = OpenOut(out / fmt::format("delta_trace_seed_{}.csv", seeds[i]));
    csv << "epoch,test_loss,mean_delta_norm\n";
    for (const auto& r : traces[i]) {
      csv << r.epoch << ',' << textio::FormatDouble(r.test_loss) << ','
          << textio::FormatDouble(r.mean_delta_norm) << '\n';
    }
  });
  return traces;
}

std::vector<ExplainHit> CmdExplain(const ExperimentConfig& config, const RunOptions& options) {
  const auto& e = config.explain;
  if (e.run_dir.empty()) {
    Fail(ErrorCode::kInvalidArgument, fmt::format("{}: explain.run_dir is required", config.origin));
  }
  if (e.k < 1) Fail(ErrorCode::kInvalidArgument, "explain.k must be >= 1");
  const fs::path run = Resolve(config, e.run_dir);
  const fs::path dump_path = run / "cf_dump.csv";
  if (!fs::exists(dump_path)) {
    Fail(ErrorCode::kIo,
         fmt::format("{} has no counterfactual dump; train it with reg.kind = cf_reg",
                     run.string()));
  }
  const auto dump = cfgen::ReadCfDump(dump_path.string());
  if (e.k > dump.size()) {
    Fail(ErrorCode::kInvalidArgument,
         fmt::format("explain.k = {} exceeds the {} cached training points", e.k, dump.size()));
  }
  const std::size_t d = dump.front().features.size();
  if (e.query.size() != d) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("explain.query has {} values, the run has {} features", e.query.size(), d));
  }
  std::vector<double> q = e.query;
  if (!e.query_standardized) {
    const auto scaler = ReadScaler(run / "scaler.json");
    q = scaler.Apply(Tensor::Matrix(1, d, q)).vec();
  }

  std::vector<ExplainHit> hits;
  hits.reserve(dump.size());
  for (const auto& row : dump) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += (row.features[j] - q[j]) * (row.features[j] - q[j]);
    hits.push_back(ExplainHit{std::sqrt(acc), row});
  }
  // Ties break on the lower training index.
  std::stable_sort(hits.begin(), hits.end(), [](const ExplainHit& a, const ExplainHit& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.record.index < b.record.index;
  });
  hits.resize(e.k);

  const fs::path out = ResolveOutputDir(config, options);
  fs::create_directories(out);
  auto csv = OpenOut(out / "explain.csv");
  csv << "rank,index,distance,delta_norm,achieved_score,valid\n";
  for (std::size_t i = 0; i < hits.size(); ++i) {
    const auto& h = hits[i];
    csv << i + 1 << ',' << h.record.index << ',' << textio::FormatDouble(h.distance) << ','
        << textio::FormatDouble(h.record.delta_norm) << ','
        << textio::FormatDouble(h.record.achieved_score) << ',' << (h.record.valid ? 1 : 0)
        << '\n';
  }
  return hits;
}

}  // namespace cfreg::experiment
