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

#include "cfreg/vcp.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include <fmt/format.h>

#include "cfreg/error.hpp"
#include "cfreg/textio.hpp"

namespace cfreg::vcp {

namespace {

std::uint64_t SplitMix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void CheckEpsilon(double epsilon) {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    Fail(ErrorCode::kInvalidArgument, fmt::format("epsilon must be > 0, got {}", epsilon));
  }
}

}  // namespace

std::vector<double> SampleInBall(std::span<const double> center, double epsilon,
                                 std::mt19937_64& rng) {
  CheckEpsilon(epsilon);
  const std::size_t n = center.size();
  if (n == 0) Fail(ErrorCode::kInvalidArgument, "sample_in_ball: empty center");
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> dir(n);
  double len = 0.0;
  do {
    len = 0.0;
    for (auto& v : dir) {
      v = gauss(rng);
      len += v * v;
    }
  } while (len == 0.0);
  len = std::sqrt(len);
  const double radius = epsilon * std::pow(unif(rng), 1.0 / static_cast<double>(n));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    // Guard against rounding pushing the sample past the surface.
    out[i] = center[i] + std::min(radius, epsilon) * dir[i] / len;
  }
  return out;
}

VcpEstimate EstimateVcp(const Model& model, std::span<const double> x, double epsilon,
                        std::size_t n_samples, std::mt19937_64& rng) {
  CheckEpsilon(epsilon);
  if (n_samples < 1) Fail(ErrorCode::kInvalidArgument, "estimate_vcp: n_samples < 1");
  const std::size_t dim = x.size();
  const std::vector<double> center(x.begin(), x.end());
  // Row 0 is x itself; the rest are ball samples.
  std::vector<double> rows;
  rows.reserve((n_samples + 1) * dim);
  rows.insert(rows.end(), center.begin(), center.end());
  for (std::size_t s = 0; s < n_samples; ++s) {
    const auto p = SampleInBall(center, epsilon, rng);
    rows.insert(rows.end(), p.begin(), p.end());
  }
  const Tensor logits = model.PredictRawLogits(Tensor::Matrix(n_samples + 1, dim, rows));
  const int label = models::LabelFromLogit(logits[0]);
  std::size_t flips = 0;
  for (std::size_t s = 1; s <= n_samples; ++s) {
    if (models::LabelFromLogit(logits[s]) != label) ++flips;
  }
  VcpEstimate e;
  e.n_samples = n_samples;
  e.epsilon = epsilon;
  e.p_hat = static_cast<double>(flips) / static_cast<double>(n_samples);
  e.std_error = std::sqrt(e.p_hat * (1.0 - e.p_hat) / static_cast<double>(n_samples));
  return e;
}

std::mt19937_64 PointStream(std::uint64_t seed, std::size_t index) {
  return std::mt19937_64(SplitMix64(SplitMix64(seed) ^ static_cast<std::uint64_t>(index)));
}

double MeanOf(const std::vector<VcpEstimate>& estimates) {
  if (estimates.empty()) Fail(ErrorCode::kInvalidArgument, "mean_vcp: empty dataset");
  double acc = 0.0;
  for (const auto& e : estimates) acc += e.p_hat;
  return acc / static_cast<double>(estimates.size());
}

VcpSweep MeanVcp(const Model& model, const Tensor& raw_rows, double epsilon,
                 std::size_t n_samples, std::uint64_t seed, int workers) {
  if (raw_rows.rank() != 2 || raw_rows.rows() == 0) {
    Fail(ErrorCode::kInvalidArgument, "mean_vcp: empty dataset");
  }
  const std::size_t m = raw_rows.rows();
  const std::size_t dim = raw_rows.cols();
  VcpSweep sweep;
  sweep.per_point.resize(m);

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto work = [&] {
    try {
      for (std::size_t i = next++; i < m; i = next++) {
        auto rng = PointStream(seed, i);
        const std::span<const double> x(raw_rows.vec().data() + i * dim, dim);
        sweep.per_point[i] = EstimateVcp(model, x, epsilon, n_samples, rng);
      }
    } catch (...) {
      std::lock_guard lock(failure_mu);
      if (!failure) failure = std::current_exception();
      next = m;
    }
  };
  const int n_threads = std::max(1, std::min<int>(workers, static_cast<int>(m)));
  if (n_threads == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(work);
  }
  if (failure) std::rethrow_exception(failure);
  sweep.mean = MeanOf(sweep.per_point);
  return sweep;
}

double MarginDistanceLinear(std::span<const double> theta, double bias,
                            std::span<const double> x) {
  if (theta.size() != x.size()) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("margin: theta has {} entries, x has {}", theta.size(), x.size()));
  }
  double dot = bias, sq = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    dot += theta[i] * x[i];
    sq += theta[i] * theta[i];
  }
  if (sq == 0.0) Fail(ErrorCode::kDegenerateModel, "margin: theta is zero");
  return std::abs(dot) / std::sqrt(sq);
}

std::vector<double> LinearMargins(const Model& model, const Tensor& raw_rows) {
  if (!model.is_linear()) {
    Fail(ErrorCode::kUnsupported,
         "margin distances are only defined for linear models; use vcp-profile");
  }
  const Tensor input = model.ToModelInput(raw_rows);
  const auto& theta = model.linear().theta.value().vec();
  const std::size_t dim = input.cols();
  // The constant expansion term carries the bias.
  const std::size_t skip = model.expander() ? 1 : 0;
  const double bias = skip ? theta[0] : 0.0;
  const std::span<const double> w(theta.data() + skip, dim - skip);
  std::vector<double> margins(input.rows());
  for (std::size_t i = 0; i < input.rows(); ++i) {
    const std::span<const double> x(input.vec().data() + i * dim + skip, dim - skip);
    margins[i] = MarginDistanceLinear(w, bias, x);
  }
  return margins;
}

std::vector<double> UniformEdges(double lo, double hi, std::size_t bins) {
  if (bins < 1 || !(hi > lo)) {
    Fail(ErrorCode::kInvalidArgument,
         fmt::format("histogram: need bins >= 1 and hi > lo, got {} bins on [{}, {}]",
                     bins, lo, hi));
  }
  std::vector<double> edges(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) {
    edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  }
  return edges;
}

MarginHistogram BuildMarginHistogram(const Model& model, const Tensor& raw_rows,
                                     std::vector<double> bin_edges, std::int64_t epoch) {
  if (bin_edges.size() < 2 || !std::is_sorted(bin_edges.begin(), bin_edges.end()) ||
      std::adjacent_find(bin_edges.begin(), bin_edges.end()) != bin_edges.end()) {
    Fail(ErrorCode::kInvalidArgument, "histogram: bin edges must strictly increase");
  }
  const auto margins = LinearMargins(model, raw_rows);
  MarginHistogram h;
  h.bin_edges = std::move(bin_edges);
  h.counts.assign(h.bin_edges.size() - 1, 0);
  h.epoch = epoch;
  double total = 0.0;
  for (double d : margins) {
    total += d;
    const auto it = std::upper_bound(h.bin_edges.begin(), h.bin_edges.end(), d);
    std::size_t bin = it == h.bin_edges.begin() ? 0 : (it - h.bin_edges.begin()) - 1;
    bin = std::min(bin, h.counts.size() - 1);
    ++h.counts[bin];
  }
  h.mean_margin = margins.empty() ? 0.0 : total / static_cast<double>(margins.size());
  return h;
}

void WriteVcpCsv(const std::string& path, const std::vector<VcpEstimate>& estimates) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) Fail(ErrorCode::kIo, fmt::format("cannot write {}", path));
  out << "point_index,epsilon,n_samples,p_hat,std_error\n";
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    const auto& e = estimates[i];
    out << i << ',' << textio::FormatDouble(e.epsilon) << ',' << e.n_samples << ','
        << textio::FormatDouble(e.p_hat) << ',' << textio::FormatDouble(e.std_error)
        << '\n';
  }
}

void WriteHistogramCsv(const std::string& path,
                       const std::vector<MarginHistogram>& histograms) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) Fail(ErrorCode::kIo, fmt::format("cannot write {}", path));
  out << "epoch,bin_lo,bin_hi,count,mean_margin\n";
  for (const auto& h : histograms) {
    for (std::size_t b = 0; b < h.counts.size(); ++b) {
      out << h.epoch << ',' << textio::FormatDouble(h.bin_edges[b]) << ','
          << textio::FormatDouble(h.bin_edges[b + 1]) << ',' << h.counts[b] << ','
          << textio::FormatDouble(h.mean_margin) << '\n';
    }
  }
}

}  // namespace cfreg::vcp
