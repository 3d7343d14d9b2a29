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

// Counterfactual-probability estimates: the share of an eps-ball around x
// whose predicted label differs from x's, by Monte Carlo. Also margin
// distances for linear models.
//
// Balls live in raw feature space; models with a polynomial expander are
// evaluated on the expanded samples.

#ifndef CFREG_VCP_HPP_
#define CFREG_VCP_HPP_

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cfreg/models.hpp"
#include "cfreg/ndgraph.hpp"

namespace cfreg::vcp {

using models::Model;
using ndgraph::Tensor;

struct VcpEstimate {
  double p_hat = 0.0;
  std::size_t n_samples = 0;
  double epsilon = 0.0;
  double std_error = 0.0;
};

// Uniform draw from the closed n-ball: Gaussian direction, radius eps*u^(1/n).
std::vector<double> SampleInBall(std::span<const double> center, double epsilon,
                                 std::mt19937_64& rng);

VcpEstimate EstimateVcp(const Model& model, std::span<const double> x,
                        double epsilon, std::size_t n_samples, std::mt19937_64& rng);

// Independent stream for point `index` of a run; used so that parallel and
// serial sweeps agree.
std::mt19937_64 PointStream(std::uint64_t seed, std::size_t index);

struct VcpSweep {
  std::vector<VcpEstimate> per_point;
  double mean = 0.0;
};

// Per-point estimates over the rows of `raw_rows` (raw features), each with
// PointStream(seed, i), spread over `workers` threads.
VcpSweep MeanVcp(const Model& model, const Tensor& raw_rows, double epsilon,
                 std::size_t n_samples, std::uint64_t seed, int workers = 1);

double MeanOf(const std::vector<VcpEstimate>& estimates);

// |theta . x + bias| / ||theta||.
double MarginDistanceLinear(std::span<const double> theta, double bias,
                            std::span<const double> x);

struct MarginHistogram {
  std::vector<double> bin_edges;
  std::vector<std::size_t> counts;
  double mean_margin = 0.0;
  std::int64_t epoch = 0;
};

// Margins of every row for a linear model. With a polynomial expander the
// constant term is the bias and the hyperplane lives in the expanded space.
std::vector<double> LinearMargins(const Model& model, const Tensor& raw_rows);

// Values below the first edge land in the first bin, values at or above the
// last edge in the last bin, so the counts always sum to the row count.
MarginHistogram BuildMarginHistogram(const Model& model, const Tensor& raw_rows,
                                     std::vector<double> bin_edges,
                                     std::int64_t epoch);

// Evenly spaced edges over [lo, hi].
std::vector<double> UniformEdges(double lo, double hi, std::size_t bins);

// CSV: point_index,epsilon,n_samples,p_hat,std_error
void WriteVcpCsv(const std::string& path, const std::vector<VcpEstimate>& estimates);
// CSV: epoch,bin_lo,bin_hi,count,mean_margin (one row per bin, all histograms)
void WriteHistogramCsv(const std::string& path,
                       const std::vector<MarginHistogram>& histograms);

}  // namespace cfreg::vcp

#endif  // CFREG_VCP_HPP_
