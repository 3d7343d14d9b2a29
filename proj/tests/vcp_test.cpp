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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <vector>

#include "cfreg/error.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

namespace cfreg::vcp {
namespace {

// Share of a disc of radius eps cut off by a chord at distance d.
double SegmentShare(double d, double eps) {
  if (d >= eps) return 0.0;
  return (eps * eps * std::acos(d / eps) - d * std::sqrt(eps * eps - d * d)) /
         (std::numbers::pi * eps * eps);
}

TEST_CASE("sample_in_ball") {
  std::mt19937_64 rng(1);
  const std::vector<double> c1 = {3.0};
  double sum = 0, sq = 0;
  constexpr int kDraws = 10000;
  for (int i = 0; i < kDraws; ++i) {
    const double v = SampleInBall(c1, 0.5, rng)[0];
    CHECK(v >= 2.5);
    CHECK(v <= 3.5);
    sum += v;
    sq += v * v;
  }
  const double mean = sum / kDraws;
  const double sd = std::sqrt(sq / kDraws - mean * mean);
  CHECK(std::abs(mean - 3.0) <= 3 * sd / std::sqrt(kDraws));

  const std::vector<double> c2 = {1.0, -1.0};
  const double eps = 2.0;
  std::vector<double> dist(kDraws);
  double dsum = 0;
  for (auto& d : dist) {
    const auto p = SampleInBall(c2, eps, rng);
    d = std::hypot(p[0] - c2[0], p[1] - c2[1]);
    CHECK(d <= eps);
    dsum += d;
  }
  const double dmean = dsum / kDraws;
  double var = 0;
  for (double d : dist) var += (d - dmean) * (d - dmean);
  const double se = std::sqrt(var / (kDraws - 1) / kDraws);
  CHECK(std::abs(dmean - 2.0 * eps / 3.0) <= 3 * se);

  const std::vector<double> c10(10, 0.0);
  for (int i = 0; i < 1000; ++i) {
    const auto p = SampleInBall(c10, 0.3, rng);
    double r = 0;
    for (double v : p) r += v * v;
    CHECK(std::sqrt(r) <= 0.3);
  }
  CHECK_THROWS_AS(SampleInBall(c2, 0.0, rng), Error);
}

TEST_CASE("estimate_vcp examples") {
  std::mt19937_64 rng(2);
  // Zero weights predict class 1 everywhere.
  const Model flat = Model::LinearFromTheta(Tensor::Zeros({2}));
  const std::vector<double> x = {0.3, 0.4};
  CHECK(EstimateVcp(flat, x, 1.0, 500, rng).p_hat == 0.0);

  const Model line = Model::LinearFromTheta(Tensor::Vector({1.0, 1.0}));
  const std::vector<double> on = {0.5, -0.5};
  const auto half = EstimateVcp(line, on, 1.0, 10000, rng);
  CHECK(std::abs(half.p_hat - 0.5) <= 3 * half.std_error);

  // Boundary x0 = 0.5 with x at the origin: d = 0.5.
  const Model shifted = Model::LinearFromTheta(Tensor::Vector({1.0, 0.0}));
  const std::vector<double> near = {-0.5, 0.0};
  const double p = SegmentShare(0.5, 1.0);
  CHECK(p == doctest::Approx(0.19550).epsilon(1e-4));
  const auto est = EstimateVcp(shifted, near, 1.0, 10000, rng);
  CHECK(std::abs(est.p_hat - p) <= 3 * est.std_error);
  CHECK(est.n_samples == 10000);
  CHECK(est.std_error == doctest::Approx(std::sqrt(est.p_hat * (1 - est.p_hat) / 10000)));

  std::mt19937_64 a(5), b(5);
  CHECK(EstimateVcp(shifted, near, 1.0, 300, a).p_hat ==
        EstimateVcp(shifted, near, 1.0, 300, b).p_hat);
  CHECK_THROWS_AS(EstimateVcp(shifted, near, 1.0, 0, a), Error);
}

TEST_CASE("2D linear estimates track the segment formula") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int inside = 0;
  constexpr int kConfigs = 100;
  for (int c = 0; c < kConfigs; ++c) {
    const double eps = 0.2 + 2.0 * u(rng);
    const double d = 0.9 * eps * u(rng);
    const double angle = 2 * std::numbers::pi * u(rng);
    const double scale = 0.5 + 3 * u(rng);
    const double t0 = scale * std::cos(angle), t1 = scale * std::sin(angle);
    const std::vector<double> x = {4 * u(rng) - 2, 4 * u(rng) - 2};
    // Linear model with a bias column: features (1, x0, x1).
    const double side = u(rng) < 0.5 ? -1.0 : 1.0;
    const double bias = side * d * scale - (t0 * x[0] + t1 * x[1]);
    Model m = Model::LinearFromTheta(Tensor::Vector({bias, t0, t1}));
    m.set_expander(models::PolyExpander(2, 1));
    CHECK(MarginDistanceLinear(std::vector<double>{t0, t1}, bias, x) ==
          doctest::Approx(d).epsilon(1e-12));
    const auto est = EstimateVcp(m, x, eps, 10000, rng);
    if (std::abs(est.p_hat - SegmentShare(d, eps)) <= 3 * est.std_error) ++inside;
  }
  CHECK(inside >= 99);
}

TEST_CASE("closer to the boundary never lowers the analytic share") {
  for (double eps : {0.5, 1.0, 1.5}) {
    double last = SegmentShare(2 * eps, eps);
    for (int k = 200; k >= 0; --k) {
      const double p = SegmentShare(eps * k / 100.0, eps);
      CHECK(p >= last);
      last = p;
    }
    CHECK(last == doctest::Approx(0.5));
  }
}

TEST_CASE("mean_vcp") {
  CHECK(MeanOf({{0.2, 1, 1, 0}, {0.4, 1, 1, 0}}) == doctest::Approx(0.3));
  CHECK_THROWS_AS(MeanOf({}), Error);

  std::mt19937_64 rng(4);
  const Tensor rows = testing::RandomTensor({12, 3}, rng);
  const Model mlp = Model::Mlp(3, {8}, models::Activation::kTanh, 0.0, 3);
  const auto serial = MeanVcp(mlp, rows, 1.0, 200, 77, 1);
  const auto parallel = MeanVcp(mlp, rows, 1.0, 200, 77, 4);
  double lo = 1, hi = 0;
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(serial.per_point[i].p_hat == parallel.per_point[i].p_hat);
    lo = std::min(lo, serial.per_point[i].p_hat);
    hi = std::max(hi, serial.per_point[i].p_hat);
  }
  CHECK(serial.mean == parallel.mean);
  CHECK(serial.mean >= lo);
  CHECK(serial.mean <= hi);

  const auto single = MeanVcp(mlp, Tensor::Matrix(1, 3, {0.1, 0.2, 0.3}), 1.0, 50, 9);
  CHECK(single.mean == single.per_point[0].p_hat);

  const Model flat = Model::LinearFromTheta(Tensor::Zeros({3}));
  CHECK(MeanVcp(flat, rows, 1.5, 50, 1, 2).mean == 0.0);
}

TEST_CASE("margin distances and histograms") {
  const std::vector<double> th = {3.0, 4.0};
  const std::vector<double> x = {1.0, 1.0};
  CHECK(MarginDistanceLinear(th, 0.0, x) == doctest::Approx(1.4));
  CHECK(MarginDistanceLinear(th, -7.0, x) == 0.0);
  const std::vector<double> th5 = {-15.0, -20.0};
  CHECK(MarginDistanceLinear(th5, 2.5, x) ==
        doctest::Approx(MarginDistanceLinear(th, -0.5, x)).epsilon(1e-14));
  CHECK_THROWS_AS(MarginDistanceLinear(std::vector<double>{0.0, 0.0}, 1.0, x), Error);

  // Points on the line x0 + x1 = 0.
  Model m = Model::LinearFromTheta(Tensor::Vector({0.0, 1.0, 1.0}));
  m.set_expander(models::PolyExpander(2, 1));
  const Tensor on_line = Tensor::Matrix(3, 2, {1, -1, -2, 2, 0.5, -0.5});
  const auto h = BuildMarginHistogram(m, on_line, UniformEdges(0, 1, 4), 7);
  CHECK(h.counts == std::vector<std::size_t>{3, 0, 0, 0});
  CHECK(h.mean_margin == 0.0);
  CHECK(h.epoch == 7);

  std::mt19937_64 rng(6);
  const Tensor rows = testing::RandomTensor({50, 2}, rng, -5, 5);
  const auto spread = BuildMarginHistogram(m, rows, UniformEdges(0.5, 1.0, 3), 0);
  std::size_t total = 0;
  for (auto c : spread.counts) total += c;
  CHECK(total == 50);
  CHECK(spread.mean_margin >= 0.0);

  const Model mlp = Model::Mlp(2, {4}, models::Activation::kRelu, 0.0, 1);
  try {
    BuildMarginHistogram(mlp, rows, UniformEdges(0, 1, 2), 0);
    FAIL("expected an unsupported-model error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kUnsupported);
  }
  CHECK_THROWS_AS(BuildMarginHistogram(m, rows, {1.0, 0.5}, 0), Error);
}

TEST_CASE("csv emitters") {
  const auto dir = std::filesystem::temp_directory_path() / "cfreg_vcp_test";
  std::filesystem::create_directories(dir);
  const std::string vpath = (dir / "vcp.csv").string();
  WriteVcpCsv(vpath, {{0.25, 100, 1.5, 0.0433}});
  std::ifstream in(vpath);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "point_index,epsilon,n_samples,p_hat,std_error");
  CHECK(row == "0,1.5,100,0.25,0.0433");

  MarginHistogram h{{0.0, 0.5, 1.0}, {2, 3}, 0.4, 10};
  const std::string hpath = (dir / "hist.csv").string();
  WriteHistogramCsv(hpath, {h});
  std::ifstream hin(hpath);
  std::getline(hin, header);
  std::getline(hin, row);
  CHECK(header == "epoch,bin_lo,bin_hi,count,mean_margin");
  CHECK(row == "10,0,0.5,2,0.4");
}

}  // namespace
}  // namespace cfreg::vcp
