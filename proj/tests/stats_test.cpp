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

#include "cfreg/stats.hpp"

#include <cmath>
#include <vector>

#include "cfreg/error.hpp"
#include "doctest.h"

namespace cfreg::stats {
namespace {

TEST_CASE("mean and sample std") {
  const std::vector<double> v = {2, 4, 4, 4, 5, 5, 7, 9};
  CHECK(Mean(v) == 5.0);
  // Sum of squared deviations is 32; n - 1 = 7.
  CHECK(SampleStd(v) == doctest::Approx(std::sqrt(32.0 / 7.0)).epsilon(1e-15));
  CHECK(SampleStd(std::vector<double>{3.0}) == 0.0);
  CHECK_THROWS_AS(Mean(std::vector<double>{}), Error);
}

TEST_CASE("welch t test") {
  // Plain-loop evaluation of the t statistic and the Satterthwaite df.
  const std::vector<double> a = {19, 20, 21, 22, 19, 20.5, 21.5, 19};
  const std::vector<double> b = {22, 23, 21, 24, 22, 23, 21.5, 23.5};
  const auto r = WelchTTest(a, b);
  double ma = 0, mb = 0;
  for (double x : a) ma += x / 8;
  for (double x : b) mb += x / 8;
  double sa = 0, sb = 0;
  for (double x : a) sa += (x - ma) * (x - ma) / 7;
  for (double x : b) sb += (x - mb) * (x - mb) / 7;
  const double t = (ma - mb) / std::sqrt(sa / 8 + sb / 8);
  const double df = std::pow(sa / 8 + sb / 8, 2) / (std::pow(sa / 8, 2) / 7 + std::pow(sb / 8, 2) / 7);
  CHECK(r.t == doctest::Approx(t).epsilon(1e-12));
  CHECK(r.df == doctest::Approx(df).epsilon(1e-12));
  // scipy.stats.ttest_ind(a, b, equal_var=False)
  CHECK(r.p_two_sided == doctest::Approx(0.0013020088902535676).epsilon(1e-9));

  // Identical samples: no evidence either way.
  CHECK(WelchTTest(a, a).p_two_sided == doctest::Approx(1.0));
  const std::vector<double> flat = {0.5, 0.5, 0.5};
  CHECK(WelchTTest(flat, flat).p_two_sided == 1.0);
  const std::vector<double> flat2 = {0.75, 0.75, 0.75};
  CHECK(WelchTTest(flat2, flat).p_two_sided == 0.0);
  CHECK_THROWS_AS(WelchTTest(std::vector<double>{1.0}, a), Error);

  // t with df -> infinity approaches the normal: t = 1.96 gives p ~ 0.05.
  std::vector<double> x(4000), y(4000);
  for (int i = 0; i < 4000; ++i) {
    x[i] = (i % 2 ? 1.0 : -1.0);
    y[i] = (i % 2 ? 1.0 : -1.0);
  }
  for (auto& v : x) v += 1.96 * std::sqrt(2.0 * 4000.0 / 3999.0) / std::sqrt(4000.0);
  CHECK(WelchTTest(x, y).p_two_sided == doctest::Approx(0.05).epsilon(0.01));
}

TEST_CASE("spearman") {
  const std::vector<double> x = {1, 2, 3, 4, 5};
  CHECK(Spearman(x, std::vector<double>{2, 4, 8, 16, 32}) == doctest::Approx(1.0));
  CHECK(Spearman(x, std::vector<double>{5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
  // Ties get average ranks: ranks of y are 1.5, 1.5, 3, 4, 5.
  const double r = Spearman(x, std::vector<double>{1, 1, 2, 3, 4});
  CHECK(r == doctest::Approx(0.9746794344808963).epsilon(1e-12));
  CHECK_THROWS_AS(Spearman(x, std::vector<double>{1, 2}), Error);
}

}  // namespace
}  // namespace cfreg::stats
