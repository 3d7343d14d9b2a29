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

// Summary statistics for run reports.

#ifndef CFREG_STATS_HPP_
#define CFREG_STATS_HPP_

#include <span>

namespace cfreg::stats {

double Mean(std::span<const double> v);
// Sample standard deviation (n - 1 denominator); 0 for a single value.
double SampleStd(std::span<const double> v);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p_two_sided = 1.0;
};

// Welch's unequal-variance t-test. When both samples have zero variance the
// p-value is 0 if the means differ and 1 otherwise.
WelchResult WelchTTest(std::span<const double> a, std::span<const double> b);

// Spearman rank correlation with average ranks for ties.
double Spearman(std::span<const double> x, std::span<const double> y);

}  // namespace cfreg::stats

#endif  // CFREG_STATS_HPP_
