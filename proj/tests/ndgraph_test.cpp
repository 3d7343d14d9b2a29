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

#include "cfreg/ndgraph.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cfreg/error.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

namespace cfreg::ndgraph {
namespace {

using testing::CentralDifferences;
using testing::CheckPrimitive;
using testing::Flatten;
using testing::Primitives;
using testing::RandomTensor;
using testing::RelativeError;
using testing::Variables;

TEST_CASE("forward examples") {
  const Expr r = Relu(Expr::Constant(Tensor::Vector({-1, 0, 2})));
  CHECK(r.value().vec() == std::vector<double>{0, 0, 2});
  CHECK(Sigmoid(Expr::Constant(Tensor::Scalar(0))).item() == 0.5);
  const Expr bce = BceWithLogits(Expr::Constant(Tensor::Scalar(0)), Tensor::Scalar(1));
  CHECK(bce.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(bce.item() == doctest::Approx(0.693147).epsilon(1e-6));
}

TEST_CASE("polynomial derivatives") {
  const Expr x = Expr::Variable(Tensor::Scalar(3.0));
  const Expr y = Mul(x, x);
  CHECK(Grad(y, {x})[0].item() == 6.0);

  for (double v : {-1.5, 0.0, 0.25, 4.0}) {
    const Expr xv = Expr::Variable(Tensor::Scalar(v));
    const Expr dy = Grad(Mul(xv, xv), {xv}, /*build_graph=*/true)[0];
    CHECK(dy.requires_grad());
    CHECK(Grad(dy, {xv})[0].item() == 2.0);
  }
}


TEST_CASE("first and second order agree with central differences") {
  std::mt19937_64 case_rng(7);
  for (const auto& c : Primitives(case_rng)) {
    CAPTURE(c.name);
    const auto worst = CheckPrimitive(c, 100);
    CHECK(worst.first_order < 1e-5);
    CHECK(worst.second_order < 1e-4);
  }
}

// Two-layer tanh MLP loss as a pure function of its parameters.
Expr TanhMlpLoss(const Tensor& x, const Tensor& y, const std::vector<Expr>& p) {
  const Expr h = Tanh(AddRowBias(MatMul(Expr::Constant(x), p[0]), p[1]));
  const Expr logits = AddConst(MatMul(h, p[2]), 0.0);
  return Mean(BceWithLogits(AddScalar(logits, p[3]), y));
}

TEST_CASE("tanh MLP parameter gradient matches finite differences") {
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor x = RandomTensor({6, 3}, rng);
    const Tensor y = Tensor::Vector({0, 1, 1, 0, 1, 0});
    const std::vector<Tensor> params = {RandomTensor({3, 5}, rng),
                                        RandomTensor({5}, rng),
                                        RandomTensor({5}, rng),
                                        RandomTensor({}, rng)};
    const auto vars = Variables(params);
    const auto ad = Flatten(Grad(TanhMlpLoss(x, y, vars), vars));
    const auto fd = CentralDifferences(
        [&](const std::vector<Tensor>& p) {
          std::vector<Expr> c;
          for (const auto& t : p) c.push_back(Expr::Constant(t));
          return TanhMlpLoss(x, y, c).item();
        },
        params);
    CHECK(RelativeError(ad, fd) < 1e-5);
  }
}

TEST_CASE("grad is linear") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Expr x = Expr::Variable(RandomTensor({4}, rng));
    const Expr f = Sum(Tanh(Square(x)));
    const Expr g = Sum(Mul(Sigmoid(x), x));
    const double a = 1.3, b = -0.4;
    const auto combined = Grad(Add(Scale(f, a), Scale(g, b)), {x})[0].value();
    const auto gf = Grad(f, {x})[0].value();
    const auto gg = Grad(g, {x})[0].value();
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(std::abs(combined[i] - (a * gf[i] + b * gg[i])) <= 1e-12);
    }
  }
}

TEST_CASE("re-evaluation is bit-identical") {
  std::mt19937_64 rng(11);
  const Tensor xv = RandomTensor({4, 3}, rng);
  const Tensor wv = RandomTensor({3}, rng);
  auto run = [&] {
    const Expr w = Expr::Variable(wv);
    const Expr loss = Mean(BceWithLogits(MatMul(Expr::Constant(xv), w),
                                         Tensor::Vector({1, 0, 1, 1})));
    auto g = Grad(loss, {w}, true)[0];
    auto h = Grad(L2NormSquared(g), {w})[0];
    return std::make_pair(loss.item(), h.value().vec());
  };
  const auto first = run();
  const auto second = run();
  CHECK(first.first == second.first);
  CHECK(first.second == second.second);
}

TEST_CASE("structured shape errors") {
  const Expr a = Expr::Constant(Tensor::Zeros({2, 3}));
  const Expr b = Expr::Constant(Tensor::Zeros({2}));
  try {
    MatMul(a, b);
    FAIL("expected a shape error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kShapeMismatch);
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[2]") != std::string::npos);
  }
  CHECK_THROWS_AS(Add(a, b), Error);
  CHECK_THROWS_AS(AddScalar(a, b), Error);
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), Error);
}

TEST_CASE("grad errors") {
  const Expr x = Expr::Variable(Tensor::Vector({1, 2}));
  const Expr unrelated = Expr::Variable(Tensor::Scalar(1));
  CHECK_THROWS_AS(Grad(Square(x), {x}), Error);  // non-scalar output
  CHECK_THROWS_AS(Grad(Sum(x), {unrelated}), Error);
  const Expr c = Expr::Constant(Tensor::Scalar(2));
  CHECK_THROWS_AS(Grad(Sum(x), {c}), Error);
}

TEST_CASE("no-grad guard records nothing") {
  const Expr x = Expr::Variable(Tensor::Vector({1, 2}));
  {
    NoGradGuard guard;
    const Expr y = Sum(Square(x));
    CHECK_FALSE(y.requires_grad());
    CHECK(y.parents().empty());
  }
  CHECK(GradModeEnabled());
  CHECK(Sum(Square(x)).requires_grad());
}

}  // namespace
}  // namespace cfreg::ndgraph
