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

// Finite-difference oracles used by the gradient tests. The oracles use only
// forward values; Grad appears only on the side being checked.

#ifndef CFREG_TESTS_GRADCHECK_HPP_
#define CFREG_TESTS_GRADCHECK_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <random>
#include <vector>

#include "cfreg/ndgraph.hpp"

namespace cfreg::testing {

using ndgraph::Expr;
using ndgraph::Shape;
using ndgraph::Tensor;

using ScalarFn = std::function<double(const std::vector<Tensor>&)>;

// Central differences of `f` with respect to every entry of every input,
// flattened in input order.
inline std::vector<double> CentralDifferences(const ScalarFn& f,
                                              const std::vector<Tensor>& inputs,
                                              double h = 1e-5) {
  std::vector<double> out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto probe = [&](double offset) {
        std::vector<Tensor> shifted = inputs;
        std::vector<double> v = inputs[k].vec();
        v[i] += offset;
        shifted[k] = Tensor(inputs[k].shape(), std::move(v));
        return f(shifted);
      };
      out.push_back((probe(h) - probe(-h)) / (2.0 * h));
    }
  }
  return out;
}

// ||a - b|| / max(||a||, ||b||); zero when both vanish.
inline double RelativeError(const std::vector<double>& a,
                            const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  if (scale == 0.0) return std::sqrt(diff);
  return std::sqrt(diff) / scale;
}

inline Tensor RandomTensor(const Shape& shape, std::mt19937_64& rng,
                           double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return Tensor(shape, std::move(v));
}

inline std::vector<double> Flatten(const std::vector<Expr>& exprs) {
  std::vector<double> out;
  for (const auto& e : exprs) {
    const auto& v = e.value().vec();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

// --- Primitive catalogue ----------------------------------------------------

using namespace ndgraph;  // NOLINT: test-only convenience for the op table

inline std::vector<Expr> Variables(const std::vector<Tensor>& values) {
  std::vector<Expr> out;
  for (const auto& v : values) out.push_back(Expr::Variable(v));
  return out;
}

// One primitive under test. `domain` maps a raw draw in [-2, 2] onto the
// primitive's valid inputs (log/sqrt need positives, relu/abs avoid kinks).
struct PrimitiveCase {
  std::string name;
  std::vector<Shape> shapes;
  std::function<Expr(const std::vector<Expr>&)> apply;
  std::function<double(double)> domain = [](double v) { return v; };
};

inline double AwayFromZero(double v) { return v >= 0 ? v + 0.5 : v - 0.5; }
inline double Positive(double v) { return std::abs(v) + 0.2; }
inline double KinkFree(double v) {
  if (std::abs(v) > 1e-3) return v;
  return v >= 0 ? v + 0.01 : v - 0.01;
}

inline std::vector<PrimitiveCase> Primitives(std::mt19937_64& rng) {
  const Tensor labels = [&] {
    std::bernoulli_distribution coin(0.5);
    std::vector<double> y(5);
    for (auto& v : y) v = coin(rng) ? 1.0 : 0.0;
    return Tensor::Vector(y);
  }();
  const Tensor factor = RandomTensor({3, 4}, rng);
  std::vector<PrimitiveCase> cases = {
      {"matmul_mm", {{3, 4}, {4, 2}}, [](auto& x) { return MatMul(x[0], x[1]); }},
      {"matmul_mv", {{3, 4}, {4}}, [](auto& x) { return MatMul(x[0], x[1]); }},
      {"transpose", {{3, 4}}, [](auto& x) { return Transpose(x[0]); }},
      {"outer", {{3}, {4}}, [](auto& x) { return Outer(x[0], x[1]); }},
      {"reshape", {{3, 4}}, [](auto& x) { return Reshape(x[0], {12}); }},
      {"add", {{3, 4}, {3, 4}}, [](auto& x) { return Add(x[0], x[1]); }},
      {"sub", {{5}, {5}}, [](auto& x) { return Sub(x[0], x[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](auto& x) { return Mul(x[0], x[1]); }},
      {"div_numerator", {{5}}, [](auto& x) {
         return Div(x[0], Expr::Constant(Tensor::Vector({1.5, -2, 0.7, 3, -1})));
       }},
      {"div", {{5}, {5}}, [](auto& x) { return Div(x[0], x[1]); }, AwayFromZero},
      {"neg", {{5}}, [](auto& x) { return Neg(x[0]); }},
      {"scale", {{3, 4}}, [](auto& x) { return Scale(x[0], -1.7); }},
      {"add_scalar", {{3, 4}, {}}, [](auto& x) { return AddScalar(x[0], x[1]); }},
      {"mul_scalar", {{5}, {}}, [](auto& x) { return MulScalar(x[0], x[1]); }},
      {"add_const", {{5}}, [](auto& x) { return AddConst(x[0], 0.3); }},
      {"add_row_bias", {{3, 4}, {4}}, [](auto& x) { return AddRowBias(x[0], x[1]); }},
      {"mul_const", {{3, 4}}, [factor](auto& x) { return MulConst(x[0], factor); }},
      {"sum", {{3, 4}}, [](auto& x) { return Sum(x[0]); }},
      {"mean", {{5}}, [](auto& x) { return Mean(x[0]); }},
      {"expand", {{}}, [](auto& x) { return Expand(x[0], {3, 2}); }},
      {"square", {{5}}, [](auto& x) { return Square(x[0]); }},
      {"sqrt", {{5}}, [](auto& x) { return Sqrt(x[0]); }, Positive},
      {"abs", {{5}}, [](auto& x) { return Abs(x[0]); }, KinkFree},
      {"exp", {{5}}, [](auto& x) { return Exp(x[0]); }},
      {"log", {{5}}, [](auto& x) { return Log(x[0]); }, Positive},
      {"sigmoid", {{3, 4}}, [](auto& x) { return Sigmoid(x[0]); }},
      {"tanh", {{3, 4}}, [](auto& x) { return Tanh(x[0]); }},
      {"relu", {{3, 4}}, [](auto& x) { return Relu(x[0]); }, KinkFree},
      {"l2_norm_squared", {{5}}, [](auto& x) { return L2NormSquared(x[0]); }},
      {"bce_with_logits", {{5}}, [labels](auto& x) { return BceWithLogits(x[0], labels); }},
      {"row_squared_norms", {{3, 4}}, [](auto& x) { return RowSquaredNorms(x[0]); }},
  };
  return cases;
}

// Scalarizes a primitive as sum(weights * p(x)^3); the cube keeps the second
// derivative informative for linear primitives (and for sqrt).
inline Expr Scalarize(const PrimitiveCase& c, const std::vector<Expr>& inputs,
                      const Tensor& weights) {
  const Expr p = c.apply(inputs);
  return Sum(MulConst(Mul(Square(p), p), weights));
}

struct PrimitiveErrors {
  double first_order = 0.0;
  double second_order = 0.0;
};

// Worst relative error of reverse-mode first and second derivatives against
// central differences over `seeds` random draws of the case's inputs.
inline PrimitiveErrors CheckPrimitive(const PrimitiveCase& c, int seeds) {
  PrimitiveErrors worst;
  for (int seed = 0; seed < seeds; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    std::vector<Tensor> inputs;
    for (const auto& shape : c.shapes) {
      Tensor raw = RandomTensor(shape, rng);
      std::vector<double> v = raw.vec();
      for (auto& e : v) e = c.domain(e);
      inputs.emplace_back(shape, std::move(v));
    }
    const Shape out_shape = [&] {
      NoGradGuard guard;
      std::vector<Expr> consts;
      for (const auto& t : inputs) consts.push_back(Expr::Constant(t));
      return c.apply(consts).shape();
    }();
    const Tensor w1 = RandomTensor(out_shape, rng);
    std::vector<Tensor> w2;
    for (const auto& t : inputs) w2.push_back(RandomTensor(t.shape(), rng));

    const auto vars = Variables(inputs);
    const auto ad = Flatten(Grad(Scalarize(c, vars, w1), vars));
    const auto fd = CentralDifferences(
        [&](const std::vector<Tensor>& in) {
          std::vector<Expr> consts;
          for (const auto& t : in) consts.push_back(Expr::Constant(t));
          return Scalarize(c, consts, w1).item();
        },
        inputs);
    worst.first_order = std::max(worst.first_order, RelativeError(ad, fd));

    // Second order: d/dx of sum_k <w2_k, dF/dx_k>.
    auto directional = [&](const std::vector<Expr>& v, bool build) {
      const auto g = Grad(Scalarize(c, v, w1), v, build);
      Expr acc = Sum(MulConst(g[0], w2[0]));
      for (std::size_t k = 1; k < g.size(); ++k) acc = Add(acc, Sum(MulConst(g[k], w2[k])));
      return acc;
    };
    const auto vars2 = Variables(inputs);
    const auto ad2 = Flatten(Grad(directional(vars2, true), vars2));
    const auto fd2 = CentralDifferences(
        [&](const std::vector<Tensor>& in) { return directional(Variables(in), false).item(); },
        inputs);
    worst.second_order = std::max(worst.second_order, RelativeError(ad2, fd2));
  }
  return worst;
}

}  // namespace cfreg::testing

#endif  // CFREG_TESTS_GRADCHECK_HPP_
