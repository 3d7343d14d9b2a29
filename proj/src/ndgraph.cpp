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

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cfreg/error.hpp"

namespace cfreg::ndgraph {

std::string ShapeToString(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, ","));
}

namespace {

std::size_t NumElements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

}  // namespace

// --- Tensor -----------------------------------------------------------------

Tensor::Tensor()
    : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (shape_.size() > 2) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("tensor: rank {} unsupported (max 2)", shape_.size()));
  }
  if (NumElements(shape_) != data.size()) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("tensor: shape {} holds {} values, got {}",
                     ShapeToString(shape_), NumElements(shape_), data.size()));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::Scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::Vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::Matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::Filled(Shape shape, double value) {
  const std::size_t n = NumElements(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

double Tensor::item() const {
  if (size() != 1) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("item: tensor of shape {} is not single-valued",
                     ShapeToString(shape_)));
  }
  return (*data_)[0];
}

bool Tensor::AllFinite() const {
  return std::all_of(data_->begin(), data_->end(),
                     [](double v) { return std::isfinite(v); });
}

const char* OpName(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kOuter: return "outer";
    case Op::kReshape: return "reshape";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMulScalar: return "mul_scalar";
    case Op::kAddRowBias: return "add_row_bias";
    case Op::kMulConst: return "mul_const";
    case Op::kSum: return "sum";
    case Op::kExpand: return "expand";
    case Op::kSquare: return "square";
    case Op::kSqrt: return "sqrt";
    case Op::kAbs: return "abs";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kBceWithLogits: return "bce_with_logits";
  }
  return "?";
}

// --- Graph nodes ------------------------------------------------------------

// Computes one gradient per parent from (this node, upstream gradient).
// Entries for parents that do not require grad may be left undefined.
using BackwardFn = std::function<std::vector<Expr>(const Expr&, const Expr&)>;

namespace internal {

struct Node {
  Tensor value;
  Op op = Op::kLeaf;
  std::vector<Expr> parents;
  bool requires_grad = false;
  BackwardFn backward;
};

struct Access {
  static Expr Make(std::shared_ptr<Node> node) { return Expr(std::move(node)); }
  static const Node& Get(const Expr& e) { return *e.node_; }
};

}  // namespace internal

namespace {

using internal::Access;
using internal::Node;

thread_local bool g_grad_mode = true;

Expr MakeLeaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Access::Make(std::move(node));
}

Expr MakeNode(Op op, Tensor value, std::vector<Expr> parents,
              BackwardFn backward) {
  const bool any = std::any_of(parents.begin(), parents.end(),
                               [](const Expr& p) { return p.requires_grad(); });
  if (!g_grad_mode || !any) return MakeLeaf(std::move(value), false);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  node->parents = std::move(parents);
  node->requires_grad = true;
  node->backward = std::move(backward);
  return Access::Make(std::move(node));
}

bool Needs(const Expr& self, std::size_t i) {
  return self.parents()[i].requires_grad();
}

void CheckDefined(const Expr& e, const char* op) {
  if (!e.defined()) {
    Fail(ErrorCode::kInvalidArgument,
         fmt::format("{}: undefined operand", op));
  }
}

void CheckSameShape(const Expr& a, const Expr& b, const char* op) {
  CheckDefined(a, op);
  CheckDefined(b, op);
  if (a.shape() != b.shape()) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("{}: shape mismatch {} vs {}", op,
                     ShapeToString(a.shape()), ShapeToString(b.shape())));
  }
}

void CheckRank0(const Expr& s, const char* op) {
  CheckDefined(s, op);
  if (s.value().rank() != 0) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("{}: expected rank-0 scalar, got {}", op,
                     ShapeToString(s.shape())));
  }
}

template <typename F>
Tensor Map(const Tensor& a, F f) {
  std::vector<double> out(a.size());
  const auto& in = a.vec();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return Tensor(a.shape(), std::move(out));
}

template <typename F>
Tensor Zip(const Tensor& a, const Tensor& b, F f) {
  std::vector<double> out(a.size());
  const auto& x = a.vec();
  const auto& y = b.vec();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  return Tensor(a.shape(), std::move(out));
}

double StableSigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Expr Ones(const Shape& shape) { return Expr::Constant(Tensor::Filled(shape, 1.0)); }

Expr MatMulTransA(const Expr& a, const Expr& b);

}  // namespace

// --- Expr -------------------------------------------------------------------

Expr Expr::Constant(Tensor value) { return MakeLeaf(std::move(value), false); }
Expr Expr::Variable(Tensor value) { return MakeLeaf(std::move(value), true); }

const Tensor& Expr::value() const {
  if (!node_) Fail(ErrorCode::kInvalidArgument, "expr: undefined");
  return node_->value;
}
Op Expr::op() const { return node_->op; }
bool Expr::requires_grad() const { return node_ && node_->requires_grad; }
const std::vector<Expr>& Expr::parents() const { return node_->parents; }

bool GradModeEnabled() { return g_grad_mode; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_mode) {
  g_grad_mode = enabled;
}
GradModeGuard::~GradModeGuard() { g_grad_mode = previous_; }

namespace {

// C = A^T B for A (k x m); B is (k x n) or (k).
Tensor MatMulTransAKernel(const Tensor& a, const Tensor& b) {
  const std::size_t k = a.shape()[0];
  const std::size_t m = a.shape()[1];
  const auto& av = a.vec();
  const auto& bv = b.vec();
  if (b.rank() == 1) {
    std::vector<double> out(m, 0.0);
    for (std::size_t r = 0; r < k; ++r) {
      const double s = bv[r];
      if (s == 0.0) continue;
      const double* row = av.data() + r * m;
      for (std::size_t j = 0; j < m; ++j) out[j] += row[j] * s;
    }
    return Tensor::Vector(std::move(out));
  }
  const std::size_t n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  for (std::size_t r = 0; r < k; ++r) {
    const double* arow = av.data() + r * m;
    const double* brow = bv.data() + r * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double s = arow[i];
      if (s == 0.0) continue;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += s * brow[j];
    }
  }
  return Tensor::Matrix(m, n, std::move(out));
}

Expr MatMulTransA(const Expr& a, const Expr& b) {
  CheckDefined(a, "matmul_trans_a");
  CheckDefined(b, "matmul_trans_a");
  if (a.value().rank() != 2 || b.value().rank() < 1 ||
      b.shape()[0] != a.shape()[0]) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("matmul_trans_a: shape mismatch {} vs {}",
                     ShapeToString(a.shape()), ShapeToString(b.shape())));
  }
  Tensor value = MatMulTransAKernel(a.value(), b.value());
  const bool vec = b.value().rank() == 1;
  // Recorded as a matmul node; the backward differs by case.
  return MakeNode(Op::kMatMul, std::move(value), {a, b},
                  [vec](const Expr& self, const Expr& g) {
                    const Expr& a = self.parents()[0];
                    const Expr& b = self.parents()[1];
                    std::vector<Expr> out(2);
                    if (vec) {
                      if (Needs(self, 0)) out[0] = Outer(b, g);
                      if (Needs(self, 1)) out[1] = MatMul(a, g);
                    } else {
                      if (Needs(self, 0)) out[0] = MatMul(b, Transpose(g));
                      if (Needs(self, 1)) out[1] = MatMul(a, g);
                    }
                    return out;
                  });
}

}  // namespace

// --- Linear algebra ---------------------------------------------------------

Expr MatMul(const Expr& a, const Expr& b) {
  CheckDefined(a, "matmul");
  CheckDefined(b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() < 1 || bv.shape()[0] != av.shape()[1]) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("matmul: shape mismatch {} vs {}",
                     ShapeToString(av.shape()), ShapeToString(bv.shape())));
  }
  const std::size_t m = av.shape()[0];
  const std::size_t k = av.shape()[1];
  const auto& x = av.vec();
  const auto& y = bv.vec();
  if (bv.rank() == 1) {
    std::vector<double> out(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const double* row = x.data() + i * k;
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) acc += row[j] * y[j];
      out[i] = acc;
    }
    return MakeNode(Op::kMatMul, Tensor::Vector(std::move(out)), {a, b},
                    [](const Expr& self, const Expr& g) {
                      const Expr& a = self.parents()[0];
                      const Expr& b = self.parents()[1];
                      std::vector<Expr> grads(2);
                      if (Needs(self, 0)) grads[0] = Outer(g, b);
                      if (Needs(self, 1)) grads[1] = MatMulTransA(a, g);
                      return grads;
                    });
  }
  const std::size_t n = bv.shape()[1];
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = x[i * k + p];
      if (s == 0.0) continue;
      const double* brow = y.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += s * brow[j];
    }
  }
  return MakeNode(Op::kMatMul, Tensor::Matrix(m, n, std::move(out)), {a, b},
                  [](const Expr& self, const Expr& g) {
                    const Expr& a = self.parents()[0];
                    const Expr& b = self.parents()[1];
                    std::vector<Expr> grads(2);
                    if (Needs(self, 0)) grads[0] = MatMul(g, Transpose(b));
                    if (Needs(self, 1)) grads[1] = MatMulTransA(a, g);
                    return grads;
                  });
}

Expr Transpose(const Expr& a) {
  CheckDefined(a, "transpose");
  const Tensor& v = a.value();
  if (v.rank() != 2) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("transpose: expected matrix, got {}",
                     ShapeToString(v.shape())));
  }
  const std::size_t r = v.shape()[0];
  const std::size_t c = v.shape()[1];
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v.at(i, j);
  return MakeNode(Op::kTranspose, Tensor::Matrix(c, r, std::move(out)), {a},
                  [](const Expr&, const Expr& g) {
                    return std::vector<Expr>{Transpose(g)};
                  });
}

Expr Outer(const Expr& a, const Expr& b) {
  CheckDefined(a, "outer");
  CheckDefined(b, "outer");
  if (a.value().rank() != 1 || b.value().rank() != 1) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("outer: expected vectors, got {} vs {}",
                     ShapeToString(a.shape()), ShapeToString(b.shape())));
  }
  const auto& x = a.value().vec();
  const auto& y = b.value().vec();
  std::vector<double> out(x.size() * y.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j) out[i * y.size() + j] = x[i] * y[j];
  return MakeNode(Op::kOuter,
                  Tensor::Matrix(x.size(), y.size(), std::move(out)), {a, b},
                  [](const Expr& self, const Expr& g) {
                    const Expr& a = self.parents()[0];
                    const Expr& b = self.parents()[1];
                    std::vector<Expr> grads(2);
                    if (Needs(self, 0)) grads[0] = MatMul(g, b);
                    if (Needs(self, 1)) grads[1] = MatMulTransA(g, a);
                    return grads;
                  });
}

Expr Reshape(const Expr& a, const Shape& shape) {
  CheckDefined(a, "reshape");
  const Shape from = a.shape();
  Tensor value(shape, a.value().vec());  // validates the element count
  return MakeNode(Op::kReshape, std::move(value), {a},
                  [from](const Expr&, const Expr& g) {
                    return std::vector<Expr>{Reshape(g, from)};
                  });
}

// --- Elementwise binary -----------------------------------------------------

Expr Add(const Expr& a, const Expr& b) {
  CheckSameShape(a, b, "add");
  return MakeNode(Op::kAdd, Zip(a.value(), b.value(), std::plus<>()), {a, b},
                  [](const Expr&, const Expr& g) {
                    return std::vector<Expr>{g, g};
                  });
}

Expr Sub(const Expr& a, const Expr& b) {
  CheckSameShape(a, b, "sub");
  return MakeNode(Op::kSub, Zip(a.value(), b.value(), std::minus<>()), {a, b},
                  [](const Expr& self, const Expr& g) {
                    std::vector<Expr> grads(2);
                    grads[0] = g;
                    if (Needs(self, 1)) grads[1] = Neg(g);
                    return grads;
                  });
}

Expr Mul(const Expr& a, const Expr& b) {
  CheckSameShape(a, b, "mul");
  return MakeNode(Op::kMul, Zip(a.value(), b.value(), std::multiplies<>()),
                  {a, b}, [](const Expr& self, const Expr& g) {
                    std::vector<Expr> grads(2);
                    if (Needs(self, 0)) grads[0] = Mul(g, self.parents()[1]);
                    if (Needs(self, 1)) grads[1] = Mul(g, self.parents()[0]);
                    return grads;
                  });
}

Expr Div(const Expr& a, const Expr& b) {
  CheckSameShape(a, b, "div");
  return MakeNode(Op::kDiv, Zip(a.value(), b.value(), std::divides<>()),
                  {a, b}, [](const Expr& self, const Expr& g) {
                    const Expr& b = self.parents()[1];
                    std::vector<Expr> grads(2);
                    if (Needs(self, 0)) grads[0] = Div(g, b);
                    // d(a/b)/db = -(a/b)/b
                    if (Needs(self, 1)) grads[1] = Neg(Div(Mul(g, self), b));
                    return grads;
                  });
}

Expr Neg(const Expr& a) {
  CheckDefined(a, "neg");
  return MakeNode(Op::kNeg, Map(a.value(), [](double v) { return -v; }), {a},
                  [](const Expr&, const Expr& g) {
                    return std::vector<Expr>{Neg(g)};
                  });
}

Expr Scale(const Expr& a, double factor) {
  CheckDefined(a, "scale");
  return MakeNode(Op::kScale,
                  Map(a.value(), [factor](double v) { return v * factor; }),
                  {a}, [factor](const Expr&, const Expr& g) {
                    return std::vector<Expr>{Scale(g, factor)};
                  });
}

Expr AddScalar(const Expr& a, const Expr& scalar) {
  CheckDefined(a, "add_scalar");
  CheckRank0(scalar, "add_scalar");
  const double s = scalar.item();
  return MakeNode(Op::kAddScalar,
                  Map(a.value(), [s](double v) { return v + s; }), {a, scalar},
                  [](const Expr& self, const Expr& g) {
                    std::vector<Expr> grads(2);
                    grads[0] = g;
                    if (Needs(self, 1)) grads[1] = Sum(g);
                    return grads;
                  });
}

Expr MulScalar(const Expr& a, const Expr& scalar) {
  CheckDefined(a, "mul_scalar");
  CheckRank0(scalar, "mul_scalar");
  const double s = scalar.item();
  return MakeNode(Op::kMulScalar,
                  Map(a.value(), [s](double v) { return v * s; }), {a, scalar},
                  [](const Expr& self, const Expr& g) {
                    const Expr& a = self.parents()[0];
                    const Expr& s = self.parents()[1];
                    std::vector<Expr> grads(2);
                    if (Needs(self, 0)) grads[0] = MulScalar(g, s);
                    if (Needs(self, 1)) grads[1] = Sum(Mul(g, a));
                    return grads;
                  });
}

Expr AddConst(const Expr& a, double c) {
  return AddScalar(a, Expr::Constant(Tensor::Scalar(c)));
}

Expr AddRowBias(const Expr& matrix, const Expr& bias) {
  CheckDefined(matrix, "add_row_bias");
  CheckDefined(bias, "add_row_bias");
  const Tensor& m = matrix.value();
  const Tensor& b = bias.value();
  if (m.rank() != 2 || b.rank() != 1 || b.size() != m.shape()[1]) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("add_row_bias: shape mismatch {} vs {}",
                     ShapeToString(m.shape()), ShapeToString(b.shape())));
  }
  const std::size_t rows = m.shape()[0];
  const std::size_t cols = m.shape()[1];
  std::vector<double> out(m.vec());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += b[j];
  return MakeNode(Op::kAddRowBias, Tensor::Matrix(rows, cols, std::move(out)),
                  {matrix, bias}, [rows](const Expr& self, const Expr& g) {
                    std::vector<Expr> grads(2);
                    grads[0] = g;
                    if (Needs(self, 1)) grads[1] = MatMulTransA(g, Ones({rows}));
                    return grads;
                  });
}

Expr MulConst(const Expr& a, const Tensor& factor) {
  CheckDefined(a, "mul_const");
  if (a.shape() != factor.shape()) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("mul_const: shape mismatch {} vs {}",
                     ShapeToString(a.shape()), ShapeToString(factor.shape())));
  }
  return MakeNode(Op::kMulConst, Zip(a.value(), factor, std::multiplies<>()),
                  {a}, [factor](const Expr&, const Expr& g) {
                    return std::vector<Expr>{MulConst(g, factor)};
                  });
}

// --- Reductions -------------------------------------------------------------

Expr Sum(const Expr& a) {
  CheckDefined(a, "sum");
  const auto& v = a.value().vec();
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  Shape shape = a.shape();
  return MakeNode(Op::kSum, Tensor::Scalar(total), {a},
                  [shape](const Expr&, const Expr& g) {
                    return std::vector<Expr>{Expand(g, shape)};
                  });
}

Expr Mean(const Expr& a) {
  CheckDefined(a, "mean");
  const std::size_t n = a.value().size();
  if (n == 0) Fail(ErrorCode::kShapeMismatch, "mean: empty tensor");
  return Scale(Sum(a), 1.0 / static_cast<double>(n));
}

Expr Expand(const Expr& scalar, const Shape& shape) {
  CheckRank0(scalar, "expand");
  return MakeNode(Op::kExpand, Tensor::Filled(shape, scalar.item()), {scalar},
                  [](const Expr&, const Expr& g) {
                    return std::vector<Expr>{Sum(g)};
                  });
}

// --- Elementwise unary ------------------------------------------------------

Expr Square(const Expr& a) {
  CheckDefined(a, "square");
  return MakeNode(Op::kSquare, Map(a.value(), [](double v) { return v * v; }),
                  {a}, [](const Expr& self, const Expr& g) {
                    return std::vector<Expr>{
                        Mul(g, Scale(self.parents()[0], 2.0))};
                  });
}

Expr Sqrt(const Expr& a) {
  CheckDefined(a, "sqrt");
  return MakeNode(
      Op::kSqrt, Map(a.value(), [](double v) { return std::sqrt(v); }), {a},
      [](const Expr& self, const Expr& g) {
        // 0.5 / sqrt(x), with the derivative at exactly 0 taken as 0.
        const Tensor& y = self.value();
        const Tensor half_mask = Map(y, [](double v) { return v > 0 ? 0.5 : 0.0; });
        const Tensor pad = Map(y, [](double v) { return v > 0 ? 0.0 : 1.0; });
        return std::vector<Expr>{
            Div(MulConst(g, half_mask), Add(self, Expr::Constant(pad)))};
      });
}

Expr Abs(const Expr& a) {
  CheckDefined(a, "abs");
  return MakeNode(Op::kAbs, Map(a.value(), [](double v) { return std::abs(v); }),
                  {a}, [](const Expr& self, const Expr& g) {
                    const Tensor sign = Map(self.parents()[0].value(), [](double v) {
                      return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
                    });
                    return std::vector<Expr>{MulConst(g, sign)};
                  });
}

Expr Exp(const Expr& a) {
  CheckDefined(a, "exp");
  return MakeNode(Op::kExp, Map(a.value(), [](double v) { return std::exp(v); }),
                  {a}, [](const Expr& self, const Expr& g) {
                    return std::vector<Expr>{Mul(g, self)};
                  });
}

Expr Log(const Expr& a) {
  CheckDefined(a, "log");
  return MakeNode(Op::kLog, Map(a.value(), [](double v) { return std::log(v); }),
                  {a}, [](const Expr& self, const Expr& g) {
                    return std::vector<Expr>{Div(g, self.parents()[0])};
                  });
}

Expr Sigmoid(const Expr& a) {
  CheckDefined(a, "sigmoid");
  return MakeNode(Op::kSigmoid, Map(a.value(), StableSigmoid), {a},
                  [](const Expr& self, const Expr& g) {
                    // s' = s - s^2
                    return std::vector<Expr>{Mul(g, Sub(self, Square(self)))};
                  });
}

Expr Tanh(const Expr& a) {
  CheckDefined(a, "tanh");
  return MakeNode(Op::kTanh, Map(a.value(), [](double v) { return std::tanh(v); }),
                  {a}, [](const Expr& self, const Expr& g) {
                    return std::vector<Expr>{Sub(g, Mul(g, Square(self)))};
                  });
}

Expr Relu(const Expr& a) {
  CheckDefined(a, "relu");
  return MakeNode(Op::kRelu,
                  Map(a.value(), [](double v) { return v > 0 ? v : 0.0; }), {a},
                  [](const Expr& self, const Expr& g) {
                    const Tensor mask = Map(self.parents()[0].value(), [](double v) {
                      return v > 0 ? 1.0 : 0.0;
                    });
                    return std::vector<Expr>{MulConst(g, mask)};
                  });
}

Expr L2NormSquared(const Expr& a) { return Sum(Square(a)); }

Expr BceWithLogits(const Expr& logits, const Tensor& labels) {
  CheckDefined(logits, "bce_with_logits");
  if (logits.shape() != labels.shape()) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("bce_with_logits: shape mismatch {} vs {}",
                     ShapeToString(logits.shape()),
                     ShapeToString(labels.shape())));
  }
  Tensor value = Zip(logits.value(), labels, [](double z, double y) {
    return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  });
  return MakeNode(Op::kBceWithLogits, std::move(value), {logits},
                  [labels](const Expr& self, const Expr& g) {
                    return std::vector<Expr>{Mul(
                        g, Sub(Sigmoid(self.parents()[0]), Expr::Constant(labels)))};
                  });
}

Expr RowSquaredNorms(const Expr& matrix) {
  CheckDefined(matrix, "row_squared_norms");
  if (matrix.value().rank() != 2) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("row_squared_norms: expected matrix, got {}",
                     ShapeToString(matrix.shape())));
  }
  return MatMul(Square(matrix), Ones({matrix.shape()[1]}));
}

// --- Reverse pass -----------------------------------------------------------

std::vector<Expr> Grad(const Expr& output, const std::vector<Expr>& wrt,
                       bool build_graph) {
  CheckDefined(output, "grad");
  if (output.value().size() != 1) {
    Fail(ErrorCode::kShapeMismatch,
         fmt::format("grad: output must be scalar, got shape {}",
                     ShapeToString(output.shape())));
  }

  // Post-order over the differentiable part of the graph.
  std::vector<Expr> order;
  std::unordered_set<const void*> visited;
  if (output.requires_grad()) {
    std::vector<std::pair<Expr, std::size_t>> stack;
    stack.emplace_back(output, 0);
    visited.insert(output.id());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      const auto& parents = node.parents();
      if (next < parents.size()) {
        const Expr parent = parents[next++];
        if (parent.requires_grad() && visited.insert(parent.id()).second) {
          stack.emplace_back(parent, 0);
        }
        continue;
      }
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (std::size_t i = 0; i < wrt.size(); ++i) {
    if (!wrt[i].requires_grad()) {
      Fail(ErrorCode::kInvalidArgument,
           fmt::format("grad: wrt[{}] does not require grad", i));
    }
    if (!visited.contains(wrt[i].id())) {
      Fail(ErrorCode::kInvalidArgument,
           fmt::format("grad: wrt[{}] is not reachable from the output", i));
    }
  }

  GradModeGuard mode(build_graph);
  std::unordered_map<const void*, Expr> grads;
  grads.emplace(output.id(), Ones(output.shape()));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Expr& node = *it;
    if (node.op() == Op::kLeaf) continue;
    auto found = grads.find(node.id());
    if (found == grads.end()) continue;
    const Expr upstream = found->second;
    const auto& node_impl = internal::Access::Get(node);
    std::vector<Expr> parent_grads = node_impl.backward(node, upstream);
    const auto& parents = node.parents();
    for (std::size_t i = 0; i < parents.size(); ++i) {
      if (!parents[i].requires_grad() || !parent_grads[i].defined()) continue;
      auto [slot, inserted] = grads.try_emplace(parents[i].id(), parent_grads[i]);
      if (!inserted) slot->second = Add(slot->second, parent_grads[i]);
    }
  }

  std::vector<Expr> result;
  result.reserve(wrt.size());
  for (const Expr& w : wrt) result.push_back(grads.at(w.id()));
  return result;
}

}  // namespace cfreg::ndgraph
