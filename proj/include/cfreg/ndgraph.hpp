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

// Dense float64 arrays and a taped reverse-mode autodiff whose backward pass
// is built from the same differentiable ops, so gradients can themselves be
// differentiated (gradient-of-gradient).
//
// Shapes are rank 0 (scalar), rank 1 (vector) or rank 2 (row-major matrix).
// There is no implicit broadcasting. The only mixed-shape ops are the explicit
// MatMul (matrix x matrix, matrix x vector), AddScalar / MulScalar
// (tensor with a rank-0 Expr) and AddRowBias (matrix rows + vector).
//
// A graph is confined to one thread. Tensors are immutable and may be shared.

#ifndef CFREG_NDGRAPH_HPP_
#define CFREG_NDGRAPH_HPP_

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cfreg::ndgraph {

using Shape = std::vector<std::size_t>;

std::string ShapeToString(const Shape& shape);

class Tensor {
 public:
  // Rank-0 zero.
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor Scalar(double value);
  static Tensor Vector(std::vector<double> values);
  static Tensor Matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values);
  static Tensor Filled(Shape shape, double value);
  static Tensor Zeros(Shape shape) { return Filled(std::move(shape), 0.0); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_->size(); }
  std::span<const double> data() const { return *data_; }
  const std::vector<double>& vec() const { return *data_; }

  double operator[](std::size_t i) const { return (*data_)[i]; }
  // Matrix element; rank must be 2.
  double at(std::size_t row, std::size_t col) const {
    return (*data_)[row * shape_[1] + col];
  }
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  // Value of a single-element tensor.
  double item() const;

  bool AllFinite() const;

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
};

enum class Op {
  kLeaf,
  kMatMul,
  kTranspose,
  kOuter,
  kReshape,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kScale,
  kAddScalar,
  kMulScalar,
  kAddRowBias,
  kMulConst,
  kSum,
  kExpand,
  kSquare,
  kSqrt,
  kAbs,
  kExp,
  kLog,
  kSigmoid,
  kTanh,
  kRelu,
  kBceWithLogits,
};

const char* OpName(Op op);

class Expr;

namespace internal {
struct Node;
struct Access;
}  // namespace internal

class Expr {
 public:
  Expr() = default;

  // Non-differentiable leaf.
  static Expr Constant(Tensor value);
  // Differentiable leaf (requires_grad = true).
  static Expr Variable(Tensor value);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
  Op op() const;
  bool requires_grad() const;
  const std::vector<Expr>& parents() const;

  // Identity of the underlying graph node.
  const void* id() const { return node_.get(); }

 private:
  friend struct internal::Access;
  explicit Expr(std::shared_ptr<internal::Node> node)
      : node_(std::move(node)) {}
  std::shared_ptr<internal::Node> node_;
};

// Thread-local switch controlling whether ops record graph nodes. While
// disabled, every op returns a constant.
bool GradModeEnabled();

// Sets grad mode for the guard's lifetime.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

// --- Forward ops. All are evaluated eagerly. --------------------------------

Expr MatMul(const Expr& a, const Expr& b);
Expr Transpose(const Expr& a);
Expr Outer(const Expr& a, const Expr& b);
// Same data, new shape with the same element count.
Expr Reshape(const Expr& a, const Shape& shape);

Expr Add(const Expr& a, const Expr& b);
Expr Sub(const Expr& a, const Expr& b);
Expr Mul(const Expr& a, const Expr& b);
Expr Div(const Expr& a, const Expr& b);
Expr Neg(const Expr& a);
Expr Scale(const Expr& a, double factor);
// `scalar` must be rank 0.
Expr AddScalar(const Expr& a, const Expr& scalar);
Expr MulScalar(const Expr& a, const Expr& scalar);
Expr AddConst(const Expr& a, double c);
// Adds `bias` (length cols) to every row of `matrix`.
Expr AddRowBias(const Expr& matrix, const Expr& bias);
// Elementwise product with a constant tensor of the same shape.
Expr MulConst(const Expr& a, const Tensor& factor);

Expr Sum(const Expr& a);
Expr Mean(const Expr& a);
// Rank-0 `scalar` repeated over `shape`.
Expr Expand(const Expr& scalar, const Shape& shape);

Expr Square(const Expr& a);
Expr Sqrt(const Expr& a);
Expr Abs(const Expr& a);
Expr Exp(const Expr& a);
Expr Log(const Expr& a);
Expr Sigmoid(const Expr& a);
Expr Tanh(const Expr& a);
// Derivative at exactly 0 is taken as 0.
Expr Relu(const Expr& a);
Expr L2NormSquared(const Expr& a);
// Elementwise, numerically stable: max(z,0) - z*y + log(1 + exp(-|z|)).
Expr BceWithLogits(const Expr& logits, const Tensor& labels);

// Row-wise sum of squares: (rows x cols) -> (rows).
Expr RowSquaredNorms(const Expr& matrix);

// Gradients of a scalar `output` with respect to each `wrt` entry. With
// `build_graph` the returned Exprs are part of a new differentiable graph and
// can be passed back into Grad.
std::vector<Expr> Grad(const Expr& output, const std::vector<Expr>& wrt,
                       bool build_graph = false);

}  // namespace cfreg::ndgraph

#endif  // CFREG_NDGRAPH_HPP_
