/*
 * Copyright 2026 The metaloss Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Reverse-mode automatic differentiation over dense tensors.
//
// Every primitive records its parents, and the backward pass is built from
// the same primitives. With create_graph set, the returned gradients are
// ordinary graph nodes and can be differentiated again, which is what a
// gradient-through-an-SGD-step needs.

#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "metaloss/tensor.hpp"

namespace metaloss {

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  matmul,
  transpose,
  reshape,
  sum,
  mean,
  square,
  relu,
  softplus,
  sigmoid,
  tanh,
  sin,
  cos,
  concat,
  slice,
  scalar_mul,
  add_rowwise,
  sum_rows,
  repeat_rows,
  relu_mask,
};

inline const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::reshape: return "reshape";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::square: return "square";
    case OpKind::relu: return "relu";
    case OpKind::softplus: return "softplus";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::tanh: return "tanh";
    case OpKind::sin: return "sin";
    case OpKind::cos: return "cos";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::scalar_mul: return "scalar_mul";
    case OpKind::add_rowwise: return "add_rowwise";
    case OpKind::sum_rows: return "sum_rows";
    case OpKind::repeat_rows: return "repeat_rows";
    case OpKind::relu_mask: return "relu_mask";
  }
  return "?";
}

namespace detail {
struct Node;
}

/// Handle to an immutable node of a computation graph.
class Var {
 public:
  explicit Var(std::shared_ptr<const detail::Node> node)
      : node_(std::move(node)) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  OpKind op() const;
  const detail::Node* id() const noexcept { return node_.get(); }
  const std::shared_ptr<const detail::Node>& node() const noexcept {
    return node_;
  }

 private:
  std::shared_ptr<const detail::Node> node_;
};

namespace detail {

struct Node {
  Tensor value;
  OpKind op = OpKind::leaf;
  std::vector<Var> parents;
  bool requires_grad = false;
  // Op attributes.
  double factor = 0.0;           // scalar_mul
  std::size_t axis = 0;          // concat, slice
  std::size_t begin = 0;         // slice
  std::size_t end = 0;           // slice
  bool transpose_a = false;      // matmul
  bool transpose_b = false;      // matmul
  std::shared_ptr<const Node> gate;  // relu_mask: pre-activation, not a parent
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline const Tensor& Var::value() const { return node_->value; }
inline bool Var::requires_grad() const { return node_->requires_grad; }
inline OpKind Var::op() const { return node_->op; }

/// While alive, new nodes record no parents and never require grad.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class EnableGradGuard {
 public:
  EnableGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = true; }
  ~EnableGradGuard() { detail::grad_mode() = previous_; }
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

inline Var parameter(Tensor value) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

inline Var constant(Tensor value) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

inline Var constant(double v) { return constant(Tensor::scalar(v)); }

/// Detached copy: same value, no history.
inline Var detach(const Var& v) { return constant(v.value()); }

namespace detail {

inline Var make(Tensor value, OpKind op, std::vector<Var> parents,
                Node attrs = {}) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  node->factor = attrs.factor;
  node->axis = attrs.axis;
  node->begin = attrs.begin;
  node->end = attrs.end;
  node->transpose_a = attrs.transpose_a;
  node->transpose_b = attrs.transpose_b;
  node->gate = std::move(attrs.gate);
  const bool needs = grad_mode() &&
                     std::any_of(parents.begin(), parents.end(),
                                 [](const Var& p) { return p.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
  }
  return Var(std::move(node));
}

template <typename F>
Tensor map_values(const Tensor& a, F f) {
  std::vector<double> out(a.size());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return Tensor(a.shape(), std::move(out));
}

inline bool is_scalar(const Tensor& t) { return t.rank() == 0; }

// Elementwise binary op. Equal shapes, or one operand a rank-0 scalar.
template <typename F>
Tensor zip_values(const char* name, const Tensor& a, const Tensor& b, F f) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.size());
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
    return Tensor(a.shape(), std::move(out));
  }
  if (is_scalar(a)) {
    const double s = a.item();
    return map_values(b, [&](double y) { return f(s, y); });
  }
  if (is_scalar(b)) {
    const double s = b.item();
    return map_values(a, [&](double x) { return f(x, s); });
  }
  throw ShapeError(std::string(name) + ": incompatible shapes " +
                   to_string(a.shape()) + " and " + to_string(b.shape()));
}

inline double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

using RowMajor =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require_rank(const char* name, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(name) + ": expected rank " +
                     std::to_string(rank) + ", got shape " +
                     to_string(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  return detail::make(detail::zip_values("add", a.value(), b.value(),
                                         [](double x, double y) { return x + y; }),
                      OpKind::add, {a, b});
}

inline Var sub(const Var& a, const Var& b) {
  return detail::make(detail::zip_values("sub", a.value(), b.value(),
                                         [](double x, double y) { return x - y; }),
                      OpKind::sub, {a, b});
}

inline Var mul(const Var& a, const Var& b) {
  return detail::make(detail::zip_values("mul", a.value(), b.value(),
                                         [](double x, double y) { return x * y; }),
                      OpKind::mul, {a, b});
}

/// op(a) * op(b), where op transposes when the matching flag is set.
inline Var matmul(const Var& a, const Var& b, bool transpose_a = false,
                  bool transpose_b = false) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2) {
    throw ShapeError("matmul: incompatible shapes " + to_string(x.shape()) +
                     " and " + to_string(y.shape()));
  }
  const std::size_t n = transpose_a ? x.cols() : x.rows();
  const std::size_t k = transpose_a ? x.rows() : x.cols();
  const std::size_t k2 = transpose_b ? y.cols() : y.rows();
  const std::size_t m = transpose_b ? y.rows() : y.cols();
  if (k != k2) {
    throw ShapeError("matmul: incompatible shapes " + to_string(x.shape()) +
                     (transpose_a ? "^T" : "") + " and " + to_string(y.shape()) +
                     (transpose_b ? "^T" : ""));
  }
  using Index = Eigen::Index;
  std::vector<double> out(n * m);
  Eigen::Map<const detail::RowMajor> ex(x.data().data(),
                                        static_cast<Index>(x.rows()),
                                        static_cast<Index>(x.cols()));
  Eigen::Map<const detail::RowMajor> ey(y.data().data(),
                                        static_cast<Index>(y.rows()),
                                        static_cast<Index>(y.cols()));
  Eigen::Map<detail::RowMajor> eo(out.data(), static_cast<Index>(n),
                                  static_cast<Index>(m));
  if (!transpose_a && !transpose_b) {
    eo.noalias() = ex * ey;
  } else if (transpose_a && !transpose_b) {
    eo.noalias() = ex.transpose() * ey;
  } else if (!transpose_a) {
    eo.noalias() = ex * ey.transpose();
  } else {
    eo.noalias() = ex.transpose() * ey.transpose();
  }
  detail::Node attrs;
  attrs.transpose_a = transpose_a;
  attrs.transpose_b = transpose_b;
  return detail::make(Tensor({n, m}, std::move(out)), OpKind::matmul, {a, b},
                      attrs);
}

inline Var transpose(const Var& a) {
  const Tensor& x = a.value();
  detail::require_rank("transpose", x, 2);
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  std::vector<double> out(x.size());
  const auto in = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
  }
  return detail::make(Tensor({c, r}, std::move(out)), OpKind::transpose, {a});
}

inline Var reshape(const Var& a, Shape shape) {
  if (shape_size(shape) != a.value().size()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " +
                     to_string(shape));
  }
  return detail::make(Tensor(std::move(shape), a.value().values()),
                      OpKind::reshape, {a});
}

inline Var sum(const Var& a) {
  const auto d = a.value().data();
  double s = 0.0;
  for (double v : d) s += v;
  return detail::make(Tensor::scalar(s), OpKind::sum, {a});
}

inline Var mean(const Var& a) {
  const auto d = a.value().data();
  double s = 0.0;
  for (double v : d) s += v;
  return detail::make(Tensor::scalar(s / static_cast<double>(d.size())),
                      OpKind::mean, {a});
}

inline Var square(const Var& a) {
  return detail::make(detail::map_values(a.value(), [](double x) { return x * x; }),
                      OpKind::square, {a});
}

inline Var relu(const Var& a) {
  return detail::make(
      detail::map_values(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }),
      OpKind::relu, {a});
}

inline Var softplus(const Var& a) {
  return detail::make(detail::map_values(a.value(), detail::stable_softplus),
                      OpKind::softplus, {a});
}

inline Var sigmoid(const Var& a) {
  return detail::make(detail::map_values(a.value(), detail::stable_sigmoid),
                      OpKind::sigmoid, {a});
}

inline Var tanh(const Var& a) {
  return detail::make(
      detail::map_values(a.value(), [](double x) { return std::tanh(x); }),
      OpKind::tanh, {a});
}

inline Var sin(const Var& a) {
  return detail::make(
      detail::map_values(a.value(), [](double x) { return std::sin(x); }),
      OpKind::sin, {a});
}

inline Var cos(const Var& a) {
  return detail::make(
      detail::map_values(a.value(), [](double x) { return std::cos(x); }),
      OpKind::cos, {a});
}

inline Var scalar_mul(const Var& a, double c) {
  detail::Node attrs;
  attrs.factor = c;
  return detail::make(
      detail::map_values(a.value(), [c](double x) { return c * x; }),
      OpKind::scalar_mul, {a}, attrs);
}

/// Concatenate rank-1 or rank-2 tensors along `axis`.
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (first.empty() || first.size() > 2 || axis >= first.size()) {
    throw ShapeError("concat: axis " + std::to_string(axis) +
                     " invalid for shape " + to_string(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) ok = false;
    }
    if (!ok) {
      throw ShapeError("concat: incompatible shapes " + to_string(first) +
                       " and " + to_string(s));
    }
    out_shape[axis] += s[axis];
  }
  std::vector<double> out;
  out.reserve(shape_size(out_shape));
  if (axis == 0) {
    for (const Var& p : parts) {
      const auto d = p.value().data();
      out.insert(out.end(), d.begin(), d.end());
    }
  } else {
    const std::size_t rows = first[0];
    for (std::size_t r = 0; r < rows; ++r) {
      for (const Var& p : parts) {
        const std::size_t c = p.shape()[1];
        const auto d = p.value().data().subspan(r * c, c);
        out.insert(out.end(), d.begin(), d.end());
      }
    }
  }
  detail::Node attrs;
  attrs.axis = axis;
  return detail::make(Tensor(std::move(out_shape), std::move(out)),
                      OpKind::concat, parts, attrs);
}

/// Half-open range [begin, end) along `axis` of a rank-1 or rank-2 tensor.
inline Var slice(const Var& a, std::size_t axis, std::size_t begin,
                 std::size_t end) {
  const Shape& s = a.shape();
  if (s.empty() || s.size() > 2 || axis >= s.size() || begin > end ||
      end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") on axis " + std::to_string(axis) +
                     " invalid for shape " + to_string(s));
  }
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  std::vector<double> out;
  out.reserve(shape_size(out_shape));
  const auto d = a.value().data();
  if (s.size() == 1) {
    out.assign(d.begin() + static_cast<std::ptrdiff_t>(begin),
               d.begin() + static_cast<std::ptrdiff_t>(end));
  } else if (axis == 0) {
    const std::size_t c = s[1];
    out.assign(d.begin() + static_cast<std::ptrdiff_t>(begin * c),
               d.begin() + static_cast<std::ptrdiff_t>(end * c));
  } else {
    const std::size_t c = s[1];
    for (std::size_t r = 0; r < s[0]; ++r) {
      const auto row = d.subspan(r * c + begin, end - begin);
      out.insert(out.end(), row.begin(), row.end());
    }
  }
  detail::Node attrs;
  attrs.axis = axis;
  attrs.begin = begin;
  attrs.end = end;
  return detail::make(Tensor(std::move(out_shape), std::move(out)),
                      OpKind::slice, {a}, attrs);
}

/// Adds the 1 x n `row` to every row of the m x n matrix `x`.
inline Var add_rowwise(const Var& x, const Var& row) {
  const Tensor& a = x.value();
  const Tensor& r = row.value();
  if (a.rank() != 2 || r.rank() != 2 || r.rows() != 1 || r.cols() != a.cols()) {
    throw ShapeError("add_rowwise: incompatible shapes " + to_string(a.shape()) +
                     " and " + to_string(r.shape()));
  }
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  std::vector<double> out(a.size());
  const auto d = a.data();
  const auto rd = r.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = d[i * n + j] + rd[j];
  }
  return detail::make(Tensor(a.shape(), std::move(out)), OpKind::add_rowwise,
                      {x, row});
}

/// Column sums of an m x n matrix, as a 1 x n row.
inline Var sum_rows(const Var& x) {
  const Tensor& a = x.value();
  detail::require_rank("sum_rows", a, 2);
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  std::vector<double> out(n, 0.0);
  const auto d = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j] += d[i * n + j];
  }
  return detail::make(Tensor({1, n}, std::move(out)), OpKind::sum_rows, {x});
}

/// Stacks `times` copies of a 1 x n row.
inline Var repeat_rows(const Var& row, std::size_t times) {
  const Tensor& r = row.value();
  if (r.rank() != 2 || r.rows() != 1) {
    throw ShapeError("repeat_rows: expected a 1 x n row, got " +
                     to_string(r.shape()));
  }
  std::vector<double> out;
  out.reserve(times * r.cols());
  for (std::size_t i = 0; i < times; ++i) {
    out.insert(out.end(), r.data().begin(), r.data().end());
  }
  return detail::make(Tensor({times, r.cols()}, std::move(out)),
                      OpKind::repeat_rows, {row});
}

/// g where `gate` > 0, else 0. Differentiable in g only; this is the relu
/// derivative, whose dependence on the gate is zero almost everywhere.
inline Var relu_mask(const Var& g, const Var& gate) {
  const Tensor& a = g.value();
  const Tensor& b = gate.value();
  if (a.shape() != b.shape()) {
    throw ShapeError("relu_mask: incompatible shapes " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  }
  std::vector<double> out(a.size());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = y[i] > 0.0 ? x[i] : 0.0;
  detail::Node attrs;
  attrs.gate = gate.node();
  return detail::make(Tensor(a.shape(), std::move(out)), OpKind::relu_mask, {g},
                      attrs);
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return scalar_mul(a, -1.0); }

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace detail {

// Gradient of a scalar-broadcast operand: the upstream gradient summed over
// the broadcast dimension.
inline Var reduce_to(const Var& grad, const Tensor& operand) {
  if (is_scalar(operand) && !is_scalar(grad.value())) return sum(grad);
  return grad;
}

inline Var zeros_like(const Shape& s) { return constant(Tensor::zeros(s)); }

// Vector-Jacobian products for each parent. Entries whose `needed` flag is
// false are left empty.
inline std::vector<std::optional<Var>> vjp(const Var& self, const Var& g,
                                           const std::vector<bool>& needed) {
  const Node& n = *self.node();
  const auto& p = n.parents;
  std::vector<std::optional<Var>> out(p.size());
  auto want = [&](std::size_t i) { return static_cast<bool>(needed[i]); };
  switch (n.op) {
    case OpKind::leaf:
      break;
    case OpKind::add:
      if (want(0)) out[0] = reduce_to(g, p[0].value());
      if (want(1)) out[1] = reduce_to(g, p[1].value());
      break;
    case OpKind::sub:
      if (want(0)) out[0] = reduce_to(g, p[0].value());
      if (want(1)) out[1] = reduce_to(-g, p[1].value());
      break;
    case OpKind::mul:
      if (want(0)) out[0] = reduce_to(mul(g, p[1]), p[0].value());
      if (want(1)) out[1] = reduce_to(mul(g, p[0]), p[1].value());
      break;
    case OpKind::matmul: {
      // C = op(A) op(B); the transposes are folded into the products.
      const bool ta = n.transpose_a;
      const bool tb = n.transpose_b;
      if (want(0)) out[0] = ta ? matmul(p[1], g, tb, true) : matmul(g, p[1], false, !tb);
      if (want(1)) out[1] = tb ? matmul(g, p[0], true, ta) : matmul(p[0], g, !ta, false);
      break;
    }
    case OpKind::transpose:
      out[0] = transpose(g);
      break;
    case OpKind::reshape:
      out[0] = reshape(g, p[0].shape());
      break;
    case OpKind::sum:
      out[0] = mul(g, constant(Tensor::ones(p[0].shape())));
      break;
    case OpKind::mean: {
      const double inv = 1.0 / static_cast<double>(p[0].value().size());
      out[0] = mul(g, constant(Tensor::filled(p[0].shape(), inv)));
      break;
    }
    case OpKind::square:
      out[0] = mul(g, scalar_mul(p[0], 2.0));
      break;
    case OpKind::relu:
      out[0] = relu_mask(g, p[0]);
      break;
    case OpKind::relu_mask:
      out[0] = relu_mask(g, Var(n.gate));
      break;
    case OpKind::add_rowwise:
      if (want(0)) out[0] = g;
      if (want(1)) out[1] = sum_rows(g);
      break;
    case OpKind::sum_rows:
      out[0] = repeat_rows(g, p[0].shape()[0]);
      break;
    case OpKind::repeat_rows:
      out[0] = sum_rows(g);
      break;
    case OpKind::softplus:
      out[0] = mul(g, sigmoid(p[0]));
      break;
    case OpKind::sigmoid:
      out[0] = mul(g, mul(self, sub(constant(1.0), self)));
      break;
    case OpKind::tanh:
      out[0] = mul(g, sub(constant(1.0), square(self)));
      break;
    case OpKind::sin:
      out[0] = mul(g, cos(p[0]));
      break;
    case OpKind::cos:
      out[0] = -mul(g, sin(p[0]));
      break;
    case OpKind::scalar_mul:
      out[0] = scalar_mul(g, n.factor);
      break;
    case OpKind::concat: {
      std::size_t offset = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const std::size_t len = p[i].shape()[n.axis];
        if (want(i)) out[i] = slice(g, n.axis, offset, offset + len);
        offset += len;
      }
      break;
    }
    case OpKind::slice: {
      const Shape& full = p[0].shape();
      std::vector<Var> pieces;
      if (n.begin > 0) {
        Shape s = full;
        s[n.axis] = n.begin;
        pieces.push_back(zeros_like(s));
      }
      pieces.push_back(g);
      if (n.end < full[n.axis]) {
        Shape s = full;
        s[n.axis] = full[n.axis] - n.end;
        pieces.push_back(zeros_like(s));
      }
      out[0] = pieces.size() == 1 ? g : concat(pieces, n.axis);
      break;
    }
  }
  return out;
}

}  // namespace detail

/// Gradients of the scalar `root` with respect to each node in `wrt`.
///
/// With `create_graph` the results are differentiable graph nodes; otherwise
/// they are detached constants. A `wrt` node that does not influence `root`
/// gets an exact zero gradient.
inline std::vector<Var> backward(const Var& root, std::span<const Var> wrt,
                                 bool create_graph = false) {
  if (root.value().rank() != 0) {
    throw ShapeError("backward: root must be a scalar, got shape " +
                     to_string(root.shape()));
  }
  for (const Var& w : wrt) {
    if (!w.requires_grad()) {
      throw std::invalid_argument(
          "backward: gradient requested for a node that does not require grad");
    }
  }

  std::unordered_set<const detail::Node*> targets;
  for (const Var& w : wrt) targets.insert(w.id());

  // Iterative post-order DFS. A node is kept only if some target is reachable
  // through its parents; everything else cannot contribute.
  std::vector<Var> order;
  std::unordered_map<const detail::Node*, bool> reaches;
  if (root.requires_grad()) {
    struct Frame {
      Var var;
      std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    reaches.emplace(root.id(), false);
    while (!stack.empty()) {
      Frame& top = stack.back();
      const auto& parents = top.var.node()->parents;
      if (top.next < parents.size()) {
        const Var& parent = parents[top.next++];
        if (parent.requires_grad() && !reaches.contains(parent.id())) {
          reaches.emplace(parent.id(), false);
          stack.push_back({parent, 0});
        }
        continue;
      }
      bool r = targets.contains(top.var.id());
      for (const Var& parent : parents) {
        auto it = reaches.find(parent.id());
        if (it != reaches.end() && it->second) r = true;
      }
      reaches[top.var.id()] = r;
      if (r) order.push_back(top.var);
      stack.pop_back();
    }
  }

  std::unordered_map<const detail::Node*, Var> grads;
  {
    std::unique_ptr<NoGradGuard> no_grad;
    std::unique_ptr<EnableGradGuard> with_grad;
    if (create_graph) {
      with_grad = std::make_unique<EnableGradGuard>();
    } else {
      no_grad = std::make_unique<NoGradGuard>();
    }

    if (!order.empty()) grads.emplace(root.id(), constant(1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const Var& self = *it;
      auto g_it = grads.find(self.id());
      if (g_it == grads.end()) continue;
      const auto& parents = self.node()->parents;
      if (parents.empty()) continue;
      const Var g = g_it->second;
      std::vector<bool> needed(parents.size());
      for (std::size_t i = 0; i < parents.size(); ++i) {
        auto r = reaches.find(parents[i].id());
        needed[i] = r != reaches.end() && r->second;
      }
      auto contributions = detail::vjp(self, g, needed);
      for (std::size_t i = 0; i < parents.size(); ++i) {
        if (!needed[i]) continue;
        const Var& c = *contributions[i];
        auto [slot, inserted] = grads.try_emplace(parents[i].id(), c);
        if (!inserted) slot->second = add(slot->second, c);
      }
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    auto it = grads.find(w.id());
    if (it == grads.end()) {
      out.push_back(constant(Tensor::zeros(w.shape())));
    } else if (create_graph) {
      out.push_back(it->second);
    } else {
      out.push_back(detach(it->second));
    }
  }
  return out;
}

inline std::vector<Var> backward(const Var& root, std::initializer_list<Var> wrt,
                                 bool create_graph = false) {
  const std::vector<Var> w(wrt);
  return backward(root, std::span<const Var>(w), create_graph);
}

}  // namespace metaloss
