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

#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace metaloss {

using Shape = std::vector<std::size_t>;

/// Thrown when operands have incompatible shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a NaN or Inf would enter a tensor.
class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Dense row-major array of finite doubles. Rank 0 is a scalar.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor: shape " + to_string(shape_) + " needs " +
                       std::to_string(shape_size(shape_)) + " values, got " +
                       std::to_string(data_.size()));
    }
    // All-ones exponent marks NaN or Inf. Integer OR-reduction vectorizes.
    constexpr std::uint64_t kExponent = 0x7ff0000000000000ULL;
    std::uint64_t bad = 0;
    for (double v : data_) {
      bad |= static_cast<std::uint64_t>(
          (std::bit_cast<std::uint64_t>(v) & kExponent) == kExponent);
    }
    if (bad) report_non_finite();
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor filled(Shape shape, double v) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor zeros(Shape shape) { return filled(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return filled(std::move(shape), 1.0); }
  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw ShapeError("tensor: axis " + std::to_string(axis) +
                       " out of range for shape " + to_string(shape_));
    }
    return shape_[axis];
  }

  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double item() const {
    if (data_.size() != 1) {
      throw ShapeError("tensor: item() on shape " + to_string(shape_));
    }
    return data_[0];
  }
  double operator[](std::size_t i) const { return data_.at(i); }
  double operator()(std::size_t r, std::size_t c) const {
    return data_.at(r * cols() + c);
  }

  bool operator==(const Tensor&) const = default;

 private:
  [[noreturn]] void report_non_finite() const {
    std::size_t i = 0;
    while (i < data_.size() && std::isfinite(data_[i])) ++i;
    throw NonFiniteError("tensor: non-finite value at flat index " +
                         std::to_string(i) + " of shape " + to_string(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

}  // namespace metaloss
