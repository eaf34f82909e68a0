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

// Table of primitive ops for finite-difference sweeps. Shared by the unit
// tests and the acceptance runner.

#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "metaloss/autodiff.hpp"

namespace op_cases {

using metaloss::Shape;
using metaloss::Tensor;
using metaloss::Var;

// Uniform in [-2, 2]; with `away_from_zero` the magnitude is at least 0.05 so
// that a step of 1e-5 never crosses the relu kink.
inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng,
                            bool away_from_zero) {
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::vector<double> v(metaloss::shape_size(shape));
  for (double& x : v) {
    x = u(rng);
    if (away_from_zero && std::abs(x) < 0.05) x = x < 0 ? x - 0.05 : x + 0.05;
  }
  return Tensor(shape, std::move(v));
}

struct OpCase {
  std::string name;
  std::vector<Shape> shapes;
  bool kink = false;
  std::function<Var(const std::vector<Var>&)> fn;

  std::vector<Tensor> sample(std::mt19937_64& rng) const {
    std::vector<Tensor> out;
    for (const Shape& s : shapes) out.push_back(random_tensor(s, rng, kink));
    return out;
  }
};

// sum(W * y) + 0.5 sum(y^2) with y = op(x) and a random W; the quadratic term
// gives every op a nonzero second derivative.
inline std::function<Var(const std::vector<Var>&)> objective(
    const OpCase& c, const std::vector<Tensor>& inputs, std::mt19937_64& rng) {
  Shape out_shape;
  {
    metaloss::NoGradGuard guard;
    std::vector<Var> v;
    for (const Tensor& t : inputs) v.push_back(metaloss::constant(t));
    out_shape = c.fn(v).shape();
  }
  const Var w = metaloss::constant(random_tensor(out_shape, rng, false));
  auto fn = c.fn;
  return [fn, w](const std::vector<Var>& x) {
    const Var y = fn(x);
    return metaloss::sum(w * y) + metaloss::scalar_mul(metaloss::sum(metaloss::square(y)), 0.5);
  };
}

inline std::vector<OpCase> all() {
  using namespace metaloss;
  using V = const std::vector<Var>&;
  return {
      {"add", {{3, 4}, {3, 4}}, false, [](V x) { return add(x[0], x[1]); }},
      {"add_scalar", {{3, 4}, {}}, false, [](V x) { return add(x[0], x[1]); }},
      {"sub", {{3, 4}, {3, 4}}, false, [](V x) { return sub(x[0], x[1]); }},
      {"sub_scalar", {{}, {2, 3}}, false, [](V x) { return sub(x[0], x[1]); }},
      {"mul", {{3, 4}, {3, 4}}, false, [](V x) { return mul(x[0], x[1]); }},
      {"mul_scalar", {{3, 4}, {}}, false, [](V x) { return mul(x[0], x[1]); }},
      {"matmul", {{3, 4}, {4, 2}}, false, [](V x) { return matmul(x[0], x[1]); }},
      {"matmul_ta", {{4, 3}, {4, 2}}, false,
       [](V x) { return matmul(x[0], x[1], true, false); }},
      {"matmul_tb", {{3, 4}, {2, 4}}, false,
       [](V x) { return matmul(x[0], x[1], false, true); }},
      {"matmul_tatb", {{4, 3}, {2, 4}}, false,
       [](V x) { return matmul(x[0], x[1], true, true); }},
      {"transpose", {{3, 4}}, false, [](V x) { return transpose(x[0]); }},
      {"reshape", {{3, 4}}, false, [](V x) { return reshape(x[0], {2, 6}); }},
      {"sum", {{3, 4}}, false, [](V x) { return sum(x[0]); }},
      {"mean", {{3, 4}}, false, [](V x) { return mean(x[0]); }},
      {"square", {{3, 4}}, false, [](V x) { return square(x[0]); }},
      {"relu", {{3, 4}}, true, [](V x) { return relu(x[0]); }},
      {"softplus", {{3, 4}}, false, [](V x) { return softplus(x[0]); }},
      {"sigmoid", {{3, 4}}, false, [](V x) { return sigmoid(x[0]); }},
      {"tanh", {{3, 4}}, false, [](V x) { return metaloss::tanh(x[0]); }},
      {"sin", {{3, 4}}, false, [](V x) { return metaloss::sin(x[0]); }},
      {"cos", {{3, 4}}, false, [](V x) { return metaloss::cos(x[0]); }},
      {"scalar_mul", {{3, 4}}, false, [](V x) { return scalar_mul(x[0], -2.5); }},
      {"concat_rows", {{2, 3}, {4, 3}}, false,
       [](V x) { return concat({x[0], x[1]}, 0); }},
      {"concat_cols", {{3, 2}, {3, 1}}, false,
       [](V x) { return concat({x[0], x[1]}, 1); }},
      {"concat_vec", {{2}, {3}}, false, [](V x) { return concat({x[0], x[1]}, 0); }},
      {"slice_rows", {{5, 3}}, false, [](V x) { return slice(x[0], 0, 1, 4); }},
      {"slice_cols", {{3, 5}}, false, [](V x) { return slice(x[0], 1, 2, 5); }},
      {"slice_vec", {{6}}, false, [](V x) { return slice(x[0], 0, 1, 3); }},
      {"add_rowwise", {{5, 3}, {1, 3}}, false,
       [](V x) { return add_rowwise(x[0], x[1]); }},
      {"sum_rows", {{5, 3}}, false, [](V x) { return sum_rows(x[0]); }},
      {"repeat_rows", {{1, 3}}, false, [](V x) { return repeat_rows(x[0], 4); }},
      {"mlp_composite", {{4, 3}, {3, 5}, {1, 5}}, false,
       [](V x) {
         return softplus(add_rowwise(matmul(metaloss::tanh(x[0]), x[1]), x[2]));
       }},
  };
}

}  // namespace op_cases
