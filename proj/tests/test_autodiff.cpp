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

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "metaloss/autodiff.hpp"
#include "metaloss/gradcheck.hpp"
#include "op_cases.hpp"

using namespace metaloss;

TEST(Tensor, RejectsNonFinite) {
  EXPECT_THROW(Tensor::vector({1.0, std::nan("")}), NonFiniteError);
  EXPECT_THROW(Tensor::vector({std::numeric_limits<double>::infinity()}),
               NonFiniteError);
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
}

TEST(Ops, ClosedFormValues) {
  EXPECT_NEAR(softplus(constant(0.0)).value().item(), std::log(2.0), 1e-15);
  EXPECT_EQ(relu(constant(-3.0)).value().item(), 0.0);
  EXPECT_EQ(relu(constant(3.0)).value().item(), 3.0);
  // Stable form: no overflow for large arguments.
  EXPECT_EQ(softplus(constant(1000.0)).value().item(), 1000.0);
  EXPECT_GT(softplus(constant(-1000.0)).value().item(), -1e-300);
}

TEST(Ops, MatmulShapeErrorNamesBothShapes) {
  const Var a = constant(Tensor::zeros({2, 3}));
  const Var b = constant(Tensor::zeros({4, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4, 2]"), std::string::npos) << msg;
  }
}

TEST(Ops, ElementwiseShapeMismatch) {
  const Var a = constant(Tensor::zeros({2, 3}));
  const Var b = constant(Tensor::zeros({3, 2}));
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(mul(a, b), ShapeError);
  // Scalar operands are the one allowed broadcast.
  EXPECT_NO_THROW(mul(a, constant(2.0)));
}

TEST(Backward, SquareAtThree) {
  const Var x = parameter(Tensor::scalar(3.0));
  EXPECT_DOUBLE_EQ(backward(square(x), {x})[0].value().item(), 6.0);
}

TEST(Backward, SecondDerivativeOfCube) {
  const Var x = parameter(Tensor::scalar(2.0));
  const Var y = x * x * x;
  const Var dy = backward(y, {x}, true)[0];
  EXPECT_DOUBLE_EQ(dy.value().item(), 12.0);
  const Var d2y = backward(dy, {x})[0];
  EXPECT_DOUBLE_EQ(d2y.value().item(), 12.0);
}

TEST(Backward, MeanOfSquaresMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const Tensor x = op_cases::random_tensor({4}, rng, false);
  const double err = gradient_error(
      [](const std::vector<Var>& v) { return mean(square(v[0])); }, {x});
  EXPECT_LT(err, 1e-6);
}

TEST(Backward, UnconnectedLeafHasExactlyZeroGradient) {
  const Var x = parameter(Tensor::vector({1.0, 2.0}));
  const Var unused = parameter(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  const auto g = backward(sum(square(x)), {x, unused});
  EXPECT_EQ(g[1].value(), Tensor::zeros({2, 2}));
}

TEST(Backward, Errors) {
  const Var x = parameter(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(backward(square(x), {x}), std::invalid_argument);
  const Var c = constant(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(backward(sum(x * c), {c}), std::invalid_argument);
}

TEST(Backward, NoGradModeRecordsNothing) {
  const Var x = parameter(Tensor::scalar(2.0));
  NoGradGuard guard;
  const Var y = square(x);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->parents.empty());
}

TEST(Backward, WithoutCreateGraphResultIsDetached) {
  const Var x = parameter(Tensor::scalar(2.0));
  const Var g = backward(x * x * x, {x})[0];
  EXPECT_FALSE(g.requires_grad());
}

TEST(Backward, GradientsAccumulateOverSharedSubgraphs) {
  const Var x = parameter(Tensor::scalar(1.5));
  const Var y = sin(x);
  const Var z = y * y + y;  // (sin x)^2 + sin x
  const double expect = 2.0 * std::sin(1.5) * std::cos(1.5) + std::cos(1.5);
  EXPECT_NEAR(backward(z, {x})[0].value().item(), expect, 1e-15);
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalOutputs) {
  auto run = [] {
    std::mt19937_64 rng(3);
    const Var a = parameter(op_cases::random_tensor({5, 4}, rng, false));
    const Var b = parameter(op_cases::random_tensor({4, 3}, rng, false));
    const Var loss = mean(softplus(matmul(a, b)));
    const auto g = backward(loss, {a, b}, true);
    const auto h = backward(sum(square(g[0])), {b});
    return std::make_tuple(loss.value(), g[0].value(), h[0].value());
  };
  EXPECT_EQ(run(), run());
}

class PrimitiveOp : public ::testing::TestWithParam<op_cases::OpCase> {};

TEST_P(PrimitiveOp, FirstOrderMatchesFiniteDifferencesAt100Points) {
  const auto& c = GetParam();
  std::mt19937_64 rng(1234);
  double worst = 0.0;
  for (int point = 0; point < 100; ++point) {
    const auto inputs = c.sample(rng);
    worst = std::max(worst, gradient_error(op_cases::objective(c, inputs, rng), inputs));
  }
  EXPECT_LT(worst, 1e-6) << c.name;
}

TEST_P(PrimitiveOp, SecondOrderMatchesFiniteDifferences) {
  const auto& c = GetParam();
  std::mt19937_64 rng(4321);
  double worst = 0.0;
  for (int point = 0; point < 20; ++point) {
    const auto inputs = c.sample(rng);
    std::vector<Tensor> dirs;
    for (const Tensor& t : inputs) dirs.push_back(op_cases::random_tensor(t.shape(), rng, false));
    worst = std::max(worst, second_order_error(op_cases::objective(c, inputs, rng),
                                               inputs, dirs));
  }
  EXPECT_LT(worst, 1e-4) << c.name;
}

INSTANTIATE_TEST_SUITE_P(All, PrimitiveOp, ::testing::ValuesIn(op_cases::all()),
                         [](const auto& info) { return info.param.name; });
