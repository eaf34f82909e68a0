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

// Central finite-difference checks for graph functions.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "metaloss/autodiff.hpp"

namespace metaloss {

/// ||a - b|| / max(||a||, ||b||), with a small floor so that two vanishing
/// gradients compare as equal.
inline double relative_error(const std::vector<double>& a,
                             const std::vector<double>& b,
                             double floor = 1e-10) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

namespace detail {

template <class F>
double eval_scalar(F& f, const std::vector<Tensor>& inputs) {
  NoGradGuard guard;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(constant(t));
  return f(vars).value().item();
}

inline Tensor perturbed(const Tensor& t, std::size_t k, double delta) {
  std::vector<double> v = t.values();
  v[k] += delta;
  return Tensor(t.shape(), std::move(v));
}

inline void append(std::vector<double>& out, const Tensor& t) {
  out.insert(out.end(), t.values().begin(), t.values().end());
}

}  // namespace detail

/// Relative error between the reverse-mode gradient of `f` (a callable taking
/// std::vector<Var> and returning a scalar Var) and central differences with
/// step h, over all inputs jointly.
template <class F>
double gradient_error(F f, const std::vector<Tensor>& inputs, double h = 1e-5) {
  std::vector<Var> params;
  for (const Tensor& t : inputs) params.push_back(parameter(t));
  const std::vector<Var> grads = backward(f(params), params);

  std::vector<double> analytic, numeric;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    detail::append(analytic, grads[i].value());
    std::vector<Tensor> probe = inputs;
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      probe[i] = detail::perturbed(inputs[i], k, h);
      const double up = detail::eval_scalar(f, probe);
      probe[i] = detail::perturbed(inputs[i], k, -h);
      const double down = detail::eval_scalar(f, probe);
      numeric.push_back((up - down) / (2.0 * h));
    }
    probe[i] = inputs[i];
  }
  return relative_error(analytic, numeric);
}

/// Checks a gradient-of-gradient. The analytic side differentiates
/// s(x) = <grad f(x), v> with a second backward pass through the recorded
/// first one; the numeric side central-differences s computed from the
/// analytic first gradient.
template <class F>
double second_order_error(F f, const std::vector<Tensor>& inputs,
                          const std::vector<Tensor>& directions,
                          double h = 1e-5) {
  auto directional = [&](const std::vector<Var>& x) {
    const std::vector<Var> g = backward(f(x), x, /*create_graph=*/true);
    Var s = constant(0.0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      s = s + sum(g[i] * constant(directions[i]));
    }
    return s;
  };

  std::vector<Var> params;
  for (const Tensor& t : inputs) params.push_back(parameter(t));
  const std::vector<Var> hv = backward(directional(params), params);

  auto eval = [&](const std::vector<Tensor>& at) {
    std::vector<Var> p;
    for (const Tensor& t : at) p.push_back(parameter(t));
    return directional(p).value().item();
  };
  std::vector<double> analytic, numeric;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    detail::append(analytic, hv[i].value());
    std::vector<Tensor> probe = inputs;
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      probe[i] = detail::perturbed(inputs[i], k, h);
      const double up = eval(probe);
      probe[i] = detail::perturbed(inputs[i], k, -h);
      const double down = eval(probe);
      numeric.push_back((up - down) / (2.0 * h));
    }
    probe[i] = inputs[i];
  }
  return relative_error(analytic, numeric);
}

}  // namespace metaloss
