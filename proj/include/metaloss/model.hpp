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

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaloss/autodiff.hpp"
#include "metaloss/dataset.hpp"

namespace metaloss {

enum class Activation { linear, relu, softplus };

// ---------------------------------------------------------------------------
// Fully connected networks
// ---------------------------------------------------------------------------

/// Layer sizes in -> hidden... -> out. Parameters are stored flat as
/// W_0, b_0, W_1, b_1, ... with W_l of shape [in_l, out_l] and b_l of shape
/// [1, out_l].
inline std::vector<Tensor> init_mlp(const std::vector<std::size_t>& sizes,
                                    std::uint64_t seed) {
  if (sizes.size() < 2) throw std::invalid_argument("init_mlp: need at least in and out sizes");
  for (std::size_t s : sizes) {
    if (s == 0) throw std::invalid_argument("init_mlp: layer sizes must be positive");
  }
  std::mt19937_64 rng(seed);
  std::vector<Tensor> params;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const std::size_t in = sizes[l], out = sizes[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> w(in * out), b(out);
    for (double& x : w) x = u(rng);
    for (double& x : b) x = u(rng);
    params.emplace_back(Shape{in, out}, std::move(w));
    params.emplace_back(Shape{1, out}, std::move(b));
  }
  return params;
}

/// Forward pass; relu on hidden layers, `output` on the last one.
inline Var mlp_forward(std::span<const Var> params, const Var& x,
                       Activation output) {
  if (params.empty() || params.size() % 2 != 0) {
    throw std::invalid_argument("mlp_forward: expected weight/bias pairs");
  }
  Var h = x;
  const std::size_t layers = params.size() / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    h = add_rowwise(matmul(h, params[2 * l]), params[2 * l + 1]);
    const Activation act = l + 1 < layers ? Activation::relu : output;
    if (act == Activation::relu) {
      h = relu(h);
    } else if (act == Activation::softplus) {
      h = softplus(h);
    }
  }
  return h;
}

inline std::vector<Var> as_parameters(const std::vector<Tensor>& tensors) {
  std::vector<Var> out;
  out.reserve(tensors.size());
  for (const Tensor& t : tensors) out.push_back(parameter(t));
  return out;
}

inline std::vector<Var> as_constants(const std::vector<Tensor>& tensors) {
  std::vector<Var> out;
  out.reserve(tensors.size());
  for (const Tensor& t : tensors) out.push_back(constant(t));
  return out;
}

inline std::vector<Tensor> values_of(std::span<const Var> vars) {
  std::vector<Tensor> out;
  out.reserve(vars.size());
  for (const Var& v : vars) out.push_back(v.value());
  return out;
}

/// "layer 1 bias" for flat index 3.
inline std::string param_name(std::size_t index) {
  return "layer " + std::to_string(index / 2) + (index % 2 ? " bias" : " weight");
}

// ---------------------------------------------------------------------------
// Inverse dynamics model
// ---------------------------------------------------------------------------

/// Per-feature affine input transform (x - mean) / scale.
struct InputNorm {
  std::vector<double> mean;
  std::vector<double> scale;

  bool operator==(const InputNorm&) const = default;
};

/// f_theta(q, dq, ddq_d) -> u_ff, an MLP from 3J inputs to J torques.
struct ModelParams {
  std::size_t joints = 0;
  std::vector<std::size_t> hidden;
  std::vector<Tensor> theta;
  std::optional<InputNorm> input_norm;

  std::vector<std::size_t> layer_sizes() const {
    std::vector<std::size_t> s{3 * joints};
    s.insert(s.end(), hidden.begin(), hidden.end());
    s.push_back(joints);
    return s;
  }

  bool operator==(const ModelParams&) const = default;
};

inline ModelParams init_model(std::size_t joints,
                              const std::vector<std::size_t>& hidden,
                              std::uint64_t seed) {
  if (joints == 0) throw std::invalid_argument("init_model: joints must be positive");
  if (hidden.empty()) throw std::invalid_argument("init_model: hidden_sizes must be nonempty");
  ModelParams m;
  m.joints = joints;
  m.hidden = hidden;
  m.theta = init_mlp(m.layer_sizes(), seed);
  return m;
}

/// Mean and standard deviation of the 3J model inputs over a dataset.
inline InputNorm fit_input_norm(const DynDataset& ds) {
  const std::size_t j = ds.joints;
  std::vector<double> sum(3 * j, 0.0), sq(3 * j, 0.0);
  std::size_t n = 0;
  for (const Run& run : ds.runs) {
    for (const DynRecord& r : run.records) {
      for (std::size_t k = 0; k < j; ++k) {
        const double v[3] = {r.q[k], r.dq[k], r.ddq_next[k]};
        for (std::size_t p = 0; p < 3; ++p) {
          sum[p * j + k] += v[p];
          sq[p * j + k] += v[p] * v[p];
        }
      }
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("fit_input_norm: empty dataset");
  InputNorm norm;
  for (std::size_t i = 0; i < 3 * j; ++i) {
    const double mu = sum[i] / static_cast<double>(n);
    const double var = std::max(0.0, sq[i] / static_cast<double>(n) - mu * mu);
    norm.mean.push_back(mu);
    norm.scale.push_back(var > 1e-24 ? std::sqrt(var) : 1.0);
  }
  return norm;
}

/// The B x 3J input matrix [q | dq | ddq], normalized if requested.
inline Tensor model_input(const Batch& batch, const std::optional<InputNorm>& norm) {
  const std::size_t b = batch.size(), j = batch.joints();
  std::vector<double> x(b * 3 * j);
  const Tensor* parts[3] = {&batch.q, &batch.dq, &batch.ddq};
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t p = 0; p < 3; ++p) {
      for (std::size_t k = 0; k < j; ++k) {
        x[r * 3 * j + p * j + k] = (*parts[p])(r, k);
      }
    }
  }
  if (norm) {
    if (norm->mean.size() != 3 * j || norm->scale.size() != 3 * j) {
      throw ShapeError("model_input: normalization has " +
                       std::to_string(norm->mean.size()) + " features, expected " +
                       std::to_string(3 * j));
    }
    for (std::size_t r = 0; r < b; ++r) {
      for (std::size_t c = 0; c < 3 * j; ++c) {
        double& v = x[r * 3 * j + c];
        v = (v - norm->mean[c]) / norm->scale[c];
      }
    }
  }
  return Tensor({b, 3 * j}, std::move(x));
}

/// u_ff for every row of `input` (B x 3J) with theta given as graph nodes.
inline Var predict(std::span<const Var> theta, const Var& input) {
  return mlp_forward(theta, input, Activation::linear);
}

inline Tensor predict(const ModelParams& model, const Batch& batch) {
  NoGradGuard guard;
  const auto theta = as_constants(model.theta);
  return predict(theta, constant(model_input(batch, model.input_norm))).value();
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

enum class OptKind { sgd, adam };

struct OptState {
  OptKind kind = OptKind::sgd;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

inline OptState make_sgd(double lr) {
  if (!(lr >= 0.0)) throw std::invalid_argument("make_sgd: learning rate must be >= 0");
  OptState s;
  s.kind = OptKind::sgd;
  s.lr = lr;
  return s;
}

inline OptState make_adam(double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("make_adam: learning rate must be > 0");
  OptState s;
  s.kind = OptKind::adam;
  s.lr = lr;
  return s;
}

class NonFiniteGradientError : public std::domain_error {
 public:
  NonFiniteGradientError(const std::string& what, std::size_t index)
      : std::domain_error(what), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// In-place update of `params`; throws NonFiniteGradientError naming the
/// layer if an update would leave the finite range. Adam uses the bias-corrected step size form
/// lr_t = lr sqrt(1 - b2^t) / (1 - b1^t), theta -= lr_t m / (sqrt(v) + eps).
inline void optimizer_step(std::vector<Tensor>& params,
                           const std::vector<Tensor>& grads, OptState& opt) {
  if (grads.size() != params.size()) {
    throw ShapeError("optimizer_step: " + std::to_string(grads.size()) +
                     " gradients for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape()) {
      throw ShapeError("optimizer_step: gradient of " + param_name(i) + " has shape " +
                       to_string(grads[i].shape()) + ", parameter has " +
                       to_string(params[i].shape()));
    }
  }
  if (opt.kind == OptKind::adam && opt.m.empty()) {
    for (const Tensor& p : params) {
      opt.m.emplace_back(p.size(), 0.0);
      opt.v.emplace_back(p.size(), 0.0);
    }
  }
  if (opt.kind == OptKind::adam && opt.m.size() != params.size()) {
    throw ShapeError("optimizer_step: adam state does not match the parameter list");
  }
  // Work on copies so that a failed step leaves params and opt untouched.
  OptState next_opt = opt;
  ++next_opt.step;
  double step_size = opt.lr;
  if (opt.kind == OptKind::adam) {
    const double t = static_cast<double>(next_opt.step);
    step_size = opt.lr * std::sqrt(1.0 - std::pow(opt.beta2, t)) /
                (1.0 - std::pow(opt.beta1, t));
  }
  std::vector<Tensor> next;
  next.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<double> p = params[i].values();
    const auto& g = grads[i].values();
    if (opt.kind == OptKind::sgd) {
      for (std::size_t k = 0; k < p.size(); ++k) p[k] -= opt.lr * g[k];
    } else {
      auto& m = next_opt.m[i];
      auto& v = next_opt.v[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * g[k];
        v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * g[k] * g[k];
        p[k] -= step_size * m[k] / (std::sqrt(v[k]) + opt.eps);
      }
    }
    for (double x : p) {
      if (!std::isfinite(x)) {
        throw NonFiniteGradientError(
            "optimizer_step: non-finite update in " + param_name(i), i);
      }
    }
    next.emplace_back(params[i].shape(), std::move(p));
  }
  params = std::move(next);
  opt = std::move(next_opt);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::json tensors_to_json(const std::vector<Tensor>& tensors) {
  nlohmann::json arr = nlohmann::json::array();
  for (const Tensor& t : tensors) {
    arr.push_back({{"shape", t.shape()}, {"data", t.values()}});
  }
  return arr;
}

inline std::vector<Tensor> tensors_from_json(const nlohmann::json& arr) {
  if (!arr.is_array()) throw CheckpointError("checkpoint: tensor list must be an array");
  std::vector<Tensor> out;
  for (const auto& item : arr) {
    try {
      out.emplace_back(item.at("shape").get<Shape>(),
                       item.at("data").get<std::vector<double>>());
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("checkpoint: malformed tensor: ") + e.what());
    } catch (const std::invalid_argument& e) {
      throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
  }
  return out;
}

inline nlohmann::json to_json(const ModelParams& m) {
  nlohmann::json j{{"kind", "inverse_dynamics_mlp"},
                   {"joints", m.joints},
                   {"hidden", m.hidden},
                   {"theta", tensors_to_json(m.theta)}};
  if (m.input_norm) {
    j["input_norm"] = {{"mean", m.input_norm->mean}, {"scale", m.input_norm->scale}};
  }
  return j;
}

inline ModelParams model_from_json(const nlohmann::json& j) {
  ModelParams m;
  try {
    if (j.at("kind") != "inverse_dynamics_mlp") {
      throw CheckpointError("checkpoint: not an inverse dynamics model");
    }
    m.joints = j.at("joints").get<std::size_t>();
    m.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    m.theta = tensors_from_json(j.at("theta"));
    if (j.contains("input_norm")) {
      m.input_norm = InputNorm{j["input_norm"].at("mean").get<std::vector<double>>(),
                               j["input_norm"].at("scale").get<std::vector<double>>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  const auto sizes = m.layer_sizes();
  if (m.theta.size() != 2 * (sizes.size() - 1)) {
    throw CheckpointError("checkpoint: layer count does not match hidden sizes");
  }
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    if (m.theta[2 * l].shape() != Shape{sizes[l], sizes[l + 1]} ||
        m.theta[2 * l + 1].shape() != Shape{1, sizes[l + 1]}) {
      throw CheckpointError("checkpoint: unexpected shape in " + param_name(2 * l));
    }
  }
  return m;
}

}  // namespace metaloss
