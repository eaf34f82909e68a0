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

// Shared fixtures for the meta-training tests and the acceptance binary.

#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <utility>

#include "metaloss/gradcheck.hpp"
#include "metaloss/meta_train.hpp"
#include "op_cases.hpp"

namespace meta_oracles {

using namespace metaloss;

inline std::pair<PreparedBatch, PreparedBatch> random_halves(std::size_t joints, std::size_t half,
                                                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto batch = [&] {
    const Shape s{half, joints};
    return prepare(Batch{op_cases::random_tensor(s, rng, false), op_cases::random_tensor(s, rng, false),
                         op_cases::random_tensor(s, rng, false), op_cases::random_tensor(s, rng, false)},
                   std::nullopt);
  };
  PreparedBatch a = batch();
  PreparedBatch b = batch();
  return {std::move(a), std::move(b)};
}

/// Relative error between the reverse-mode meta-gradient of the outer
/// objective and central differences in phi, on a tiny model.
inline double meta_gradient_error(LossVariant variant, std::size_t steps, std::uint64_t seed) {
  const auto [a, b] = random_halves(2, 6, seed);
  const std::vector<Tensor> theta0 = init_model(2, {3}, seed + 1).theta;
  LossParams loss = init_loss(variant, 2, seed + 2);
  if (variant == LossVariant::structured) loss.phi[0] = Tensor::vector({0.3, -0.6});
  return gradient_error(
      [&](const std::vector<Var>& phi) {
        return outer_objective(phi, theta0, variant, a, b, 0.1, steps);
      },
      loss.phi);
}

/// Two smooth runs of `records` samples each; torque is a fixed nonlinear
/// function of the state. With `noise_joint` set, that joint's torque is
/// replaced by unit Gaussian noise.
inline DynDataset synthetic_dataset(std::size_t joints, std::size_t records, std::uint64_t seed,
                                    std::optional<std::size_t> noise_joint = std::nullopt) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  DynDataset ds{joints, 0.01, {}};
  for (double f : {0.1, 0.2}) {
    metaloss::Run run{f, {}};
    for (std::size_t t = 0; t < records; ++t) {
      DynRecord r;
      for (std::size_t j = 0; j < joints; ++j) {
        const double w = 2 * std::numbers::pi * f * (1.0 + 0.3 * static_cast<double>(j));
        const double x = static_cast<double>(t) * ds.dt;
        const double q = std::sin(w * x), dq = w * std::cos(w * x), ddq = -w * w * q;
        r.q.push_back(q);
        r.dq.push_back(dq);
        r.ddq_next.push_back(ddq);
        r.tau.push_back(noise_joint == j ? noise(rng) : 2.0 * std::sin(q) + 0.5 * dq + 0.1 * ddq);
      }
      run.records.push_back(std::move(r));
    }
    ds.runs.push_back(std::move(run));
  }
  return ds;
}

inline MetaConfig tiny_config(LossVariant variant) {
  MetaConfig cfg;
  cfg.epochs = 2;
  cfg.batches_per_epoch = 5;
  cfg.batch_size = 32;
  cfg.alpha = 1e-2;
  cfg.eta = 1e-2;
  cfg.iters_max = 3;
  cfg.variant = variant;
  cfg.hidden = {8};
  cfg.seed = 3;
  return cfg;
}

/// softplus(psi_noise) / softplus(psi_clean) after meta-training a structured
/// loss on two joints where joint 1 carries only noise.
inline double noise_joint_weight_ratio() {
  const DynDataset ds = synthetic_dataset(2, 500, 12, 1);
  MetaConfig cfg = tiny_config(LossVariant::structured);
  cfg.epochs = 4;
  cfg.batches_per_epoch = 20;
  cfg.eta = 0.1;
  const MetaTrainResult r = meta_train(cfg, ds);
  const Tensor w = softplus(constant(r.loss.phi[0])).value();
  return w[1] / w[0];
}

}  // namespace meta_oracles
