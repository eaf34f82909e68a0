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

// Plain (first-order) training of the inverse dynamics model under a fixed
// loss, and the evaluation protocol for learned losses.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "metaloss/dataset.hpp"
#include "metaloss/loss.hpp"
#include "metaloss/model.hpp"

namespace metaloss {

/// A batch together with its model input matrix.
struct PreparedBatch {
  Batch batch;
  Tensor input;
};

inline PreparedBatch prepare(Batch batch, const std::optional<InputNorm>& norm) {
  Tensor input = model_input(batch, norm);
  return {std::move(batch), std::move(input)};
}

/// Mean over all B * J entries of the squared torque error.
inline double batch_mse(const ModelParams& model, const PreparedBatch& pb) {
  NoGradGuard guard;
  const auto theta = as_constants(model.theta);
  return mse_loss(predict(theta, constant(pb.input)), constant(pb.batch.tau)).value().item();
}

/// Full-split MSE, every record of every run.
inline double dataset_mse(const ModelParams& model, const DynDataset& ds) {
  return batch_mse(model, prepare(make_batch(ds), model.input_norm));
}

/// Gradient of `loss` with respect to theta on one batch.
inline std::vector<Tensor> loss_gradient(const ModelParams& model, const LossParams& loss,
                                         const PreparedBatch& pb) {
  const auto theta = as_parameters(model.theta);
  const auto phi = as_constants(loss.phi);
  const Var pred = predict(theta, constant(pb.input));
  const Var value = learned_loss(loss.variant, phi, pb.batch, pred);
  return values_of(backward(value, theta));
}

/// One optimizer step on `loss`. Returns the batch MSE measured before the
/// update.
inline double train_step(ModelParams& model, const LossParams& loss,
                         const PreparedBatch& pb, OptState& opt) {
  const double before = batch_mse(model, pb);
  optimizer_step(model.theta, loss_gradient(model, loss, pb), opt);
  return before;
}

struct EvalOptions {
  std::size_t steps = 100;
  std::size_t seeds = 5;
  std::size_t batch_size = 256;
  double lr = 1e-3;
  std::vector<std::size_t> hidden{64, 64};
  std::optional<InputNorm> input_norm;
  std::uint64_t seed = 0;
};

struct EvalResult {
  // curves[s][k]: batch MSE at step k of seed s, measured before the update.
  std::vector<std::vector<double>> curves;
  std::vector<double> mean_curve;
  std::vector<double> std_curve;
  // Full-split MSE after the last step, per seed.
  std::vector<double> final_mse;

  bool operator==(const EvalResult&) const = default;
};

/// Seed stream for evaluation run `s`; shared by every loss so that all
/// losses see the same initial models and batches.
inline std::uint64_t eval_seed(std::uint64_t base, std::size_t s) {
  return base * 1000003ULL + 7919ULL * (s + 1);
}

/// Trains a fresh model per seed for `steps` SGD steps on contiguous batches
/// of `ds`, minimizing `loss`.
inline EvalResult eval_learned_loss(const LossParams& loss, const DynDataset& ds,
                                    const EvalOptions& opt) {
  if (ds.record_count() == 0) throw std::invalid_argument("eval_learned_loss: empty dataset");
  EvalResult r;
  const Batch full = make_batch(ds);
  for (std::size_t s = 0; s < opt.seeds; ++s) {
    std::mt19937_64 rng(eval_seed(opt.seed, s));
    ModelParams model = init_model(ds.joints, opt.hidden, rng());
    model.input_norm = opt.input_norm;
    OptState sgd = make_sgd(opt.lr);
    std::vector<double> curve;
    for (std::size_t k = 0; k < opt.steps; ++k) {
      const BatchRef ref = sample_contiguous_batch(ds, opt.batch_size, rng);
      curve.push_back(train_step(model, loss, prepare(make_batch(ref.records), model.input_norm),
                                 sgd));
    }
    r.curves.push_back(std::move(curve));
    r.final_mse.push_back(batch_mse(model, prepare(full, model.input_norm)));
  }
  for (std::size_t k = 0; k < opt.steps; ++k) {
    double m = 0.0, sq = 0.0;
    for (const auto& c : r.curves) m += c[k];
    m /= static_cast<double>(opt.seeds);
    for (const auto& c : r.curves) sq += (c[k] - m) * (c[k] - m);
    r.mean_curve.push_back(m);
    r.std_curve.push_back(std::sqrt(sq / static_cast<double>(opt.seeds)));
  }
  return r;
}

}  // namespace metaloss
