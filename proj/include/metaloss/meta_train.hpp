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

// Bilevel training of loss parameters phi.
//
// For every batch a fresh model theta_0 is drawn and the contiguous batch is
// split into halves A and B. Inner iteration i runs i SGD steps of theta on
// the learned loss over A (each step differentiable in phi), scores the
// result with the MSE on B, and immediately moves phi down the gradient of
// that score.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "metaloss/autodiff.hpp"
#include "metaloss/dataset.hpp"
#include "metaloss/loss.hpp"
#include "metaloss/model.hpp"
#include "metaloss/training.hpp"

namespace metaloss {

/// How the inner trajectory is differentiated.
///   full       theta_i is rebuilt from theta_0 with the current phi and the
///              gradient flows through all i inner steps.
///   last_step  theta_{i-1} is carried over as a constant and only the last
///              inner step is differentiated (truncated ablation).
enum class Unroll { full, last_step };

struct MetaConfig {
  std::size_t epochs = 300;
  std::size_t batches_per_epoch = 100;
  std::size_t batch_size = 256;  // K, split into two halves
  double alpha = 1e-3;           // inner SGD step
  double eta = 1e-2;             // outer SGD step on phi
  std::size_t iters_max = 10;
  LossVariant variant = LossVariant::structured;
  std::vector<std::size_t> hidden{64, 64};
  std::uint64_t seed = 0;
  bool resample_halves = false;
  Unroll unroll = Unroll::full;
  double divergence_threshold = 1e6;
  bool normalize_inputs = false;

  void validate() const {
    if (epochs == 0 || batches_per_epoch == 0 || iters_max == 0) {
      throw std::invalid_argument("meta config: epochs, batches and iters must be positive");
    }
    if (batch_size < 2 || batch_size % 2 != 0) {
      throw std::invalid_argument("meta config: batch size K must be even and >= 2");
    }
    if (!(alpha >= 0.0) || !(eta >= 0.0) || !std::isfinite(alpha) || !std::isfinite(eta)) {
      throw std::invalid_argument("meta config: alpha and eta must be finite and >= 0");
    }
    if (hidden.empty()) throw std::invalid_argument("meta config: hidden sizes must be nonempty");
    if (!(divergence_threshold > 0.0)) {
      throw std::invalid_argument("meta config: divergence threshold must be positive");
    }
  }
};

class MetaDivergenceError : public std::runtime_error {
 public:
  MetaDivergenceError(const std::string& what, std::size_t epoch, std::size_t batch)
      : std::runtime_error(what + " (epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch) + ")"),
        epoch_(epoch),
        batch_(batch) {}
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

/// Non-finite values caught inside one meta step, before the caller attaches
/// epoch and batch indices.
class MetaStepDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// theta - alpha * grad_theta L_phi(theta; A), recorded so that the result is
/// differentiable in phi (and in theta).
inline std::vector<Var> inner_update(std::span<const Var> theta, std::span<const Var> phi,
                                     LossVariant variant, const PreparedBatch& a,
                                     double alpha) {
  if (a.batch.size() == 0) throw std::invalid_argument("inner_update: empty batch");
  EnableGradGuard guard;
  const Var pred = predict(theta, constant(a.input));
  const Var loss = learned_loss(variant, phi, a.batch, pred);
  if (!std::isfinite(loss.value().item())) throw MetaStepDiverged("inner loss is not finite");
  const std::vector<Var> grads = backward(loss, theta, /*create_graph=*/true);
  std::vector<Var> next;
  next.reserve(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    next.push_back(theta[i] - scalar_mul(grads[i], alpha));
  }
  return next;
}

/// MSE on B after `steps` inner updates on A starting from theta_0, as a
/// function of phi.
inline Var outer_objective(std::span<const Var> phi, const std::vector<Tensor>& theta0,
                           LossVariant variant, const PreparedBatch& a,
                           const PreparedBatch& b, double alpha, std::size_t steps) {
  std::vector<Var> theta = as_parameters(theta0);
  for (std::size_t k = 0; k < steps; ++k) theta = inner_update(theta, phi, variant, a, alpha);
  return mse_loss(predict(theta, constant(b.input)), constant(b.batch.tau));
}

struct MetaStepResult {
  std::vector<double> outer_losses;      // per inner iteration, before the phi update
  std::vector<double> meta_grad_norms;   // per inner iteration
};

/// Runs iters_max inner iterations on one batch and updates `loss.phi` after
/// each. `theta0` is left untouched.
inline MetaStepResult meta_step(LossParams& loss, const std::vector<Tensor>& theta0,
                                const PreparedBatch& a, const PreparedBatch& b,
                                const MetaConfig& cfg,
                                const std::function<std::pair<PreparedBatch, PreparedBatch>()>&
                                    resample = {}) {
  if (loss.variant == LossVariant::mse) {
    throw UnsupportedVariantError("meta_step: the mse loss has no parameters");
  }
  MetaStepResult result;
  OptState outer = make_sgd(cfg.eta);
  std::vector<Tensor> carried = theta0;
  PreparedBatch cur_a = a, cur_b = b;
  for (std::size_t i = 1; i <= cfg.iters_max; ++i) {
    if (resample && i > 1) std::tie(cur_a, cur_b) = resample();
    const std::vector<Var> phi = as_parameters(loss.phi);
    std::vector<Var> theta_last;
    auto build = [&] {
      if (cfg.unroll == Unroll::full) {
        return outer_objective(phi, theta0, loss.variant, cur_a, cur_b, cfg.alpha, i);
      }
      theta_last = inner_update(as_parameters(carried), phi, loss.variant, cur_a, cfg.alpha);
      return mse_loss(predict(theta_last, constant(cur_b.input)), constant(cur_b.batch.tau));
    };
    std::optional<Var> built;
    try {
      built = build();
    } catch (const NonFiniteError& e) {
      throw MetaStepDiverged(std::string("non-finite value in inner loop: ") + e.what());
    }
    const Var objective = *built;
    const double value = objective.value().item();
    if (!(value <= cfg.divergence_threshold)) {
      throw MetaStepDiverged("outer loss " + std::to_string(value) + " exceeds threshold");
    }
    std::vector<Tensor> grads;
    try {
      grads = values_of(backward(objective, phi));
    } catch (const NonFiniteError& e) {
      throw MetaStepDiverged(std::string("non-finite meta-gradient: ") + e.what());
    }
    double norm = 0.0;
    for (const Tensor& g : grads) {
      for (double x : g.values()) norm += x * x;
    }
    result.outer_losses.push_back(value);
    result.meta_grad_norms.push_back(std::sqrt(norm));
    optimizer_step(loss.phi, grads, outer);
    if (cfg.unroll == Unroll::last_step) carried = values_of(theta_last);
  }
  return result;
}

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double mean_first_outer = 0.0;
  double mean_last_outer = 0.0;
  double max_outer = 0.0;
};

struct MetaTrainResult {
  LossParams loss;
  std::vector<EpochLog> epochs;
  std::optional<InputNorm> input_norm;
};

/// Called after every epoch with the current loss parameters.
using EpochHook = std::function<void(const EpochLog&, const LossParams&)>;

inline std::pair<PreparedBatch, PreparedBatch> split_halves(std::span<const DynRecord> records,
                                                            const std::optional<InputNorm>& norm) {
  const std::size_t half = records.size() / 2;
  return {prepare(make_batch(records.first(half)), norm),
          prepare(make_batch(records.subspan(half)), norm)};
}

inline MetaTrainResult meta_train(const MetaConfig& cfg, const DynDataset& train,
                                  const EpochHook& hook = {},
                                  std::optional<LossParams> start = std::nullopt) {
  cfg.validate();
  if (cfg.variant == LossVariant::mse) {
    throw UnsupportedVariantError("meta_train: the mse loss has no parameters to learn");
  }
  MetaTrainResult result;
  result.loss = start ? *start : init_loss(cfg.variant, train.joints, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  if (cfg.normalize_inputs) result.input_norm = fit_input_norm(train);
  std::mt19937_64 rng(cfg.seed);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    for (std::size_t b = 0; b < cfg.batches_per_epoch; ++b) {
      const std::vector<Tensor> theta0 = init_model(train.joints, cfg.hidden, rng()).theta;
      const BatchRef ref = sample_contiguous_batch(train, cfg.batch_size, rng);
      const auto [a, bb] = split_halves(ref.records, result.input_norm);
      std::function<std::pair<PreparedBatch, PreparedBatch>()> resample;
      if (cfg.resample_halves) {
        resample = [&] {
          return split_halves(sample_contiguous_batch(train, cfg.batch_size, rng).records,
                              result.input_norm);
        };
      }
      MetaStepResult step;
      try {
        step = meta_step(result.loss, theta0, a, bb, cfg, resample);
      } catch (const MetaStepDiverged& e) {
        throw MetaDivergenceError(e.what(), epoch, b);
      } catch (const NonFiniteGradientError& e) {
        throw MetaDivergenceError(e.what(), epoch, b);
      } catch (const NonFiniteError& e) {
        throw MetaDivergenceError(e.what(), epoch, b);
      }
      log.mean_first_outer += step.outer_losses.front();
      log.mean_last_outer += step.outer_losses.back();
      for (double v : step.outer_losses) log.max_outer = std::max(log.max_outer, v);
    }
    log.mean_first_outer /= static_cast<double>(cfg.batches_per_epoch);
    log.mean_last_outer /= static_cast<double>(cfg.batches_per_epoch);
    result.epochs.push_back(log);
    if (hook) hook(log, result.loss);
  }
  return result;
}

}  // namespace metaloss
