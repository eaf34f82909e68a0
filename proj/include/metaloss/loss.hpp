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

// Fixed and learnable losses over predicted vs. measured torques.
//
//   mse              mean_bj (pred - target)^2
//   structured       mean_b sum_j softplus(psi_j) (pred_bj - target_bj)^2
//   state_dependent  mean_b sum_j w_j(q_b, dq_b) (pred_bj - target_bj)^2,
//                    w = softplus(MLP 2J -> 32 -> J)
//   mlp              mean_b softplus(MLP 2J -> 40 -> 40 -> 40 -> 1)(pred_b, target_b)

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaloss/autodiff.hpp"
#include "metaloss/dataset.hpp"
#include "metaloss/model.hpp"

namespace metaloss {

enum class LossVariant { mse, mlp, structured, state_dependent };

inline const char* variant_name(LossVariant v) {
  switch (v) {
    case LossVariant::mse: return "mse";
    case LossVariant::mlp: return "mlp";
    case LossVariant::structured: return "structured";
    case LossVariant::state_dependent: return "state_dependent";
  }
  return "?";
}

inline LossVariant parse_variant(std::string_view s) {
  for (LossVariant v : {LossVariant::mse, LossVariant::mlp, LossVariant::structured,
                        LossVariant::state_dependent}) {
    if (s == variant_name(v)) return v;
  }
  throw std::invalid_argument("unknown loss variant '" + std::string(s) +
                              "' (expected mse, mlp, structured or state_dependent)");
}

class UnsupportedVariantError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LossParams {
  LossVariant variant = LossVariant::mse;
  std::size_t joints = 0;
  std::vector<Tensor> phi;

  bool operator==(const LossParams&) const = default;
};

inline constexpr std::size_t kStateDependentHidden = 32;
inline constexpr std::size_t kMlpLossHidden = 40;

/// softplus^-1(1): the structured loss starts out as J * MSE.
inline const double kUnitWeightLogit = std::log(std::exp(1.0) - 1.0);

inline LossParams init_loss(LossVariant variant, std::size_t joints,
                            std::uint64_t seed) {
  if (joints == 0) throw std::invalid_argument("init_loss: joints must be positive");
  LossParams p{variant, joints, {}};
  switch (variant) {
    case LossVariant::mse:
      break;
    case LossVariant::structured:
      p.phi.push_back(Tensor::filled({joints}, kUnitWeightLogit));
      break;
    case LossVariant::state_dependent:
      p.phi = init_mlp({2 * joints, kStateDependentHidden, joints}, seed);
      break;
    case LossVariant::mlp:
      p.phi = init_mlp({2 * joints, kMlpLossHidden, kMlpLossHidden, kMlpLossHidden, 1},
                       seed);
      break;
  }
  return p;
}

namespace detail {

inline void require_same_shape(const char* what, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
  }
}

inline Var batch_mean(const Var& total, std::size_t rows) {
  return scalar_mul(total, 1.0 / static_cast<double>(rows));
}

}  // namespace detail

inline Var mse_loss(const Var& pred, const Var& target) {
  detail::require_same_shape("mse_loss", pred, target);
  return mean(square(pred - target));
}

/// `psi` holds the J raw weights; phi = softplus(psi).
inline Var structured_loss(const Var& psi, const Var& pred, const Var& target) {
  detail::require_same_shape("structured_loss", pred, target);
  const std::size_t j = pred.value().cols();
  if (psi.shape() != Shape{j}) {
    throw ShapeError("structured_loss: weights of shape " + to_string(psi.shape()) +
                     " for " + std::to_string(j) + " joints");
  }
  const Var w = reshape(softplus(psi), {j, 1});
  return detail::batch_mean(sum(matmul(square(pred - target), w)), pred.value().rows());
}

inline Var state_dependent_weights(std::span<const Var> net, const Var& q, const Var& dq) {
  detail::require_same_shape("state_dependent_loss", q, dq);
  return mlp_forward(net, concat({q, dq}, 1), Activation::softplus);
}

inline Var state_dependent_loss(std::span<const Var> net, const Var& q, const Var& dq,
                                const Var& pred, const Var& target) {
  detail::require_same_shape("state_dependent_loss", pred, target);
  detail::require_same_shape("state_dependent_loss", q, pred);
  const Var w = state_dependent_weights(net, q, dq);
  return detail::batch_mean(sum(w * square(pred - target)), pred.value().rows());
}

inline Var mlp_loss(std::span<const Var> net, const Var& pred, const Var& target) {
  detail::require_same_shape("mlp_loss", pred, target);
  return mean(mlp_forward(net, concat({pred, target}, 1), Activation::softplus));
}

/// The loss of `variant` on one batch, with phi given as graph nodes.
inline Var learned_loss(LossVariant variant, std::span<const Var> phi, const Batch& batch,
                        const Var& pred) {
  const Var target = constant(batch.tau);
  switch (variant) {
    case LossVariant::mse:
      return mse_loss(pred, target);
    case LossVariant::structured:
      return structured_loss(phi[0], pred, target);
    case LossVariant::state_dependent:
      return state_dependent_loss(phi, constant(batch.q), constant(batch.dq), pred, target);
    case LossVariant::mlp:
      return mlp_loss(phi, pred, target);
  }
  throw std::logic_error("learned_loss: unknown variant");
}

// ---------------------------------------------------------------------------
// Weight export
// ---------------------------------------------------------------------------

struct PhiTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  void write_csv(std::ostream& out) const {
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << '\n';
    for (const auto& row : rows) {
      for (std::size_t i = 0; i < row.size(); ++i) {
        out << (i ? "," : "") << format_double(row[i]);
      }
      out << '\n';
    }
  }
};

/// Effective weights: one row per joint for structured, one row per probe
/// state (q, dq) for state_dependent.
inline PhiTable export_phi(const LossParams& loss,
                           std::span<const std::pair<std::vector<double>, std::vector<double>>>
                               states = {}) {
  NoGradGuard guard;
  const std::size_t j = loss.joints;
  PhiTable table;
  if (loss.variant == LossVariant::structured) {
    table.header = {"joint", "phi"};
    const Tensor w = softplus(constant(loss.phi[0])).value();
    for (std::size_t k = 0; k < j; ++k) table.rows.push_back({static_cast<double>(k), w[k]});
    return table;
  }
  if (loss.variant != LossVariant::state_dependent) {
    throw UnsupportedVariantError(std::string("export_phi: variant ") +
                                  variant_name(loss.variant) + " has no per-joint weights");
  }
  for (const char* prefix : {"q_", "dq_", "phi_"}) {
    for (std::size_t k = 0; k < j; ++k) table.header.push_back(prefix + std::to_string(k));
  }
  if (states.empty()) return table;
  std::vector<double> q, dq;
  for (const auto& [sq, sdq] : states) {
    if (sq.size() != j || sdq.size() != j) {
      throw ShapeError("export_phi: probe state with wrong joint count");
    }
    q.insert(q.end(), sq.begin(), sq.end());
    dq.insert(dq.end(), sdq.begin(), sdq.end());
  }
  const std::size_t n = states.size();
  const auto net = as_constants(loss.phi);
  const Tensor w = state_dependent_weights(net, constant(Tensor({n, j}, q)),
                                           constant(Tensor({n, j}, dq)))
                       .value();
  for (std::size_t r = 0; r < n; ++r) {
    std::vector<double> row;
    row.insert(row.end(), states[r].first.begin(), states[r].first.end());
    row.insert(row.end(), states[r].second.begin(), states[r].second.end());
    for (std::size_t k = 0; k < j; ++k) row.push_back(w(r, k));
    table.rows.push_back(std::move(row));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const LossParams& loss) {
  return {{"kind", "loss"},
          {"variant", variant_name(loss.variant)},
          {"joints", loss.joints},
          {"phi", tensors_to_json(loss.phi)}};
}

inline LossParams loss_from_json(const nlohmann::json& j) {
  LossParams loss;
  try {
    if (j.at("kind") != "loss") throw CheckpointError("checkpoint: not a loss checkpoint");
    loss.variant = parse_variant(j.at("variant").get<std::string>());
    loss.joints = j.at("joints").get<std::size_t>();
    loss.phi = tensors_from_json(j.at("phi"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  const LossParams shape_ref = init_loss(loss.variant, loss.joints, 0);
  if (shape_ref.phi.size() != loss.phi.size()) {
    throw CheckpointError("checkpoint: wrong parameter count for variant");
  }
  for (std::size_t i = 0; i < loss.phi.size(); ++i) {
    if (shape_ref.phi[i].shape() != loss.phi[i].shape()) {
      throw CheckpointError("checkpoint: unexpected shape in " + param_name(i));
    }
  }
  return loss;
}

inline void save_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path);
  out << j.dump(1) << '\n';
  if (!out) throw CheckpointError("write failed for " + path);
}

inline nlohmann::json load_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path + ": " + e.what());
  }
}

}  // namespace metaloss
