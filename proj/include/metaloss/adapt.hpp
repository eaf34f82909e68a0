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

// Online streaming adaptation and the segmented pick-and-place task.
//
// A stream is consumed in consecutive windows of `batch` records. For every
// window the model's MSE is logged first, then one optimizer step is taken on
// the chosen loss. The segmented task chains five min-jerk motions with a
// payload attached while the object is carried, and warm-starts the model
// from one motion to the next.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metaloss/arm.hpp"
#include "metaloss/dataset.hpp"
#include "metaloss/loss.hpp"
#include "metaloss/model.hpp"
#include "metaloss/training.hpp"

namespace metaloss {

class AdaptationDivergedError : public std::runtime_error {
 public:
  AdaptationDivergedError(const std::string& what, std::size_t step)
      : std::runtime_error("adaptation diverged at step " + std::to_string(step) + ": " + what),
        step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

struct AdaptReport {
  std::string label;
  double lr = 0.0;
  std::size_t batch = 0;
  std::vector<double> batch_mse;  // one entry per window, logged before the update
  double mean = 0.0;
  double std = 0.0;

  bool operator==(const AdaptReport&) const = default;
};

namespace detail {

inline void summarize(AdaptReport& r) {
  double m = 0.0, sq = 0.0;
  for (double v : r.batch_mse) m += v;
  m /= static_cast<double>(r.batch_mse.size());
  for (double v : r.batch_mse) sq += (v - m) * (v - m);
  r.mean = m;
  r.std = std::sqrt(sq / static_cast<double>(r.batch_mse.size()));
}

inline void check_stream(std::span<const DynRecord> stream, std::size_t batch) {
  if (batch == 0) throw std::invalid_argument("online_adapt: batch must be positive");
  if (stream.size() < batch) {
    throw std::invalid_argument("online_adapt: stream of " + std::to_string(stream.size()) +
                                " records is shorter than one batch of " + std::to_string(batch));
  }
}

}  // namespace detail

/// Adapts `model` in place on `stream`. A trailing remainder shorter than
/// `batch` is dropped.
inline AdaptReport online_adapt(ModelParams& model, const LossParams& loss, OptState& opt,
                                std::span<const DynRecord> stream, std::size_t batch = 5) {
  detail::check_stream(stream, batch);
  AdaptReport r;
  r.label = variant_name(loss.variant);
  r.lr = opt.lr;
  r.batch = batch;
  const std::size_t windows = stream.size() / batch;
  r.batch_mse.reserve(windows);
  for (std::size_t k = 0; k < windows; ++k) {
    const PreparedBatch pb = prepare(make_batch(stream.subspan(k * batch, batch)), model.input_norm);
    try {
      r.batch_mse.push_back(train_step(model, loss, pb, opt));
    } catch (const NonFiniteGradientError& e) {
      throw AdaptationDivergedError(e.what(), k);
    } catch (const NonFiniteError& e) {
      throw AdaptationDivergedError(e.what(), k);
    }
  }
  detail::summarize(r);
  return r;
}

/// Logs the same windows as online_adapt without ever updating `model`.
inline AdaptReport frozen_eval(const ModelParams& model, std::span<const DynRecord> stream,
                               std::size_t batch = 5) {
  detail::check_stream(stream, batch);
  AdaptReport r;
  r.label = "pretrained_frozen";
  r.batch = batch;
  const std::size_t windows = stream.size() / batch;
  for (std::size_t k = 0; k < windows; ++k) {
    r.batch_mse.push_back(
        batch_mse(model, prepare(make_batch(stream.subspan(k * batch, batch)), model.input_norm)));
  }
  detail::summarize(r);
  return r;
}

inline constexpr std::array<const char*, 5> kSegmentNames{"reach", "lift", "move_over", "lower",
                                                          "retract"};

struct Segment {
  std::string name;
  RefTrajectory trajectory;
  double payload = 0.0;  // kg at the tip while this segment runs
};

struct TaskOptions {
  double dt = 1.0 / 240.0;
  double segment_duration = 2.0;  // s per motion
  double payload = 0.857;         // kg
  double perturbation = 0.1;      // rad, uniform per waypoint coordinate and trial
  double scale = 1.0;             // multiplies the nominal waypoints
};

/// Joint-space waypoints rest, grasp, lifted, over, place, rest for a
/// `joints`-link arm. Everything except the rest posture is perturbed by the
/// trial seed.
inline std::vector<JointVector> task_waypoints(std::size_t joints, double perturbation,
                                               std::uint64_t trial_seed, double scale = 1.0) {
  const auto n = static_cast<Eigen::Index>(joints);
  JointVector grasp(n), lifted(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double f = joints > 1 ? static_cast<double>(j) / static_cast<double>(joints - 1) : 0.0;
    grasp[j] = scale * 0.7 * (1.0 - 0.5 * f);
    lifted[j] = grasp[j] + scale * 0.3 * (1.0 - 0.5 * f);
  }
  std::vector<JointVector> w{JointVector::Zero(n), grasp, lifted, -lifted, -grasp,
                             JointVector::Zero(n)};
  std::mt19937_64 rng(trial_seed);
  std::uniform_real_distribution<double> u(-perturbation, perturbation);
  for (std::size_t k = 1; k + 1 < w.size(); ++k) {
    for (Eigen::Index j = 0; j < n; ++j) w[k][j] += u(rng);
  }
  return w;
}

inline std::vector<Segment> pick_and_place_segments(std::size_t joints, const TaskOptions& opt,
                                                    std::uint64_t trial_seed) {
  const auto w = task_waypoints(joints, opt.perturbation, trial_seed, opt.scale);
  std::vector<Segment> segs;
  for (std::size_t k = 0; k < kSegmentNames.size(); ++k) {
    const bool carrying = k >= 1 && k <= 3;
    segs.push_back({kSegmentNames[k], min_jerk_trajectory(w[k], w[k + 1], opt.segment_duration, opt.dt),
                    carrying ? opt.payload : 0.0});
  }
  return segs;
}

/// Each segment must start where the previous one ends, at the same rate.
inline void validate_segments(std::span<const Segment> segs) {
  if (segs.empty()) throw std::invalid_argument("segments: empty task");
  for (std::size_t k = 0; k < segs.size(); ++k) {
    const RefTrajectory& t = segs[k].trajectory;
    if (t.size() < 2) throw std::invalid_argument("segments: '" + segs[k].name + "' is too short");
    if (!(segs[k].payload >= 0.0)) throw std::invalid_argument("segments: negative payload");
    if (k == 0) continue;
    const RefTrajectory& p = segs[k - 1].trajectory;
    if (t.dt != p.dt || (t.q.front() - p.q.back()).norm() > 1e-12 ||
        (t.dq.front() - p.dq.back()).norm() > 1e-12) {
      throw std::invalid_argument("segments: '" + segs[k].name + "' does not continue '" +
                                  segs[k - 1].name + "'");
    }
  }
}

/// Simulates the whole task as one continuous motion, switching the payload
/// at segment boundaries. Returns one record stream per segment.
inline std::vector<std::vector<DynRecord>> simulate_task(const ArmModel& arm, const Gains& gains,
                                                         std::span<const Segment> segs,
                                                         double noise_sigma, std::mt19937_64& rng) {
  validate_segments(segs);
  ArmState state{segs.front().trajectory.q.front(), segs.front().trajectory.dq.front()};
  std::vector<std::vector<DynRecord>> out;
  for (const Segment& s : segs) {
    ArmModel m = arm;
    m.payload = arm.payload + s.payload;
    out.push_back(collect_run(m, gains, s.trajectory, noise_sigma, rng, state));
  }
  return out;
}

struct TaskReport {
  std::vector<AdaptReport> segments;
  std::vector<std::vector<Tensor>> theta_after;  // model leaving each segment
};

/// Adapts a copy of `model` through the segment streams in order, carrying
/// the parameters and optimizer state from one segment into the next.
inline TaskReport run_segmented_task(ModelParams model, const LossParams& loss, OptState opt,
                                     const std::vector<std::vector<DynRecord>>& streams,
                                     std::size_t batch = 5) {
  TaskReport r;
  for (const auto& s : streams) {
    r.segments.push_back(online_adapt(model, loss, opt, s, batch));
    r.theta_after.push_back(model.theta);
  }
  return r;
}

inline TaskReport run_frozen_task(const ModelParams& model,
                                  const std::vector<std::vector<DynRecord>>& streams,
                                  std::size_t batch = 5) {
  TaskReport r;
  for (const auto& s : streams) {
    r.segments.push_back(frozen_eval(model, s, batch));
    r.theta_after.push_back(model.theta);
  }
  return r;
}

/// Model trained with Adam on the plain MSE over contiguous batches of the
/// meta-train data. It is only ever used for prediction afterwards.
inline ModelParams pretrain_frozen_baseline(const DynDataset& train, std::size_t steps,
                                            std::uint64_t seed,
                                            const std::vector<std::size_t>& hidden = {64, 64},
                                            std::size_t batch_size = 256, double lr = 1e-3,
                                            const std::optional<InputNorm>& norm = std::nullopt) {
  if (train.record_count() == 0) {
    throw std::invalid_argument("pretrain_frozen_baseline: empty dataset");
  }
  std::mt19937_64 rng(seed);
  ModelParams model = init_model(train.joints, hidden, rng());
  model.input_norm = norm;
  OptState adam = make_adam(lr);
  const LossParams mse = init_loss(LossVariant::mse, train.joints, 0);
  for (std::size_t k = 0; k < steps; ++k) {
    const BatchRef ref = sample_contiguous_batch(train, batch_size, rng);
    train_step(model, mse, prepare(make_batch(ref.records), model.input_norm), adam);
  }
  return model;
}

}  // namespace metaloss
