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

// Planar serial arm with revolute joints.
//
// Joint angles are relative; the absolute angle of link i is the sum of the
// first i joint angles, measured from the downward vertical, so a hanging arm
// sits at q = 0. Gravity points along -y.

#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

namespace metaloss {

using JointVector = Eigen::VectorXd;

class SimulationDivergedError : public std::runtime_error {
 public:
  SimulationDivergedError(const std::string& what, std::size_t step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"),
        step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

struct ArmModel {
  std::vector<double> mass;      // kg
  std::vector<double> length;    // m
  std::vector<double> com;       // m, distance of the link COM from its joint
  std::vector<double> inertia;   // kg m^2, about the link COM
  double gravity = 9.81;         // m/s^2
  std::vector<double> viscous;   // N m s / rad
  std::vector<double> coulomb;   // N m
  double coulomb_velocity_scale = 1e-2;  // rad/s, tanh smoothing width
  double payload = 0.0;          // kg, point mass at the tip of the last link
  // Gravity of the links is cancelled by the controller. A payload is not
  // part of the compensated model and keeps its gravity load.
  bool gravity_compensated = false;

  std::size_t joints() const noexcept { return mass.size(); }

  void validate() const {
    const std::size_t n = mass.size();
    if (n < 1) throw std::invalid_argument("arm: at least one joint required");
    if (length.size() != n || com.size() != n || inertia.size() != n ||
        viscous.size() != n || coulomb.size() != n) {
      throw std::invalid_argument("arm: per-link parameter lists must all have " +
                                  std::to_string(n) + " entries");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!(mass[i] > 0.0) || !(length[i] > 0.0) || !(inertia[i] > 0.0)) {
        throw std::invalid_argument("arm: link " + std::to_string(i) +
                                    " needs positive mass, length and inertia");
      }
      if (!(viscous[i] >= 0.0) || !(coulomb[i] >= 0.0)) {
        throw std::invalid_argument("arm: friction of joint " +
                                    std::to_string(i) + " must be >= 0");
      }
      if (!std::isfinite(com[i])) {
        throw std::invalid_argument("arm: non-finite com offset");
      }
    }
    if (!(payload >= 0.0) || !std::isfinite(gravity) ||
        !(coulomb_velocity_scale > 0.0)) {
      throw std::invalid_argument("arm: invalid payload, gravity or smoothing");
    }
  }
};

/// Uniform slender links, mass decreasing toward the tip.
inline ArmModel default_arm(std::size_t joints = 3) {
  ArmModel m;
  for (std::size_t i = 0; i < joints; ++i) {
    const double mass = 4.0 - 2.0 * static_cast<double>(i) /
                                  static_cast<double>(std::max<std::size_t>(joints - 1, 1));
    const double length = 0.5 - 0.2 * static_cast<double>(i) /
                                    static_cast<double>(std::max<std::size_t>(joints - 1, 1));
    m.mass.push_back(mass);
    m.length.push_back(length);
    m.com.push_back(0.5 * length);
    m.inertia.push_back(mass * length * length / 12.0);
    m.viscous.push_back(0.1);
    // Geometric taper 0.2 -> 0.02 N m keeps the linearized friction slope
    // c / eps within the explicit velocity update's stability range at 240 Hz.
    m.coulomb.push_back(0.2 * std::pow(0.1, static_cast<double>(i) /
                                                static_cast<double>(std::max<std::size_t>(joints - 1, 1))));
  }
  m.gravity_compensated = true;
  return m;
}

struct ArmState {
  JointVector q;
  JointVector dq;
};

struct Gains {
  JointVector kp;
  JointVector kd;
};

inline Gains default_gains(std::size_t joints = 3) {
  Gains g;
  g.kp.resize(static_cast<Eigen::Index>(joints));
  g.kd.resize(static_cast<Eigen::Index>(joints));
  for (std::size_t i = 0; i < joints; ++i) {
    const double s = 1.0 - 0.7 * static_cast<double>(i) /
                               static_cast<double>(std::max<std::size_t>(joints - 1, 1));
    g.kp[static_cast<Eigen::Index>(i)] = 60.0 * s;
    g.kd[static_cast<Eigen::Index>(i)] = 8.0 * s;
  }
  return g;
}

/// Sampled reference: row t of q/dq/ddq is the target at time t * dt.
struct RefTrajectory {
  double dt = 0.0;
  std::vector<JointVector> q;
  std::vector<JointVector> dq;
  std::vector<JointVector> ddq;

  std::size_t size() const noexcept { return q.size(); }
};

namespace detail {

inline void require_joints(const char* what, const JointVector& v,
                           std::size_t n) {
  if (static_cast<std::size_t>(v.size()) != n) {
    throw std::invalid_argument(std::string(what) + ": expected " +
                                std::to_string(n) + " joints, got " +
                                std::to_string(v.size()));
  }
}

inline double cross2(double ax, double ay, double bx, double by) {
  return ax * by - ay * bx;
}

// Planar recursive Newton-Euler. Gravity acts with `link_gravity` on the links
// and `payload_gravity` on the tip mass.
inline JointVector rnea(const ArmModel& m, const JointVector& q,
                        const JointVector& dq, const JointVector& ddq,
                        double link_gravity, double payload_gravity) {
  const auto n = static_cast<Eigen::Index>(m.joints());
  std::vector<double> angle(n), omega(n), alpha(n);
  std::vector<double> ex(n), ey(n);       // unit vector along link
  std::vector<double> acx(n), acy(n);     // COM acceleration
  double phi = 0.0, w = 0.0, wd = 0.0;
  double ajx = 0.0, ajy = 0.0;            // joint acceleration
  for (Eigen::Index i = 0; i < n; ++i) {
    phi += q[i];
    w += dq[i];
    wd += ddq[i];
    angle[i] = phi;
    omega[i] = w;
    alpha[i] = wd;
    ex[i] = std::sin(phi);
    ey[i] = -std::cos(phi);
    const double c = m.com[static_cast<std::size_t>(i)];
    const double l = m.length[static_cast<std::size_t>(i)];
    // a + alpha x r - omega^2 r, with alpha x r = alpha * (-r_y, r_x).
    acx[i] = ajx - wd * c * ey[i] - w * w * c * ex[i];
    acy[i] = ajy + wd * c * ex[i] - w * w * c * ey[i];
    ajx = ajx - wd * l * ey[i] - w * w * l * ex[i];
    ajy = ajy + wd * l * ex[i] - w * w * l * ey[i];
  }
  // ajx/ajy now hold the tip acceleration.
  double fx = m.payload * ajx;
  double fy = m.payload * (ajy + payload_gravity);
  double moment = 0.0;
  JointVector tau(n);
  for (Eigen::Index i = n - 1; i >= 0; --i) {
    const auto k = static_cast<std::size_t>(i);
    const double mi = m.mass[k];
    const double c = m.com[k];
    const double l = m.length[k];
    const double gx = mi * acx[i];
    const double gy = mi * (acy[i] + link_gravity);
    moment = m.inertia[k] * alpha[i] +
             cross2(c * ex[i], c * ey[i], gx, gy) +
             cross2(l * ex[i], l * ey[i], fx, fy) + moment;
    fx += gx;
    fy += gy;
    tau[i] = moment;
  }
  return tau;
}

}  // namespace detail

/// Rigid-body torque that produces `ddq` at (q, dq), friction excluded.
inline JointVector inverse_dynamics(const ArmModel& model, const JointVector& q,
                                    const JointVector& dq,
                                    const JointVector& ddq) {
  const std::size_t n = model.joints();
  detail::require_joints("inverse_dynamics q", q, n);
  detail::require_joints("inverse_dynamics dq", dq, n);
  detail::require_joints("inverse_dynamics ddq", ddq, n);
  const double link_g = model.gravity_compensated ? 0.0 : model.gravity;
  return detail::rnea(model, q, dq, ddq, link_g, model.gravity);
}

/// Joint-space inertia matrix, one inverse dynamics call per column.
inline Eigen::MatrixXd mass_matrix(const ArmModel& model, const JointVector& q) {
  const auto n = static_cast<Eigen::Index>(model.joints());
  detail::require_joints("mass_matrix q", q, model.joints());
  Eigen::MatrixXd mm(n, n);
  const JointVector zero = JointVector::Zero(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    mm.col(k) = detail::rnea(model, q, zero, JointVector::Unit(n, k), 0.0, 0.0);
  }
  return mm;
}

inline JointVector friction_torque(const ArmModel& model, const JointVector& dq) {
  const auto n = static_cast<Eigen::Index>(model.joints());
  JointVector f(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    f[i] = model.viscous[k] * dq[i] +
           model.coulomb[k] * std::tanh(dq[i] / model.coulomb_velocity_scale);
  }
  return f;
}

/// Joint accelerations under applied torque `tau`, friction included.
inline JointVector forward_dynamics(const ArmModel& model, const JointVector& q,
                                    const JointVector& dq,
                                    const JointVector& tau) {
  const auto n = static_cast<Eigen::Index>(model.joints());
  detail::require_joints("forward_dynamics q", q, model.joints());
  detail::require_joints("forward_dynamics dq", dq, model.joints());
  detail::require_joints("forward_dynamics tau", tau, model.joints());
  const JointVector bias = inverse_dynamics(model, q, dq, JointVector::Zero(n));
  const Eigen::LLT<Eigen::MatrixXd> llt(mass_matrix(model, q));
  if (llt.info() != Eigen::Success) {
    throw std::logic_error("forward_dynamics: mass matrix not positive definite");
  }
  return llt.solve(tau - bias - friction_torque(model, dq));
}

/// Semi-implicit Euler: velocity first, then position with the new velocity.
inline ArmState step(const ArmModel& model, const ArmState& state,
                     const JointVector& tau, double dt,
                     std::size_t step_index = 0) {
  if (!(dt > 0.0)) throw std::invalid_argument("step: dt must be positive");
  if (!tau.allFinite()) {
    throw std::invalid_argument("step: non-finite torque at step " +
                                std::to_string(step_index));
  }
  ArmState next;
  next.dq = state.dq + dt * forward_dynamics(model, state.q, state.dq, tau);
  next.q = state.q + dt * next.dq;
  if (!next.q.allFinite() || !next.dq.allFinite()) {
    throw SimulationDivergedError("step: simulation diverged", step_index);
  }
  return next;
}

/// PD feedback around a feedforward term: u_ff + Kp (q_d - q) + Kd (dq_d - dq).
inline JointVector pd_ff_control(const JointVector& q_d, const JointVector& dq_d,
                                 const JointVector& u_ff, const ArmState& state,
                                 const Gains& gains) {
  const auto n = static_cast<std::size_t>(state.q.size());
  detail::require_joints("pd_ff_control q_d", q_d, n);
  detail::require_joints("pd_ff_control dq_d", dq_d, n);
  detail::require_joints("pd_ff_control u_ff", u_ff, n);
  detail::require_joints("pd_ff_control dq", state.dq, n);
  detail::require_joints("pd_ff_control kp", gains.kp, n);
  detail::require_joints("pd_ff_control kd", gains.kd, n);
  return u_ff + gains.kp.cwiseProduct(q_d - state.q) +
         gains.kd.cwiseProduct(dq_d - state.dq);
}

/// q_d(t) = A sin(2 pi f t dt) + q_rest, sampled at t = 0 .. round(duration/dt).
inline RefTrajectory sine_trajectory(const JointVector& amplitude,
                                     double frequency, double dt,
                                     double duration,
                                     const JointVector& q_rest) {
  if (!(frequency > 0.0) || !(dt > 0.0) || !(duration >= 0.0)) {
    throw std::invalid_argument(
        "sine_trajectory: frequency and dt must be positive");
  }
  detail::require_joints("sine_trajectory q_rest", q_rest,
                         static_cast<std::size_t>(amplitude.size()));
  const auto steps = static_cast<std::size_t>(std::llround(duration / dt));
  const double w = 2.0 * std::numbers::pi * frequency;
  RefTrajectory traj;
  traj.dt = dt;
  for (std::size_t t = 0; t <= steps; ++t) {
    const double time = dt * static_cast<double>(t);
    const double s = std::sin(w * time);
    const double c = std::cos(w * time);
    traj.q.push_back(amplitude * s + q_rest);
    traj.dq.push_back(amplitude * (w * c));
    traj.ddq.push_back(amplitude * (-w * w * s));
  }
  return traj;
}

/// Minimum-jerk point-to-point move; zero velocity and acceleration at both
/// ends.
inline RefTrajectory min_jerk_trajectory(const JointVector& from,
                                         const JointVector& to,
                                         double duration, double dt) {
  if (!(duration > 0.0) || !(dt > 0.0)) {
    throw std::invalid_argument("min_jerk_trajectory: duration and dt must be positive");
  }
  detail::require_joints("min_jerk_trajectory to", to,
                         static_cast<std::size_t>(from.size()));
  const auto steps = static_cast<std::size_t>(std::llround(duration / dt));
  const JointVector delta = to - from;
  RefTrajectory traj;
  traj.dt = dt;
  for (std::size_t t = 0; t <= steps; ++t) {
    const double s = std::min(1.0, dt * static_cast<double>(t) / duration);
    const double s3 = s * s * s;
    const double pos = s3 * (10.0 - 15.0 * s + 6.0 * s * s);
    const double vel = 30.0 * s * s * (1.0 - s) * (1.0 - s) / duration;
    const double acc = 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) / (duration * duration);
    traj.q.push_back(from + pos * delta);
    traj.dq.push_back(vel * delta);
    traj.ddq.push_back(acc * delta);
  }
  return traj;
}

}  // namespace metaloss
