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

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "metaloss/arm.hpp"
#include "metaloss/autodiff.hpp"

namespace metaloss {

/// One sample (q_t, dq_t, ddq_{t+1}) -> tau_t.
struct DynRecord {
  std::vector<double> q;
  std::vector<double> dq;
  std::vector<double> ddq_next;
  std::vector<double> tau;

  bool operator==(const DynRecord&) const = default;
};

/// Time-contiguous records from one reference trajectory.
struct Run {
  double frequency = 0.0;
  std::vector<DynRecord> records;

  bool operator==(const Run&) const = default;
};

struct DynDataset {
  std::size_t joints = 0;
  double dt = 0.0;
  std::vector<Run> runs;

  std::size_t record_count() const {
    std::size_t n = 0;
    for (const Run& r : runs) n += r.records.size();
    return n;
  }

  bool operator==(const DynDataset&) const = default;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DatasetParseError : public DatasetError {
 public:
  DatasetParseError(const std::string& what, std::size_t line)
      : DatasetError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

namespace detail {

inline std::vector<double> to_std(const JointVector& v) {
  return {v.data(), v.data() + v.size()};
}

}  // namespace detail

/// Tracks `traj` with PD control (no feedforward) and records what a robot
/// would log: state, applied torque and the finite-differenced acceleration
/// of the next step. Gaussian noise of `noise_sigma` is added to the logged
/// torque only. `state` is the starting state and is left at the final
/// state, so consecutive calls continue one motion.
inline std::vector<DynRecord> collect_run(const ArmModel& model,
                                          const Gains& gains,
                                          const RefTrajectory& traj,
                                          double noise_sigma,
                                          std::mt19937_64& rng,
                                          ArmState& state) {
  model.validate();
  if (traj.size() < 2) {
    throw std::invalid_argument("collect_run: trajectory needs at least 2 samples");
  }
  if (!(noise_sigma >= 0.0)) {
    throw std::invalid_argument("collect_run: noise_sigma must be >= 0");
  }
  const auto n = static_cast<Eigen::Index>(model.joints());
  detail::require_joints("collect_run state q", state.q, model.joints());
  detail::require_joints("collect_run state dq", state.dq, model.joints());
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<DynRecord> records;
  records.reserve(traj.size() - 1);
  for (std::size_t t = 0; t + 1 < traj.size(); ++t) {
    const JointVector tau = pd_ff_control(traj.q[t], traj.dq[t],
                                          JointVector::Zero(n), state, gains);
    const ArmState next = step(model, state, tau, traj.dt, t);
    DynRecord rec;
    rec.q = detail::to_std(state.q);
    rec.dq = detail::to_std(state.dq);
    rec.ddq_next = detail::to_std((next.dq - state.dq) / traj.dt);
    rec.tau = detail::to_std(tau);
    if (noise_sigma > 0.0) {
      for (double& v : rec.tau) v += noise_sigma * noise(rng);
    }
    records.push_back(std::move(rec));
    state = next;
  }
  return records;
}

/// Same, starting on the first reference sample.
inline std::vector<DynRecord> collect_run(const ArmModel& model,
                                          const Gains& gains,
                                          const RefTrajectory& traj,
                                          double noise_sigma,
                                          std::mt19937_64& rng) {
  if (traj.size() == 0) {
    throw std::invalid_argument("collect_run: trajectory needs at least 2 samples");
  }
  ArmState state{traj.q.front(), traj.dq.front()};
  return collect_run(model, gains, traj, noise_sigma, rng, state);
}

namespace detail {

inline bool same_frequency(double a, double b) {
  return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(a));
}

inline bool listed(std::span<const double> list, double f) {
  for (double v : list) {
    if (same_frequency(v, f)) return true;
  }
  return false;
}

}  // namespace detail

/// Partitions runs by their frequency, preserving run order.
inline std::pair<DynDataset, DynDataset> split_by_frequency(
    const DynDataset& ds, std::span<const double> train_freqs,
    std::span<const double> test_freqs) {
  for (double f : train_freqs) {
    if (detail::listed(test_freqs, f)) {
      throw DatasetError("split_by_frequency: frequency " + std::to_string(f) +
                         " is assigned to both splits");
    }
  }
  DynDataset train{ds.joints, ds.dt, {}};
  DynDataset test{ds.joints, ds.dt, {}};
  for (const Run& run : ds.runs) {
    const bool in_train = detail::listed(train_freqs, run.frequency);
    const bool in_test = detail::listed(test_freqs, run.frequency);
    if (!in_train && !in_test) {
      throw DatasetError("split_by_frequency: frequency " +
                         std::to_string(run.frequency) + " is not assigned");
    }
    (in_train ? train : test).runs.push_back(run);
  }
  return {std::move(train), std::move(test)};
}

/// Location of a contiguous batch inside a dataset.
struct BatchRef {
  std::size_t run = 0;
  std::size_t start = 0;
  std::span<const DynRecord> records;
};

/// Uniformly random run (among those long enough), then a uniformly random
/// start; the batch never crosses a run boundary.
inline BatchRef sample_contiguous_batch(const DynDataset& ds, std::size_t k,
                                        std::mt19937_64& rng) {
  if (k == 0) throw std::invalid_argument("sample_contiguous_batch: K must be > 0");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < ds.runs.size(); ++i) {
    if (ds.runs[i].records.size() >= k) eligible.push_back(i);
  }
  if (eligible.empty()) {
    throw DatasetError("sample_contiguous_batch: no run has " +
                       std::to_string(k) + " records");
  }
  std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
  const std::size_t run = eligible[pick(rng)];
  const auto& records = ds.runs[run].records;
  std::uniform_int_distribution<std::size_t> start_dist(0, records.size() - k);
  const std::size_t start = start_dist(rng);
  return {run, start, std::span<const DynRecord>(records).subspan(start, k)};
}

/// Records stacked into B x J tensors.
struct Batch {
  Tensor q;
  Tensor dq;
  Tensor ddq;
  Tensor tau;

  std::size_t size() const { return q.rows(); }
  std::size_t joints() const { return q.cols(); }
};

inline Batch make_batch(std::span<const DynRecord> records) {
  if (records.empty()) throw std::invalid_argument("make_batch: empty batch");
  const std::size_t b = records.size();
  const std::size_t j = records.front().q.size();
  std::vector<double> q, dq, ddq, tau;
  q.reserve(b * j);
  dq.reserve(b * j);
  ddq.reserve(b * j);
  tau.reserve(b * j);
  for (const DynRecord& r : records) {
    if (r.q.size() != j || r.dq.size() != j || r.ddq_next.size() != j ||
        r.tau.size() != j) {
      throw ShapeError("make_batch: record with inconsistent joint count");
    }
    q.insert(q.end(), r.q.begin(), r.q.end());
    dq.insert(dq.end(), r.dq.begin(), r.dq.end());
    ddq.insert(ddq.end(), r.ddq_next.begin(), r.ddq_next.end());
    tau.insert(tau.end(), r.tau.begin(), r.tau.end());
  }
  return {Tensor({b, j}, std::move(q)), Tensor({b, j}, std::move(dq)),
          Tensor({b, j}, std::move(ddq)), Tensor({b, j}, std::move(tau))};
}

/// All records of a dataset as one batch.
inline Batch make_batch(const DynDataset& ds) {
  std::vector<DynRecord> all;
  all.reserve(ds.record_count());
  for (const Run& r : ds.runs) all.insert(all.end(), r.records.begin(), r.records.end());
  return make_batch(all);
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Shortest text that reads back to the same double (17 significant digits).
inline std::string format_double(double v) {
  char buf[32];
  const int n = std::snprintf(buf, sizeof buf, "%.17g", v);
  return std::string(buf, static_cast<std::size_t>(n));
}

inline std::string dataset_csv_header(std::size_t joints) {
  std::string h = "t,freq";
  for (const char* prefix : {"q_", "dq_", "ddqn_", "tau_"}) {
    for (std::size_t j = 0; j < joints; ++j) {
      h += ',';
      h += prefix;
      h += std::to_string(j);
    }
  }
  return h;
}

/// One row per record. `t` is the time in seconds since the start of the
/// run (index * dt), `freq` identifies the run.
inline void write_csv(const DynDataset& ds, std::ostream& out) {
  out << dataset_csv_header(ds.joints) << '\n';
  for (const Run& run : ds.runs) {
    const std::string freq = format_double(run.frequency);
    for (std::size_t t = 0; t < run.records.size(); ++t) {
      const DynRecord& r = run.records[t];
      out << format_double(static_cast<double>(t) * ds.dt) << ',' << freq;
      for (const auto* v : {&r.q, &r.dq, &r.ddq_next, &r.tau}) {
        for (double x : *v) out << ',' << format_double(x);
      }
      out << '\n';
    }
  }
}

inline void write_csv(const DynDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("write_csv: cannot open " + path);
  write_csv(ds, out);
  if (!out) throw DatasetError("write_csv: write failed for " + path);
}

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline double parse_double(std::string_view s, std::size_t line) {
  double v = 0.0;
  const auto* first = s.data();
  const auto* last = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw DatasetParseError("invalid number '" + std::string(s) + "'", line);
  }
  return v;
}

}  // namespace detail

/// Inverse of write_csv. A new run starts whenever `freq` changes or `t`
/// returns to zero; dt is recovered from the second row of a run.
inline DynDataset read_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw DatasetParseError("empty file", line_no);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_commas(line);
  if (header.size() < 6 || (header.size() - 2) % 4 != 0) {
    throw DatasetParseError("header has " + std::to_string(header.size()) +
                                " columns, expected 2 + 4J",
                            line_no);
  }
  const std::size_t joints = (header.size() - 2) / 4;
  if (line != dataset_csv_header(joints)) {
    throw DatasetParseError("unexpected header, expected '" +
                                dataset_csv_header(joints) + "'",
                            line_no);
  }

  struct Row {
    double t;
    double freq;
    DynRecord rec;
    std::size_t line;
  };
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_commas(line);
    if (cells.size() != header.size()) {
      throw DatasetParseError("expected " + std::to_string(header.size()) +
                                  " columns, got " + std::to_string(cells.size()),
                              line_no);
    }
    Row row{detail::parse_double(cells[0], line_no),
            detail::parse_double(cells[1], line_no), {}, line_no};
    std::size_t c = 2;
    for (auto* v : {&row.rec.q, &row.rec.dq, &row.rec.ddq_next, &row.rec.tau}) {
      v->reserve(joints);
      for (std::size_t j = 0; j < joints; ++j) {
        v->push_back(detail::parse_double(cells[c++], line_no));
      }
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DatasetParseError("no records", line_no);

  DynDataset ds;
  ds.joints = joints;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const bool fresh = i == 0 || rows[i].t == 0.0 || rows[i].freq != rows[i - 1].freq;
    if (fresh) {
      if (rows[i].t != 0.0) {
        throw DatasetParseError("run does not start at t = 0", rows[i].line);
      }
      ds.runs.push_back({rows[i].freq, {}});
    } else if (ds.runs.back().records.size() == 1 && ds.dt == 0.0) {
      ds.dt = rows[i].t;
    }
    ds.runs.back().records.push_back(std::move(rows[i].rec));
  }
  if (!(ds.dt > 0.0)) {
    throw DatasetParseError("cannot recover dt: every run has a single record",
                            line_no);
  }
  // Contiguity: row k of a run must sit exactly at k * dt.
  std::size_t row = 0;
  for (const Run& run : ds.runs) {
    for (std::size_t k = 0; k < run.records.size(); ++k, ++row) {
      if (rows[row].t != static_cast<double>(k) * ds.dt) {
        throw DatasetParseError("non-contiguous time stamp", rows[row].line);
      }
    }
  }
  return ds;
}

inline DynDataset read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("read_csv: cannot open " + path);
  return read_csv(in);
}

}  // namespace metaloss
