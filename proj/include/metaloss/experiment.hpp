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

// Experiment plumbing shared by the command-line tool and the acceptance
// run: configuration, data generation, manifests, and the CSV outputs of
// meta-training, evaluation and online adaptation.
//
// Manifests hash files the way `git hash-object` does, which needs OpenSSL's
// libcrypto at link time.

#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaloss/adapt.hpp"
#include "metaloss/arm.hpp"
#include "metaloss/dataset.hpp"
#include "metaloss/loss.hpp"
#include "metaloss/meta_train.hpp"
#include "metaloss/model.hpp"
#include "metaloss/training.hpp"

namespace metaloss {

/// Invalid configuration; the command line maps it to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct CollectionConfig {
  std::vector<double> frequencies{0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09};
  double dt = 1.0 / 240.0;
  double duration = 10.0;
  double amplitude = 0.5;
  double noise_sigma = 0.0;
  std::vector<double> train{0.01, 0.03, 0.05, 0.06, 0.07, 0.08};
  std::vector<double> test{0.02, 0.04, 0.09};
};

struct EvalConfig {
  std::size_t steps = 100;
  std::size_t seeds = 5;
  std::size_t batch_size = 256;
  double lr = 1e-3;
  std::size_t epoch_seeds = 1;  // evaluation seeds after every meta epoch, 0 disables
};

/// One row of the adaptation grid: a loss trained with an optimizer.
struct AdaptCell {
  LossVariant loss = LossVariant::mse;
  OptKind optimizer = OptKind::sgd;
  double lr = 1e-3;

  std::string label() const {
    std::string s = variant_name(loss);
    if (optimizer == OptKind::adam) s += "_adam";
    return s;
  }
  bool operator==(const AdaptCell&) const = default;
};

inline std::vector<AdaptCell> default_adapt_cells() {
  return {{LossVariant::mse, OptKind::sgd, 1e-3},
          {LossVariant::mse, OptKind::sgd, 1e-2},
          {LossVariant::mse, OptKind::adam, 1e-3},
          {LossVariant::mlp, OptKind::sgd, 1e-3},
          {LossVariant::structured, OptKind::sgd, 1e-3},
          {LossVariant::state_dependent, OptKind::sgd, 1e-3}};
}

struct AdaptConfig {
  std::vector<AdaptCell> cells = default_adapt_cells();
  std::size_t seeds = 5;
  std::size_t trials = 3;
  std::size_t batch = 5;
  // Task motions sized to the sine data: |q| <= 0.44 rad, peak |dq| ~0.3 rad/s.
  double segment_duration = 5.0;
  double scale = 0.4;
  double payload = 0.857;
  double perturbation = 0.04;
  std::size_t pretrain_steps = 3000;
  bool keep_going = false;  // record a diverged run instead of aborting the grid
};

struct ExperimentConfig {
  std::string name = "sim";
  std::uint64_t seed = 0;
  ArmModel arm = default_arm(3);
  Gains gains = default_gains(3);
  CollectionConfig collection;
  MetaConfig meta;
  EvalConfig eval;
  AdaptConfig adapt;
  std::string out_dir = "out";

  std::size_t joints() const { return arm.joints(); }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                           const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

inline JointVector to_joint_vector(const std::vector<double>& v) {
  return Eigen::Map<const JointVector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline std::vector<double> from_joint_vector(const JointVector& v) {
  return {v.data(), v.data() + v.size()};
}

inline bool contains_frequency(const std::vector<double>& list, double f) {
  return std::any_of(list.begin(), list.end(), [&](double g) { return same_frequency(f, g); });
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  try {
    c.arm.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("arm: ") + e.what());
  }
  const std::size_t n = c.joints();
  if (static_cast<std::size_t>(c.gains.kp.size()) != n ||
      static_cast<std::size_t>(c.gains.kd.size()) != n) {
    throw ConfigError("arm: kp and kd need one entry per joint");
  }
  const CollectionConfig& col = c.collection;
  if (col.frequencies.empty()) throw ConfigError("collection: no frequencies");
  for (std::size_t i = 0; i < col.frequencies.size(); ++i) {
    if (!(col.frequencies[i] > 0.0) || !std::isfinite(col.frequencies[i])) {
      throw ConfigError("collection: frequencies must be positive");
    }
    for (std::size_t k = 0; k < i; ++k) {
      if (detail::same_frequency(col.frequencies[i], col.frequencies[k])) {
        throw ConfigError("collection: duplicate frequency " + format_double(col.frequencies[i]));
      }
    }
  }
  if (!(col.dt > 0.0) || !(col.duration > 0.0) || !std::isfinite(col.amplitude) ||
      !(col.noise_sigma >= 0.0)) {
    throw ConfigError("collection: dt and duration must be positive, noise_sigma >= 0");
  }
  if (col.train.empty() || col.test.empty()) {
    throw ConfigError("split: train and test need at least one frequency each");
  }
  for (double f : col.train) {
    if (!detail::contains_frequency(col.frequencies, f)) {
      throw ConfigError("split: train frequency " + format_double(f) + " is not collected");
    }
    if (detail::contains_frequency(col.test, f)) {
      throw ConfigError("split: frequency " + format_double(f) + " is in both train and test");
    }
  }
  for (double f : col.test) {
    if (!detail::contains_frequency(col.frequencies, f)) {
      throw ConfigError("split: test frequency " + format_double(f) + " is not collected");
    }
  }
  for (double f : col.frequencies) {
    if (!detail::contains_frequency(col.train, f) && !detail::contains_frequency(col.test, f)) {
      throw ConfigError("split: frequency " + format_double(f) + " is in neither split");
    }
  }
  try {
    c.meta.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (c.eval.steps == 0 || c.eval.seeds == 0 || c.eval.batch_size == 0 || !(c.eval.lr > 0.0)) {
    throw ConfigError("eval: steps, seeds, batch_size and lr must be positive");
  }
  const AdaptConfig& a = c.adapt;
  if (a.seeds == 0 || a.trials == 0 || a.batch == 0 || !(a.segment_duration > 0.0) ||
      !(a.scale > 0.0) || !(a.payload >= 0.0) || !(a.perturbation >= 0.0)) {
    throw ConfigError("adapt: seeds, trials, batch, segment_duration and scale must be positive");
  }
  for (const AdaptCell& cell : a.cells) {
    if (!(cell.lr > 0.0) || !std::isfinite(cell.lr)) throw ConfigError("adapt: lr must be positive");
  }
  if (c.out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::reject_unknown(j, {"name", "seed", "arm", "collection", "meta", "eval", "adapt", "out_dir"},
                         "config");
  detail::read(j, "name", c.name, "config");
  detail::read(j, "seed", c.seed, "config");
  detail::read(j, "out_dir", c.out_dir, "config");

  if (j.contains("arm")) {
    const auto& a = j.at("arm");
    detail::reject_unknown(a,
                           {"joints", "mass", "length", "com", "inertia", "gravity", "viscous",
                            "coulomb", "coulomb_velocity_scale", "payload", "gravity_compensated",
                            "kp", "kd"},
                           "arm");
    std::size_t joints = 3;
    detail::read(a, "joints", joints, "arm");
    if (joints == 0) throw ConfigError("arm.joints must be positive");
    c.arm = default_arm(joints);
    c.gains = default_gains(joints);
    detail::read(a, "mass", c.arm.mass, "arm");
    detail::read(a, "length", c.arm.length, "arm");
    detail::read(a, "com", c.arm.com, "arm");
    detail::read(a, "inertia", c.arm.inertia, "arm");
    detail::read(a, "gravity", c.arm.gravity, "arm");
    detail::read(a, "viscous", c.arm.viscous, "arm");
    detail::read(a, "coulomb", c.arm.coulomb, "arm");
    detail::read(a, "coulomb_velocity_scale", c.arm.coulomb_velocity_scale, "arm");
    detail::read(a, "payload", c.arm.payload, "arm");
    detail::read(a, "gravity_compensated", c.arm.gravity_compensated, "arm");
    std::vector<double> kp = detail::from_joint_vector(c.gains.kp);
    std::vector<double> kd = detail::from_joint_vector(c.gains.kd);
    detail::read(a, "kp", kp, "arm");
    detail::read(a, "kd", kd, "arm");
    c.gains.kp = detail::to_joint_vector(kp);
    c.gains.kd = detail::to_joint_vector(kd);
  }
  if (j.contains("collection")) {
    const auto& s = j.at("collection");
    detail::reject_unknown(
        s, {"frequencies", "dt", "duration", "amplitude", "noise_sigma", "train", "test"},
        "collection");
    detail::read(s, "frequencies", c.collection.frequencies, "collection");
    detail::read(s, "dt", c.collection.dt, "collection");
    detail::read(s, "duration", c.collection.duration, "collection");
    detail::read(s, "amplitude", c.collection.amplitude, "collection");
    detail::read(s, "noise_sigma", c.collection.noise_sigma, "collection");
    detail::read(s, "train", c.collection.train, "collection");
    detail::read(s, "test", c.collection.test, "collection");
  }
  if (j.contains("meta")) {
    const auto& m = j.at("meta");
    detail::reject_unknown(m,
                           {"epochs", "batches_per_epoch", "batch_size", "alpha", "eta",
                            "iters_max", "hidden", "resample_halves", "unroll",
                            "divergence_threshold", "normalize_inputs"},
                           "meta");
    detail::read(m, "epochs", c.meta.epochs, "meta");
    detail::read(m, "batches_per_epoch", c.meta.batches_per_epoch, "meta");
    detail::read(m, "batch_size", c.meta.batch_size, "meta");
    detail::read(m, "alpha", c.meta.alpha, "meta");
    detail::read(m, "eta", c.meta.eta, "meta");
    detail::read(m, "iters_max", c.meta.iters_max, "meta");
    detail::read(m, "hidden", c.meta.hidden, "meta");
    detail::read(m, "resample_halves", c.meta.resample_halves, "meta");
    detail::read(m, "divergence_threshold", c.meta.divergence_threshold, "meta");
    detail::read(m, "normalize_inputs", c.meta.normalize_inputs, "meta");
    std::string unroll = "full";
    detail::read(m, "unroll", unroll, "meta");
    if (unroll == "full") {
      c.meta.unroll = Unroll::full;
    } else if (unroll == "last_step") {
      c.meta.unroll = Unroll::last_step;
    } else {
      throw ConfigError("meta.unroll must be 'full' or 'last_step'");
    }
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::reject_unknown(e, {"steps", "seeds", "batch_size", "lr", "epoch_seeds"}, "eval");
    detail::read(e, "steps", c.eval.steps, "eval");
    detail::read(e, "seeds", c.eval.seeds, "eval");
    detail::read(e, "batch_size", c.eval.batch_size, "eval");
    detail::read(e, "lr", c.eval.lr, "eval");
    detail::read(e, "epoch_seeds", c.eval.epoch_seeds, "eval");
  }
  if (j.contains("adapt")) {
    const auto& a = j.at("adapt");
    detail::reject_unknown(a,
                           {"cells", "seeds", "trials", "batch", "segment_duration", "scale",
                            "payload", "perturbation", "pretrain_steps", "keep_going"},
                           "adapt");
    detail::read(a, "seeds", c.adapt.seeds, "adapt");
    detail::read(a, "trials", c.adapt.trials, "adapt");
    detail::read(a, "batch", c.adapt.batch, "adapt");
    detail::read(a, "segment_duration", c.adapt.segment_duration, "adapt");
    detail::read(a, "scale", c.adapt.scale, "adapt");
    detail::read(a, "payload", c.adapt.payload, "adapt");
    detail::read(a, "perturbation", c.adapt.perturbation, "adapt");
    detail::read(a, "pretrain_steps", c.adapt.pretrain_steps, "adapt");
    detail::read(a, "keep_going", c.adapt.keep_going, "adapt");
    if (a.contains("cells")) {
      if (!a.at("cells").is_array()) throw ConfigError("adapt.cells must be an array");
      c.adapt.cells.clear();
      for (const auto& cj : a.at("cells")) {
        detail::reject_unknown(cj, {"loss", "optimizer", "lr"}, "adapt.cells");
        AdaptCell cell;
        std::string loss = "mse", opt = "sgd";
        detail::read(cj, "loss", loss, "adapt.cells");
        detail::read(cj, "optimizer", opt, "adapt.cells");
        detail::read(cj, "lr", cell.lr, "adapt.cells");
        try {
          cell.loss = parse_variant(loss);
        } catch (const std::invalid_argument& e) {
          throw ConfigError(std::string("adapt.cells: ") + e.what());
        }
        if (opt == "sgd") {
          cell.optimizer = OptKind::sgd;
        } else if (opt == "adam") {
          cell.optimizer = OptKind::adam;
        } else {
          throw ConfigError("adapt.cells: optimizer must be 'sgd' or 'adam'");
        }
        c.adapt.cells.push_back(cell);
      }
    }
  }
  validate(c);
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

/// Fully expanded configuration, suitable for echoing into manifests.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json cells = nlohmann::json::array();
  for (const AdaptCell& cell : c.adapt.cells) {
    cells.push_back({{"loss", variant_name(cell.loss)},
                     {"optimizer", cell.optimizer == OptKind::adam ? "adam" : "sgd"},
                     {"lr", cell.lr}});
  }
  return {
      {"name", c.name},
      {"seed", c.seed},
      {"out_dir", c.out_dir},
      {"arm",
       {{"joints", c.joints()},
        {"mass", c.arm.mass},
        {"length", c.arm.length},
        {"com", c.arm.com},
        {"inertia", c.arm.inertia},
        {"gravity", c.arm.gravity},
        {"viscous", c.arm.viscous},
        {"coulomb", c.arm.coulomb},
        {"coulomb_velocity_scale", c.arm.coulomb_velocity_scale},
        {"payload", c.arm.payload},
        {"gravity_compensated", c.arm.gravity_compensated},
        {"kp", detail::from_joint_vector(c.gains.kp)},
        {"kd", detail::from_joint_vector(c.gains.kd)}}},
      {"collection",
       {{"frequencies", c.collection.frequencies},
        {"dt", c.collection.dt},
        {"duration", c.collection.duration},
        {"amplitude", c.collection.amplitude},
        {"noise_sigma", c.collection.noise_sigma},
        {"train", c.collection.train},
        {"test", c.collection.test}}},
      {"meta",
       {{"epochs", c.meta.epochs},
        {"batches_per_epoch", c.meta.batches_per_epoch},
        {"batch_size", c.meta.batch_size},
        {"alpha", c.meta.alpha},
        {"eta", c.meta.eta},
        {"iters_max", c.meta.iters_max},
        {"hidden", c.meta.hidden},
        {"resample_halves", c.meta.resample_halves},
        {"unroll", c.meta.unroll == Unroll::full ? "full" : "last_step"},
        {"divergence_threshold", c.meta.divergence_threshold},
        {"normalize_inputs", c.meta.normalize_inputs}}},
      {"eval",
       {{"steps", c.eval.steps},
        {"seeds", c.eval.seeds},
        {"batch_size", c.eval.batch_size},
        {"lr", c.eval.lr},
        {"epoch_seeds", c.eval.epoch_seeds}}},
      {"adapt",
       {{"cells", cells},
        {"seeds", c.adapt.seeds},
        {"trials", c.adapt.trials},
        {"batch", c.adapt.batch},
        {"segment_duration", c.adapt.segment_duration},
        {"scale", c.adapt.scale},
        {"payload", c.adapt.payload},
        {"perturbation", c.adapt.perturbation},
        {"pretrain_steps", c.adapt.pretrain_steps},
        {"keep_going", c.adapt.keep_going}}}};
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

inline DynDataset generate_dataset(const ExperimentConfig& c) {
  const CollectionConfig& col = c.collection;
  const auto n = static_cast<Eigen::Index>(c.joints());
  std::mt19937_64 rng(c.seed);
  DynDataset ds{c.joints(), col.dt, {}};
  for (double f : col.frequencies) {
    const RefTrajectory tr = sine_trajectory(JointVector::Constant(n, col.amplitude), f, col.dt,
                                             col.duration, JointVector::Zero(n));
    ds.runs.push_back({f, collect_run(c.arm, c.gains, tr, col.noise_sigma, rng)});
  }
  return ds;
}

inline std::pair<DynDataset, DynDataset> split(const ExperimentConfig& c, const DynDataset& ds) {
  if (ds.joints != c.joints()) {
    throw ConfigError("dataset has " + std::to_string(ds.joints) + " joints, config " +
                      std::to_string(c.joints()));
  }
  try {
    return split_by_frequency(ds, c.collection.train, c.collection.test);
  } catch (const DatasetError& e) {
    throw ConfigError(e.what());
  }
}

// ---------------------------------------------------------------------------
// Files and manifests
// ---------------------------------------------------------------------------

/// SHA-1 of "blob <size>\0<content>", the id git assigns to a file.
inline std::string git_blob_sha1(std::string_view content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr) throw std::runtime_error("git_blob_sha1: out of memory");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("git_blob_sha1: digest failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex += kHex[digest[i] >> 4];
    hex += kHex[digest[i] & 0xf];
  }
  return hex;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("write failed for " + path);
}

/// Inputs are listed by file name and content hash only, so that manifests
/// do not depend on where a run was started from.
inline nlohmann::json make_manifest(const std::string& command, const ExperimentConfig& c,
                                    const std::vector<std::string>& inputs,
                                    const std::string& out_dir,
                                    const std::vector<std::string>& outputs) {
  nlohmann::json in = nlohmann::json::array(), out = nlohmann::json::array();
  for (const std::string& p : inputs) {
    in.push_back({{"file", std::filesystem::path(p).filename().string()},
                  {"git_sha1", git_blob_sha1(read_file(p))}});
  }
  for (const std::string& name : outputs) {
    out.push_back({{"file", name},
                   {"git_sha1", git_blob_sha1(read_file((std::filesystem::path(out_dir) / name).string()))}});
  }
  return {{"command", command}, {"seed", c.seed}, {"inputs", in}, {"outputs", out},
          {"config", to_json(c)}};
}

// ---------------------------------------------------------------------------
// Meta-training with per-epoch evaluation
// ---------------------------------------------------------------------------

struct EpochEvalRow {
  std::size_t epoch = 0;
  std::string variant;
  std::size_t seed = 0;
  std::string split;
  double final_mse = 0.0;
};

inline constexpr const char* kEpochCsvHeader = "epoch,variant,seed,split,final_mse_after_100_steps";

inline std::string to_csv(const EpochEvalRow& r) {
  return std::to_string(r.epoch) + "," + r.variant + "," + std::to_string(r.seed) + "," + r.split +
         "," + format_double(r.final_mse);
}

inline constexpr const char* kOuterCsvHeader =
    "epoch,variant,mean_first_outer,mean_last_outer,max_outer";

inline std::string to_csv(const EpochLog& l, LossVariant v) {
  return std::to_string(l.epoch) + "," + variant_name(v) + "," + format_double(l.mean_first_outer) +
         "," + format_double(l.mean_last_outer) + "," + format_double(l.max_outer);
}

inline EvalOptions eval_options(const ExperimentConfig& c, std::size_t seeds,
                                const std::optional<InputNorm>& norm) {
  EvalOptions o;
  o.steps = c.eval.steps;
  o.seeds = seeds;
  o.batch_size = c.eval.batch_size;
  o.lr = c.eval.lr;
  o.hidden = c.meta.hidden;
  o.input_norm = norm;
  o.seed = c.seed;
  return o;
}

inline std::optional<InputNorm> input_norm_for(const ExperimentConfig& c, const DynDataset& train) {
  if (!c.meta.normalize_inputs) return std::nullopt;
  return fit_input_norm(train);
}

/// Rows are handed to `on_row` as soon as an epoch is evaluated, so that
/// partial logs survive a divergence.
inline MetaTrainResult run_meta_training(
    const ExperimentConfig& c, LossVariant variant, const DynDataset& train,
    const DynDataset& test, const std::function<void(const EpochEvalRow&)>& on_row,
    const std::function<void(const EpochLog&)>& on_epoch = {}) {
  MetaConfig mc = c.meta;
  mc.variant = variant;
  mc.seed = c.seed;
  const std::optional<InputNorm> norm = input_norm_for(c, train);
  const EvalOptions eo = eval_options(c, c.eval.epoch_seeds, norm);
  return meta_train(mc, train, [&](const EpochLog& log, const LossParams& loss) {
    if (on_epoch) on_epoch(log);
    if (c.eval.epoch_seeds == 0) return;
    for (const auto& [name, ds] : {std::pair<const char*, const DynDataset*>{"train", &train},
                                   {"test", &test}}) {
      const EvalResult r = eval_learned_loss(loss, *ds, eo);
      for (std::size_t s = 0; s < r.final_mse.size(); ++s) {
        on_row({log.epoch, variant_name(variant), s, name, r.final_mse[s]});
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Evaluation curves
// ---------------------------------------------------------------------------

inline std::string curve_csv(const EvalResult& r) {
  std::string s = "step";
  for (std::size_t k = 0; k < r.curves.size(); ++k) s += ",seed_" + std::to_string(k);
  s += ",mean,std\n";
  for (std::size_t t = 0; t < r.mean_curve.size(); ++t) {
    s += std::to_string(t);
    for (const auto& c : r.curves) s += "," + format_double(c[t]);
    s += "," + format_double(r.mean_curve[t]) + "," + format_double(r.std_curve[t]) + "\n";
  }
  return s;
}

inline constexpr const char* kFinalCsvHeader = "loss,split,seed,final_mse";

// ---------------------------------------------------------------------------
// Online adaptation grid
// ---------------------------------------------------------------------------

struct OnlineRow {
  std::string segment;
  std::string loss;
  double lr = 0.0;
  std::size_t seed = 0;
  std::size_t trial = 0;
  std::size_t step = 0;
  double batch_mse = 0.0;
};

inline constexpr const char* kOnlineCsvHeader = "segment,loss,lr,seed,trial,step,batch_mse";
inline constexpr const char* kFrozenLabel = "pretrained_frozen";

inline std::string to_csv(const OnlineRow& r) {
  return r.segment + "," + r.loss + "," + format_double(r.lr) + "," + std::to_string(r.seed) + "," +
         std::to_string(r.trial) + "," + std::to_string(r.step) + "," + format_double(r.batch_mse);
}

/// Per (segment, loss, lr): mean and std over the finished (seed, trial) runs
/// of the segment's mean streaming MSE. Diverged runs are only counted.
struct SummaryRow {
  std::string segment;
  std::string loss;
  double lr = 0.0;
  double mean = 0.0;
  double std = 0.0;
  std::size_t runs = 0;
  std::size_t diverged = 0;
};

inline constexpr const char* kSummaryCsvHeader = "segment,loss,lr,mean,std,runs,diverged";

inline std::string to_csv(const SummaryRow& r) {
  return r.segment + "," + r.loss + "," + format_double(r.lr) + "," + format_double(r.mean) + "," +
         format_double(r.std) + "," + std::to_string(r.runs) + "," + std::to_string(r.diverged);
}

struct OnlineResult {
  std::vector<std::string> segments;  // in task order
  std::vector<OnlineRow> rows;
  std::vector<SummaryRow> summary;
  // run_means[{loss label, lr}][segment][(seed, trial) run] for the adapted
  // cells; +inf from the segment where a run diverged onwards
  std::map<std::pair<std::string, double>, std::vector<std::vector<double>>> run_means;
  std::vector<std::vector<double>> frozen_means;  // [segment][trial]
  std::vector<std::string> divergences;           // one message per diverged run
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9e3779b97f4a7c15ULL + b + 0x632be59bd9b4e019ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Segment names and record streams of one trial.
struct TrialStreams {
  std::vector<std::string> names;
  std::vector<std::vector<DynRecord>> streams;
};

inline TrialStreams segmented_trial(const ExperimentConfig& c, std::size_t trial) {
  TaskOptions opt;
  opt.dt = c.collection.dt;
  opt.segment_duration = c.adapt.segment_duration;
  opt.payload = c.adapt.payload;
  opt.perturbation = c.adapt.perturbation;
  opt.scale = c.adapt.scale;
  const auto segs = pick_and_place_segments(c.joints(), opt, mix_seed(c.seed, 100 + trial));
  std::mt19937_64 rng(mix_seed(c.seed, 200 + trial));
  TrialStreams t;
  for (const Segment& s : segs) t.names.push_back(s.name);
  t.streams = simulate_task(c.arm, c.gains, segs, c.collection.noise_sigma, rng);
  return t;
}

/// The held-out runs streamed in order, one segment per run.
inline TrialStreams test_stream(const DynDataset& test) {
  TrialStreams t;
  for (const metaloss::Run& r : test.runs) {
    t.names.push_back("f" + format_double(r.frequency));
    t.streams.push_back(r.records);
  }
  return t;
}

inline void summarize(OnlineResult& res, const std::vector<AdaptCell>& cells) {
  auto row = [](const std::string& segment, const std::string& loss, double lr,
                const std::vector<double>& all) {
    std::vector<double> v;
    for (double x : all) {
      if (std::isfinite(x)) v.push_back(x);
    }
    SummaryRow r{segment, loss, lr, std::numeric_limits<double>::infinity(), 0.0, v.size(),
                 all.size() - v.size()};
    if (v.empty()) return r;
    double m = 0.0, sq = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double x : v) sq += (x - m) * (x - m);
    r.mean = m;
    r.std = std::sqrt(sq / static_cast<double>(v.size()));
    return r;
  };
  for (std::size_t k = 0; k < res.segments.size(); ++k) {
    for (const AdaptCell& cell : cells) {
      res.summary.push_back(
          row(res.segments[k], cell.label(), cell.lr, res.run_means.at({cell.label(), cell.lr})[k]));
    }
    res.summary.push_back(row(res.segments[k], kFrozenLabel, 0.0, res.frozen_means[k]));
  }
}

/// Runs every adaptation cell for every (seed, trial). Learned losses are
/// looked up by variant in `losses`. The frozen model is evaluated once per
/// trial. A diverged run aborts the grid unless `adapt.keep_going` is set.
inline OnlineResult run_online(const ExperimentConfig& c,
                               const std::map<LossVariant, LossParams>& losses,
                               const DynDataset& train, const DynDataset& test, bool segmented) {
  OnlineResult res;
  const std::optional<InputNorm> norm = input_norm_for(c, train);
  const ModelParams frozen = pretrain_frozen_baseline(
      train, c.adapt.pretrain_steps, mix_seed(c.seed, 7), c.meta.hidden, c.meta.batch_size, 1e-3, norm);
  const std::size_t trials = segmented ? c.adapt.trials : 1;
  for (const AdaptCell& cell : c.adapt.cells) {
    if (cell.loss != LossVariant::mse && !losses.contains(cell.loss)) {
      throw CheckpointError(std::string("online: no checkpoint for ") + variant_name(cell.loss));
    }
  }
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const TrialStreams data = segmented ? segmented_trial(c, trial) : test_stream(test);
    if (trial == 0) {
      res.segments = data.names;
      res.frozen_means.assign(data.names.size(), {});
    }
    const TaskReport fr = run_frozen_task(frozen, data.streams, c.adapt.batch);
    for (std::size_t k = 0; k < data.names.size(); ++k) {
      res.frozen_means[k].push_back(fr.segments[k].mean);
      for (std::size_t t = 0; t < fr.segments[k].batch_mse.size(); ++t) {
        res.rows.push_back({data.names[k], kFrozenLabel, 0.0, 0, trial, t,
                            fr.segments[k].batch_mse[t]});
      }
    }
    for (std::size_t seed = 0; seed < c.adapt.seeds; ++seed) {
      ModelParams theta0 = init_model(c.joints(), c.meta.hidden, mix_seed(mix_seed(c.seed, seed), trial));
      theta0.input_norm = norm;
      for (const AdaptCell& cell : c.adapt.cells) {
        const LossParams loss =
            cell.loss == LossVariant::mse ? init_loss(LossVariant::mse, c.joints(), 0) : losses.at(cell.loss);
        const OptState opt = cell.optimizer == OptKind::adam ? make_adam(cell.lr) : make_sgd(cell.lr);
        auto& means = res.run_means[{cell.label(), cell.lr}];
        means.resize(data.names.size());
        ModelParams model = theta0;
        OptState state = opt;
        bool diverged = false;
        for (std::size_t k = 0; k < data.names.size(); ++k) {
          if (diverged) {
            means[k].push_back(std::numeric_limits<double>::infinity());
            continue;
          }
          AdaptReport r;
          try {
            r = online_adapt(model, loss, state, data.streams[k], c.adapt.batch);
          } catch (const AdaptationDivergedError& e) {
            if (!c.adapt.keep_going) throw;
            diverged = true;
            means[k].push_back(std::numeric_limits<double>::infinity());
            res.divergences.push_back(cell.label() + "@" + format_double(cell.lr) + " seed " +
                                      std::to_string(seed) + " trial " + std::to_string(trial) +
                                      " segment " + data.names[k] + ": " + e.what());
            continue;
          }
          means[k].push_back(r.mean);
          for (std::size_t t = 0; t < r.batch_mse.size(); ++t) {
            res.rows.push_back({data.names[k], cell.label(), cell.lr, seed, trial, t, r.batch_mse[t]});
          }
        }
      }
    }
  }
  summarize(res, c.adapt.cells);
  return res;
}

}  // namespace metaloss
