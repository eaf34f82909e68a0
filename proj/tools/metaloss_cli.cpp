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

// metaloss: data generation, meta-training, evaluation, online adaptation
// and reporting.
//
// Exit codes: 0 success, 1 runtime failure (I/O, divergence, missing
// checkpoints), 2 invalid configuration or usage.

#include <malloc.h>

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "metaloss/experiment.hpp"

namespace fs = std::filesystem;
using namespace metaloss;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
  std::string phi;
  std::string variant = "all";
  bool segmented = false;
  bool keep_going = false;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

ExperimentConfig resolve_config(const Options& o, bool required = true) {
  ExperimentConfig c;
  if (!o.config.empty()) {
    c = load_config(o.config);
  } else if (required) {
    throw UsageError("--config is required");
  }
  if (o.seed) c.seed = *o.seed;
  return c;
}

std::string resolve_out(const Options& o, const ExperimentConfig& c) {
  std::string dir = o.out;
  if (dir.empty()) {
    if (const char* env = std::getenv("METALOSS_OUT"); env != nullptr && *env != '\0') {
      dir = env;
    } else {
      dir = c.out_dir;
    }
  }
  fs::create_directories(dir);
  return dir;
}

std::string in_dir(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

std::string data_path(const Options& o, const std::string& out) {
  return o.data.empty() ? in_dir(out, "dataset.csv") : o.data;
}

std::vector<LossVariant> learned_variants(const std::string& v) {
  if (v == "all") return {LossVariant::structured, LossVariant::state_dependent, LossVariant::mlp};
  const LossVariant parsed = parse_variant(v);
  if (parsed == LossVariant::mse) throw UsageError("--variant mse has nothing to learn");
  return {parsed};
}

void finish(const std::string& command, const ExperimentConfig& c,
            const std::vector<std::string>& inputs, const std::string& out,
            const std::vector<std::string>& outputs) {
  const std::string name = "manifest_" + command + ".json";
  save_json(make_manifest(command, c, inputs, out, outputs), in_dir(out, name));
  std::cerr << command << ": wrote " << outputs.size() << " files and " << name << " to " << out
            << "\n";
}

int cmd_gen_data(const Options& o) {
  const ExperimentConfig c = resolve_config(o);
  const std::string out = resolve_out(o, c);
  const DynDataset ds = generate_dataset(c);
  const auto [train, test] = split(c, ds);
  write_csv(ds, in_dir(out, "dataset.csv"));
  nlohmann::json runs = nlohmann::json::array();
  for (const metaloss::Run& r : ds.runs) {
    runs.push_back({{"frequency", r.frequency}, {"records", r.records.size()}});
  }
  save_json({{"train", c.collection.train}, {"test", c.collection.test}, {"runs", runs},
             {"dt", ds.dt}, {"joints", ds.joints}},
            in_dir(out, "split.json"));
  finish("gen-data", c, {}, out, {"dataset.csv", "split.json"});
  return 0;
}

int cmd_meta_train(const Options& o) {
  const ExperimentConfig c = resolve_config(o);
  const std::string out = resolve_out(o, c);
  const std::vector<LossVariant> variants = learned_variants(o.variant);
  const std::string data = data_path(o, out);
  const auto [train, test] = split(c, read_csv(data));

  std::ofstream epochs(in_dir(out, "meta_epochs.csv"), std::ios::binary);
  std::ofstream outer(in_dir(out, "meta_outer.csv"), std::ios::binary);
  if (!epochs || !outer) throw IoError("cannot write meta-training logs in " + out);
  epochs << kEpochCsvHeader << '\n';
  outer << kOuterCsvHeader << '\n';
  std::vector<std::string> outputs{"meta_epochs.csv", "meta_outer.csv"};
  int status = 0;
  for (LossVariant v : variants) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const MetaTrainResult r = run_meta_training(
          c, v, train, test,
          [&](const EpochEvalRow& row) { epochs << to_csv(row) << '\n' << std::flush; },
          [&](const EpochLog& log) {
            outer << to_csv(log, v) << '\n' << std::flush;
            std::cerr << variant_name(v) << " epoch " << log.epoch << "/" << c.meta.epochs
                      << " outer " << log.mean_last_outer << "\n";
          });
      const std::string name = std::string("phi_") + variant_name(v) + ".json";
      save_json(to_json(r.loss), in_dir(out, name));
      outputs.push_back(name);
    } catch (const MetaDivergenceError& e) {
      std::cerr << "meta-train " << variant_name(v) << ": " << e.what() << "\n";
      status = 1;
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << variant_name(v) << ": " << secs << " s\n";
  }
  epochs.close();
  outer.close();
  finish("meta-train", c, {data}, out, outputs);
  return status;
}

std::map<LossVariant, LossParams> load_losses(const std::string& dir,
                                              const std::vector<LossVariant>& variants,
                                              std::size_t joints, std::vector<std::string>& inputs) {
  std::map<LossVariant, LossParams> out;
  for (LossVariant v : variants) {
    const std::string path = in_dir(dir, std::string("phi_") + variant_name(v) + ".json");
    if (!fs::exists(path)) throw CheckpointError("missing checkpoint " + path);
    LossParams p = loss_from_json(load_json(path));
    if (p.variant != v || p.joints != joints) {
      throw CheckpointError(path + " does not hold a " + std::to_string(joints) + "-joint " +
                            variant_name(v) + " loss");
    }
    out.emplace(v, std::move(p));
    inputs.push_back(path);
  }
  return out;
}

int cmd_eval(const Options& o) {
  const ExperimentConfig c = resolve_config(o);
  const std::string out = resolve_out(o, c);
  const std::string data = data_path(o, out);
  const auto [train, test] = split(c, read_csv(data));
  std::vector<std::string> inputs{data};
  const auto losses = load_losses(o.phi.empty() ? out : o.phi, learned_variants(o.variant),
                                  c.joints(), inputs);
  std::vector<LossParams> all{init_loss(LossVariant::mse, c.joints(), 0)};
  for (const auto& [v, p] : losses) all.push_back(p);

  const EvalOptions eo = eval_options(c, c.eval.seeds, input_norm_for(c, train));
  std::vector<std::string> outputs;
  std::string finals = std::string(kFinalCsvHeader) + "\n";
  for (const LossParams& loss : all) {
    for (const auto& [name, ds] : {std::pair<const char*, const DynDataset*>{"train", &train},
                                   {"test", &test}}) {
      const EvalResult r = eval_learned_loss(loss, *ds, eo);
      const std::string file =
          std::string("curves_") + variant_name(loss.variant) + "_" + name + ".csv";
      write_file(in_dir(out, file), curve_csv(r));
      outputs.push_back(file);
      for (std::size_t s = 0; s < r.final_mse.size(); ++s) {
        finals += std::string(variant_name(loss.variant)) + "," + name + "," + std::to_string(s) +
                  "," + format_double(r.final_mse[s]) + "\n";
      }
    }
  }
  write_file(in_dir(out, "eval_final.csv"), finals);
  outputs.push_back("eval_final.csv");
  finish("eval", c, inputs, out, outputs);
  return 0;
}

int cmd_online(const Options& o) {
  ExperimentConfig c = resolve_config(o);
  if (o.keep_going) c.adapt.keep_going = true;
  const std::string out = resolve_out(o, c);
  const std::string data = data_path(o, out);
  const auto [train, test] = split(c, read_csv(data));
  std::vector<LossVariant> needed;
  for (const AdaptCell& cell : c.adapt.cells) {
    if (cell.loss != LossVariant::mse &&
        std::find(needed.begin(), needed.end(), cell.loss) == needed.end()) {
      needed.push_back(cell.loss);
    }
  }
  std::vector<std::string> inputs{data};
  const auto losses = load_losses(o.phi.empty() ? out : o.phi, needed, c.joints(), inputs);
  const OnlineResult r = run_online(c, losses, train, test, o.segmented);
  for (const std::string& d : r.divergences) std::cerr << "online: diverged: " << d << "\n";

  const std::string prefix = o.segmented ? "segmented_" : "online_";
  std::string report = std::string(kOnlineCsvHeader) + "\n";
  for (const OnlineRow& row : r.rows) report += to_csv(row) + "\n";
  std::string summary = std::string(kSummaryCsvHeader) + "\n";
  for (const SummaryRow& row : r.summary) summary += to_csv(row) + "\n";
  write_file(in_dir(out, prefix + "report.csv"), report);
  write_file(in_dir(out, prefix + "summary.csv"), summary);
  finish(o.segmented ? "online-segmented" : "online", c, inputs, out,
         {prefix + "report.csv", prefix + "summary.csv"});
  return 0;
}

std::vector<std::vector<std::string>> read_rows(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

/// Probe states on the sine-motion manifold: 24 phases per collected
/// frequency, all joints moving together.
std::vector<std::pair<std::vector<double>, std::vector<double>>> probe_states(
    const ExperimentConfig& c) {
  std::vector<std::pair<std::vector<double>, std::vector<double>>> states;
  for (double f : c.collection.frequencies) {
    const double w = 2.0 * std::numbers::pi * f;
    for (int k = 0; k < 24; ++k) {
      const double phase = 2.0 * std::numbers::pi * k / 24.0;
      states.push_back({std::vector<double>(c.joints(), c.collection.amplitude * std::sin(phase)),
                        std::vector<double>(c.joints(), c.collection.amplitude * w * std::cos(phase))});
    }
  }
  return states;
}

int cmd_report(const Options& o) {
  const ExperimentConfig c = resolve_config(o, false);
  const std::string out = resolve_out(o, c);
  const std::string src = o.phi.empty() ? out : o.phi;
  std::vector<std::string> inputs, outputs, missing;
  std::string metrics = "source,key,value\n";

  for (LossVariant v : {LossVariant::structured, LossVariant::state_dependent}) {
    const std::string path = in_dir(src, std::string("phi_") + variant_name(v) + ".json");
    if (!fs::exists(path)) {
      missing.push_back(path);
      continue;
    }
    const LossParams loss = loss_from_json(load_json(path));
    const auto states = probe_states(c);
    const PhiTable t = v == LossVariant::structured ? export_phi(loss) : export_phi(loss, states);
    std::ostringstream csv;
    t.write_csv(csv);
    const std::string file = std::string("phi_") + variant_name(v) + ".csv";
    write_file(in_dir(out, file), csv.str());
    inputs.push_back(path);
    outputs.push_back(file);
    if (v == LossVariant::structured) {
      for (const auto& row : t.rows) {
        metrics += "phi_structured,joint_" + std::to_string(static_cast<int>(row[0])) + "," +
                   format_double(row[1]) + "\n";
      }
    } else {
      const std::size_t j = loss.joints;
      for (std::size_t k = 0; k < j; ++k) {
        double lo = t.rows.front()[2 * j + k], hi = lo;
        for (const auto& row : t.rows) {
          lo = std::min(lo, row[2 * j + k]);
          hi = std::max(hi, row[2 * j + k]);
        }
        metrics += "phi_state_dependent,joint_" + std::to_string(k) + "_min," + format_double(lo) + "\n";
        metrics += "phi_state_dependent,joint_" + std::to_string(k) + "_max," + format_double(hi) + "\n";
      }
    }
  }

  const std::string finals = in_dir(out, "eval_final.csv");
  if (fs::exists(finals)) {
    std::map<std::string, std::pair<double, int>> acc;
    std::vector<std::string> order;
    for (const auto& row : read_rows(finals)) {
      const std::string key = row.at(0) + "_" + row.at(1) + "_mean_final_mse";
      if (!acc.contains(key)) order.push_back(key);
      acc[key].first += std::stod(row.at(3));
      acc[key].second += 1;
    }
    for (const auto& key : order) {
      metrics += "eval," + key + "," + format_double(acc[key].first / acc[key].second) + "\n";
    }
    inputs.push_back(finals);
  } else {
    missing.push_back(finals);
  }
  for (const char* name : {"online_summary.csv", "segmented_summary.csv"}) {
    const std::string path = in_dir(out, name);
    if (!fs::exists(path)) {
      missing.push_back(path);
      continue;
    }
    const std::string source = std::string(name).substr(0, std::string(name).find('_'));
    for (const auto& row : read_rows(path)) {
      metrics += source + "," + row.at(0) + "_" + row.at(1) + "_" + row.at(2) + "_mean," + row.at(3) + "\n";
    }
    inputs.push_back(path);
  }
  for (const std::string& m : missing) std::cerr << "report: skipping missing " << m << "\n";
  if (inputs.empty()) {
    std::cerr << "report: no artifacts found in " << out << "\n";
    return 1;
  }
  write_file(in_dir(out, "metrics_summary.csv"), metrics);
  outputs.push_back("metrics_summary.csv");
  finish("report", c, inputs, out, outputs);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // The autodiff tape allocates and frees many small blocks per step; keep
  // freed memory in the process instead of returning it to the kernel.
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);

  CLI::App app{"Meta-learned loss functions for inverse dynamics"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub, bool data, bool phi) {
    sub->add_option("--config", o.config, "experiment config (JSON)");
    sub->add_option("--seed", o.seed, "override the config seed");
    sub->add_option("--out", o.out, "output directory (default: $METALOSS_OUT, then config)");
    if (data) sub->add_option("--data", o.data, "dataset CSV (default: <out>/dataset.csv)");
    if (phi) sub->add_option("--phi", o.phi, "directory with phi_*.json (default: <out>)");
  };
  CLI::App* gen = app.add_subcommand("gen-data", "simulate sine-motion data");
  common(gen, false, false);
  CLI::App* meta = app.add_subcommand("meta-train", "learn loss parameters");
  common(meta, true, false);
  meta->add_option("--variant", o.variant, "structured, state_dependent, mlp or all");
  CLI::App* eval = app.add_subcommand("eval", "100-step training curves per loss and split");
  common(eval, true, true);
  eval->add_option("--variant", o.variant, "learned losses to evaluate besides mse");
  CLI::App* online = app.add_subcommand("online", "streaming adaptation grid");
  common(online, true, true);
  online->add_flag("--segmented", o.segmented, "run the pick-and-place payload task");
  online->add_flag("--keep-going", o.keep_going, "record diverged runs instead of stopping");
  CLI::App* report = app.add_subcommand("report", "phi exports and metrics summary");
  common(report, false, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(o);
    if (meta->parsed()) return cmd_meta_train(o);
    if (eval->parsed()) return cmd_eval(o);
    if (online->parsed()) return cmd_online(o);
    if (report->parsed()) return cmd_report(o);
  } catch (const ConfigError& e) {
    std::cerr << "invalid configuration: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
