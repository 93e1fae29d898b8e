// Copyright 2026 The modscale Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command implementations behind tools/modscale. Each returns a process
// exit code: 0 success, 1 invalid input, 2 runtime failure, 3 a
// verify-oracle check failed.

#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "modscale/autoscaler.hpp"
#include "modscale/report.hpp"
#include "modscale/scenario.hpp"
#include "modscale/sim.hpp"
#include "modscale/speedup.hpp"

namespace modscale::cli {

enum ExitCode : int { kOk = 0, kInvalid = 1, kRuntime = 2, kCheckFailed = 3 };

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const SearchSpaceTooLarge& e) {
    err << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

// ---------------------------------------------------------------------------
// run

inline int run_scenario(const std::string& config, const std::string& out_dir, std::optional<std::uint64_t> seed,
                        std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    Scenario s = load_scenario(config);
    if (seed) s.seed = *seed;
    const auto res = run(s);
    write_outputs(out_dir, res, s);
    const auto& m = res.summary;
    out << fmt::format("arrived {} completed {} failed {} unfinished {}\n", m.arrived, m.completed, m.failed,
                       m.unfinished);
    out << fmt::format("throughput {:.1f} tok/s {:.2f} req/s\n", m.throughput_tok_s, m.throughput_req_s);
    out << fmt::format("latency mean {:.3f} s p95 {:.3f} s violation rate {:.3f}\n", m.mean_latency_s,
                       m.p95_latency_s, m.violation_rate);
    out << fmt::format("oom events {} ops {} scaling cost {:.3f} s\n", m.oom_events, m.ops_executed,
                       m.total_scaling_cost_s);
    return static_cast<int>(kOk);
  });
}

// ---------------------------------------------------------------------------
// sweep

struct SweepAxis {
  std::string name;
  std::vector<nlohmann::json> values;
};

struct SweepSpec {
  nlohmann::json base;
  std::vector<SweepAxis> axes;
  int repetitions = 5;
  std::size_t max_cells = 1000;

  std::size_t cell_count() const {
    std::size_t n = 1;
    for (const auto& a : axes) n *= a.values.size();
    return n;
  }

  /// Axis values of cell `index`, last axis varying fastest.
  std::vector<nlohmann::json> cell(std::size_t index) const {
    std::vector<nlohmann::json> v(axes.size());
    for (std::size_t a = axes.size(); a-- > 0;) {
      v[a] = axes[a].values[index % axes[a].values.size()];
      index /= axes[a].values.size();
    }
    return v;
  }
};

inline bool is_placement_axis(const std::string& name) { return name == "replicated_layers" || name == "dop"; }

inline SweepSpec parse_sweep(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  detail::ConfigObject o(j, "");
  SweepSpec s;
  const auto& base = o.at("base");
  if (base.is_string()) {
    s.base = read_json_file((base_dir / base.get<std::string>()).string());
  } else if (base.is_object()) {
    s.base = base;
  } else {
    throw ConfigError("base", "expected a scenario object or a path");
  }
  const auto& axes = o.at("axes");
  if (!axes.is_object() || axes.empty()) throw ConfigError("axes", "at least one axis is required");
  for (auto it = axes.begin(); it != axes.end(); ++it) {
    const std::string name = it.key();
    if (name != "rps" && !is_placement_axis(name) && name.find('.') == std::string::npos) {
      throw ConfigError("axes." + name, "unknown axis; use rps, replicated_layers, dop or a dotted path");
    }
    if (!it.value().is_array() || it.value().empty()) throw ConfigError("axes." + name, "axis must be a non-empty list");
    SweepAxis axis{name, {}};
    for (const auto& v : it.value()) {
      if (is_placement_axis(name) && !v.is_number_integer()) throw ConfigError("axes." + name, "expected integers");
      if (name == "rps" && !v.is_number()) throw ConfigError("axes.rps", "expected numbers");
      axis.values.push_back(v);
    }
    s.axes.push_back(std::move(axis));
  }
  o.get("repetitions", s.repetitions);
  if (s.repetitions < 1) throw ConfigError("repetitions", "must be >= 1");
  if (o.has("max_cells")) s.max_cells = static_cast<std::size_t>(o.require<std::int64_t>("max_cells"));
  o.finish();
  if (s.cell_count() > s.max_cells) {
    throw ConfigError("axes", fmt::format("{} cells exceed max_cells {}", s.cell_count(), s.max_cells));
  }
  return s;
}

inline void set_dotted(nlohmann::json& root, const std::string& path, const nlohmann::json& value) {
  nlohmann::json* cur = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    nlohmann::json* next = nullptr;
    if (cur->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(key);
      } catch (const std::exception&) {
        throw ConfigError(path, "'" + key + "' is not an array index");
      }
      if (idx >= cur->size()) throw ConfigError(path, "index " + key + " out of range");
      next = &(*cur)[idx];
    } else {
      if (cur->is_null()) *cur = nlohmann::json::object();
      if (!cur->is_object()) throw ConfigError(path, "'" + key + "' is not inside an object");
      next = &(*cur)[key];
    }
    if (dot == std::string::npos) {
      *next = value;
      return;
    }
    cur = next;
    start = dot + 1;
  }
}

/// Replicates layers 1..`layers` of every instance onto the `dop - 1`
/// devices following its original device (cluster order, wrapping).
inline void replicate_prefix(Scenario& s, int layers, int dop) {
  if (dop < 1 || dop > static_cast<int>(s.cluster.size())) {
    throw ConfigError("axes.dop", fmt::format("dop {} outside 1..{}", dop, s.cluster.size()));
  }
  if (layers < 0 || layers > s.model.n_layers) {
    throw ConfigError("axes.replicated_layers", fmt::format("{} outside 0..{}", layers, s.model.n_layers));
  }
  for (auto& inst : s.instances) {
    const DeviceId home = inst.placement.original_device(1);
    PlacementState p = PlacementState::on_device(s.model.n_layers, home);
    const std::size_t g0 = s.cluster.index_of(home);
    for (int k = 1; k < dop; ++k) {
      const DeviceId dev = s.cluster.devices[(g0 + static_cast<std::size_t>(k)) % s.cluster.size()].id;
      for (LayerId i = 1; i <= layers; ++i) p.layer(i).replicas.push_back({dev, false});
    }
    inst.placement = std::move(p);
  }
}

inline Scenario sweep_cell_scenario(const SweepSpec& spec, std::size_t cell, int rep) {
  const auto values = spec.cell(cell);
  nlohmann::json j = spec.base;
  std::optional<int> layers;
  std::optional<int> dop;
  for (std::size_t a = 0; a < spec.axes.size(); ++a) {
    const auto& name = spec.axes[a].name;
    if (name == "rps") {
      set_dotted(j, "workload.rps", values[a]);
    } else if (name == "replicated_layers") {
      layers = values[a].get<int>();
    } else if (name == "dop") {
      dop = values[a].get<int>();
    } else {
      set_dotted(j, name, values[a]);
    }
  }
  Scenario s = scenario_from_json(j);
  if (layers || dop) replicate_prefix(s, layers.value_or(s.model.n_layers), dop.value_or(2));
  s.seed += static_cast<std::uint64_t>(rep);
  s.workload.seed = s.seed;
  s.validate();
  return s;
}

struct CellStats {
  double mean = 0.0;
  double stdev = 0.0;
};

inline CellStats mean_stdev(const std::vector<double>& xs) {
  CellStats st;
  if (xs.empty()) return st;
  for (double x : xs) st.mean += x;
  st.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - st.mean) * (x - st.mean);
    st.stdev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return st;
}

struct SweepRun {
  std::size_t cell = 0;
  int rep = 0;
  std::optional<Summary> summary;
  std::string error;
};

inline const std::vector<std::pair<std::string, double Summary::*>>& sweep_metrics() {
  static const std::vector<std::pair<std::string, double Summary::*>> m = {
      {"throughput_tok_s", &Summary::throughput_tok_s},
      {"throughput_req_s", &Summary::throughput_req_s},
      {"mean_latency_s", &Summary::mean_latency_s},
      {"p95_latency_s", &Summary::p95_latency_s},
      {"violation_rate", &Summary::violation_rate},
      {"total_scaling_cost_s", &Summary::total_scaling_cost_s},
  };
  return m;
}

/// Runs every cell and repetition, `jobs` at a time. Results are in cell,
/// then repetition order regardless of `jobs`.
inline std::vector<SweepRun> execute_sweep(const SweepSpec& spec, const std::filesystem::path& out_dir, int jobs) {
  std::vector<SweepRun> runs;
  for (std::size_t c = 0; c < spec.cell_count(); ++c) {
    for (int r = 0; r < spec.repetitions; ++r) runs.push_back({c, r, std::nullopt, {}});
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      auto& run_i = runs[i];
      try {
        const Scenario s = sweep_cell_scenario(spec, run_i.cell, run_i.rep);
        const auto res = run(s);
        if (!out_dir.empty()) {
          write_outputs(out_dir / fmt::format("cell_{:03}", run_i.cell) / fmt::format("rep_{}", run_i.rep), res, s);
        }
        run_i.summary = res.summary;
      } catch (const std::exception& e) {
        run_i.error = e.what();
      }
    }
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(runs.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return runs;
}

inline void write_sweep_table(std::ostream& out, const SweepSpec& spec, const std::vector<SweepRun>& runs) {
  out << "cell";
  for (const auto& a : spec.axes) out << ',' << a.name;
  out << ",runs,failed";
  for (const auto& [name, field] : sweep_metrics()) out << ',' << name << "_mean," << name << "_stdev";
  out << ",oom_events_mean,oom_events_stdev\n";
  for (std::size_t c = 0; c < spec.cell_count(); ++c) {
    out << c;
    for (const auto& v : spec.cell(c)) out << ',' << v.dump();
    std::vector<const Summary*> ok;
    int failed = 0;
    for (const auto& r : runs) {
      if (r.cell != c) continue;
      if (r.summary) {
        ok.push_back(&*r.summary);
      } else {
        ++failed;
      }
    }
    out << ',' << ok.size() << ',' << failed;
    for (const auto& [name, field] : sweep_metrics()) {
      std::vector<double> xs;
      for (const auto* s : ok) xs.push_back(s->*field);
      const auto st = mean_stdev(xs);
      out << ',' << detail::num(st.mean) << ',' << detail::num(st.stdev);
    }
    std::vector<double> ooms;
    for (const auto* s : ok) ooms.push_back(static_cast<double>(s->oom_events));
    const auto st = mean_stdev(ooms);
    out << ',' << detail::num(st.mean) << ',' << detail::num(st.stdev) << "\n";
  }
}

inline int run_sweep(const std::string& spec_path, const std::string& out_dir, int jobs, std::ostream& out,
                     std::ostream& err) {
  return guarded(err, [&] {
    const auto spec = parse_sweep(read_json_file(spec_path), std::filesystem::path(spec_path).parent_path());
    // Catch invalid cells before spending time on the others.
    for (std::size_t c = 0; c < spec.cell_count(); ++c) sweep_cell_scenario(spec, c, 0);
    const auto runs = execute_sweep(spec, out_dir, jobs);
    std::filesystem::create_directories(out_dir);
    {
      std::ofstream f(std::filesystem::path(out_dir) / "sweep.csv", std::ios::binary | std::ios::trunc);
      write_sweep_table(f, spec, runs);
    }
    write_sweep_table(out, spec, runs);
    int failures = 0;
    for (const auto& r : runs) {
      if (!r.summary) {
        ++failures;
        err << fmt::format("cell {} rep {} failed: {}\n", r.cell, r.rep, r.error);
      }
    }
    return failures ? static_cast<int>(kRuntime) : static_cast<int>(kOk);
  });
}

// ---------------------------------------------------------------------------
// verify-oracle

/// Controller view of a scenario before any traffic: no KV, idle devices.
inline ClusterState initial_state(const Scenario& s) {
  ClusterState st;
  st.cluster = s.cluster;
  st.model = s.model;
  st.catalog = s.catalog;
  st.speedup = s.speedup;
  st.costs = s.costs;
  st.background_mb.assign(s.cluster.size(), 0.0);
  for (const auto& inst : s.instances) {
    InstanceView v;
    v.id = inst.id;
    v.placement = inst.placement;
    v.max_batch = inst.max_batch;
    v.batch_limit = inst.max_batch;
    v.device_util.assign(s.cluster.size(), 0.0);
    v.mark_observed();
    st.instances.push_back(std::move(v));
  }
  return st;
}

struct OracleReport {
  double greedy = 1.0;
  double oracle = 1.0;
  double gap = 0.0;
  std::size_t evaluated = 0;
  std::size_t greedy_ops = 0;
  bool monotone = true;
  bool feasible = true;
  bool bounded = true;  // 1 <= greedy <= oracle

  bool ok() const { return monotone && feasible && bounded; }
};

inline OracleReport compare_with_oracle(const ClusterState& state, std::size_t instance, const ControllerConfig& cfg,
                                        double max_assignments = 1e6) {
  OracleReport rep;
  const auto up = scale_up(state, instance, cfg);
  rep.greedy = up.speedup_after;
  rep.greedy_ops = up.ops.size();
  double prev = up.speedup_before;
  for (double sp : up.speedup_trace) {
    rep.monotone = rep.monotone && sp > prev;
    prev = sp;
  }
  const auto mem = up.state.memory_used(cfg.replica_size_mb);
  for (std::size_t g = 0; g < mem.size(); ++g) {
    rep.feasible = rep.feasible && mem[g] <= state.cluster.devices[g].memory_mb + 1e-9;
  }
  const auto& inst = state.instances.at(instance);
  const auto best = oracle_best_strategy(inst.placement, state.cluster, state.model, state.speedup,
                                         cfg.replica_size_mb, std::numeric_limits<int>::max(),
                                         replica_budget_mb(state, cfg), max_assignments);
  rep.oracle = best.speedup;
  rep.evaluated = best.evaluated;
  rep.gap = rep.oracle - rep.greedy;
  const double eps = 1e-12 * std::max(1.0, rep.oracle);
  rep.bounded = rep.greedy >= up.speedup_before - eps && rep.greedy <= rep.oracle + eps;
  return rep;
}

inline int verify_oracle(const std::string& config, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Scenario s = load_scenario(config);
    const auto state = initial_state(s);
    bool all_ok = true;
    for (std::size_t k = 0; k < state.instances.size(); ++k) {
      const auto rep = compare_with_oracle(state, k, s.controller);
      out << fmt::format("instance {}: greedy {:.6f} ({} replicas) oracle {:.6f} gap {:.6f} evaluated {}\n",
                         state.instances[k].id, rep.greedy, rep.greedy_ops, rep.oracle, rep.gap, rep.evaluated);
      out << fmt::format("  monotone {} feasible {} bounded {}\n", rep.monotone ? "pass" : "FAIL",
                         rep.feasible ? "pass" : "FAIL", rep.bounded ? "pass" : "FAIL");
      all_ok = all_ok && rep.ok();
    }
    return all_ok ? static_cast<int>(kOk) : static_cast<int>(kCheckFailed);
  });
}

// ---------------------------------------------------------------------------
// explain-speedup

inline std::vector<int> parse_parallelism(const std::string& text) {
  std::vector<int> p;
  for (const auto& part : detail::split(text)) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(part, &used);
    } catch (const std::exception&) {
      throw InvalidArgument("'" + part + "' is not an integer");
    }
    if (used != part.size()) throw InvalidArgument("'" + part + "' is not an integer");
    p.push_back(v);
  }
  return p;
}

inline int explain_speedup(const std::string& p_text, double gamma, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (!(gamma >= 0.0 && gamma < 1.0)) throw InvalidArgument("gamma must be in [0, 1)");
    const auto p = parse_parallelism(p_text);
    const double inv = reciprocal_l1(p);
    const double n = static_cast<double>(p.size());
    out << fmt::format("n = {}\n", p.size());
    out << fmt::format("sum 1/p_i = {:.6f}\n", inv);
    out << fmt::format("gamma = {:.6f}\n", gamma);
    out << fmt::format("(1 - gamma)/n * sum 1/p_i = {:.6f}\n", (1.0 - gamma) / n * inv);
    out << fmt::format("S = {:.6f}\n", speedup_homo(p, gamma));
    if (gamma > 0.0) {
      out << fmt::format("asymptote 1/gamma = {:.6f}\n", 1.0 / gamma);
    } else {
      out << "asymptote 1/gamma = inf\n";
    }
    return static_cast<int>(kOk);
  });
}

}  // namespace modscale::cli
