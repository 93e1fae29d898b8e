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

// Scenario files (JSON).
//
//   {
//     "seed": 42,
//     "cluster":     {"devices": [{"id", "compute_gflops", "memory_mb"}...],
//                     "bandwidth_mb_s": [[...]...]}
//                 or {"uniform": {"count", "compute_gflops", "memory_mb",
//                                 "inter_bandwidth_mb_s", "intra_bandwidth_mb_s"}},
//     "model":       {"n_layers", "d_model", "d_ff", "n_heads", "dtype_bytes"},
//     "catalog":     {"attn_projection": {"memory_mb", "gflops"}, "self_attention",
//                     "ffn_projection", "decoder_layer",
//                     "kv_bytes_per_token_per_layer", "ref_batch", "ref_seq_len"},
//     "instances":   [{"id", "max_batch", "placement": {...}}],
//     "workload":    {"rps", "duration_s", "prompt_len": [min, max],
//                     "gen_len": [min, max], "trace": [[t, prompt, gen]...]},
//     "controller":  {ControllerConfig fields},
//     "calibration": {"kappa_c", "kappa_b", "overhead_s"},
//     "speedup":     {"delta", "gamma", "seq_len", "base_batch"},
//     "ops":         {"anchors": [[layers, replicate_s, migrate_s, memory_mb]...],
//                     "coordination_s", "batched"},
//     "sim":         {"restart_penalty_s", "monitor_interval_s", "max_drain_s"}
//   }
//
// Only "cluster" is required. A placement is either explicit
//   {"layers": [{"replicas": [original, extra...], "overrides": {"kv_cache": 1}}...]}
// or compact
//   {"original": 0 | [per-layer devices],
//    "replicas": [{"layers": [first, last], "devices": [1, 2]}],
//    "overrides": [{"layer": 3, "module": "kv_cache", "device": 1}]}.
// Unknown keys are rejected.

#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "modscale/autoscaler.hpp"
#include "modscale/domain.hpp"
#include "modscale/error.hpp"
#include "modscale/sim.hpp"

namespace modscale {

using json = nlohmann::json;

namespace detail {

/// Object reader that remembers which keys were read so leftovers can be
/// reported as unknown.
class ConfigObject {
 public:
  ConfigObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  const std::string& path() const { return path_; }
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& at(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError(field(key), "missing");
    seen_.insert(key);
    return j_.at(key);
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    out = as<T>(at(key), field(key));
  }

  template <typename T>
  T require(const std::string& key) {
    return as<T>(at(key), field(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
    }
  }

  template <typename T>
  static T as(const json& v, const std::string& field) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field, "expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(field, "expected an integer");
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field, "expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(field, "expected a string");
      return v.get<std::string>();
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename F>
void validated(const std::string& section, F&& check) {
  try {
    check();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(section, e.what());
  }
}

inline const json& expect_array(const json& v, const std::string& field) {
  if (!v.is_array()) throw ConfigError(field, "expected an array");
  return v;
}

inline LengthRange parse_range(const json& v, const std::string& field) {
  expect_array(v, field);
  if (v.size() != 2) throw ConfigError(field, "expected [min, max]");
  return {ConfigObject::as<int>(v[0], field + "[0]"), ConfigObject::as<int>(v[1], field + "[1]")};
}

inline ClusterSpec parse_cluster(const json& j) {
  ConfigObject o(j, "cluster");
  ClusterSpec c;
  if (o.has("uniform")) {
    ConfigObject u(o.at("uniform"), "cluster.uniform");
    const auto count = u.require<int>("count");
    if (count < 1) throw ConfigError("cluster.uniform.count", "must be >= 1");
    c = ClusterSpec::uniform(static_cast<std::size_t>(count), u.require<double>("compute_gflops"),
                             u.require<double>("memory_mb"), u.require<double>("inter_bandwidth_mb_s"),
                             u.require<double>("intra_bandwidth_mb_s"));
    u.finish();
  } else {
    const auto& devs = expect_array(o.at("devices"), "cluster.devices");
    for (std::size_t i = 0; i < devs.size(); ++i) {
      ConfigObject d(devs[i], "cluster.devices[" + std::to_string(i) + "]");
      DeviceSpec spec;
      spec.id = d.require<int>("id");
      spec.compute_gflops = d.require<double>("compute_gflops");
      spec.memory_mb = d.require<double>("memory_mb");
      d.finish();
      c.devices.push_back(spec);
    }
    const auto& bw = expect_array(o.at("bandwidth_mb_s"), "cluster.bandwidth_mb_s");
    for (std::size_t i = 0; i < bw.size(); ++i) {
      const std::string f = "cluster.bandwidth_mb_s[" + std::to_string(i) + "]";
      std::vector<double> row;
      for (std::size_t k = 0; k < expect_array(bw[i], f).size(); ++k) {
        row.push_back(ConfigObject::as<double>(bw[i][k], f + "[" + std::to_string(k) + "]"));
      }
      c.bandwidth.push_back(std::move(row));
    }
  }
  o.finish();
  validated("cluster", [&] { c.validate(); });
  return c;
}

inline ModelSpec parse_model(const json& j) {
  ConfigObject o(j, "model");
  ModelSpec m;
  o.get("n_layers", m.n_layers);
  o.get("d_model", m.d_model);
  o.get("d_ff", m.d_ff);
  o.get("n_heads", m.n_heads);
  o.get("dtype_bytes", m.dtype_bytes);
  o.finish();
  validated("model", [&] { m.validate(); });
  return m;
}

inline ModuleCost parse_cost(const json& j, const std::string& path, ModuleCost c) {
  ConfigObject o(j, path);
  o.get("memory_mb", c.memory_mb);
  o.get("gflops", c.gflops);
  o.finish();
  return c;
}

inline ModuleCatalog parse_catalog(const json& j, ModuleCatalog c) {
  ConfigObject o(j, "catalog");
  if (o.has("attn_projection")) c.attn_projection = parse_cost(o.at("attn_projection"), "catalog.attn_projection", c.attn_projection);
  if (o.has("self_attention")) c.self_attention = parse_cost(o.at("self_attention"), "catalog.self_attention", c.self_attention);
  if (o.has("ffn_projection")) c.ffn_projection = parse_cost(o.at("ffn_projection"), "catalog.ffn_projection", c.ffn_projection);
  if (o.has("decoder_layer")) c.decoder_layer = parse_cost(o.at("decoder_layer"), "catalog.decoder_layer", c.decoder_layer);
  o.get("kv_bytes_per_token_per_layer", c.kv_bytes_per_token_per_layer);
  o.get("ref_batch", c.ref_batch);
  o.get("ref_seq_len", c.ref_seq_len);
  o.finish();
  validated("catalog", [&] { c.validate(); });
  return c;
}

inline PlacementState parse_placement(const json& j, const std::string& path, int n_layers) {
  ConfigObject o(j, path);
  PlacementState p;
  if (o.has("layers")) {
    const auto& layers = expect_array(o.at("layers"), path + ".layers");
    std::vector<DeviceId> originals;
    std::vector<std::vector<DeviceId>> extras;
    std::vector<std::map<ModuleKind, DeviceId>> overrides;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string lp = path + ".layers[" + std::to_string(i) + "]";
      ConfigObject l(layers[i], lp);
      const auto& reps = expect_array(l.at("replicas"), lp + ".replicas");
      if (reps.empty()) throw ConfigError(lp + ".replicas", "needs the original device first");
      originals.push_back(ConfigObject::as<int>(reps[0], lp + ".replicas[0]"));
      std::vector<DeviceId> ex;
      for (std::size_t r = 1; r < reps.size(); ++r) {
        ex.push_back(ConfigObject::as<int>(reps[r], lp + ".replicas[" + std::to_string(r) + "]"));
      }
      extras.push_back(std::move(ex));
      std::map<ModuleKind, DeviceId> ov;
      if (l.has("overrides")) {
        const auto& m = l.at("overrides");
        if (!m.is_object()) throw ConfigError(lp + ".overrides", "expected an object");
        for (auto it = m.begin(); it != m.end(); ++it) {
          ModuleKind k;
          try {
            k = parse_module_kind(it.key());
          } catch (const Error& e) {
            throw ConfigError(lp + ".overrides." + it.key(), e.what());
          }
          ov[k] = ConfigObject::as<int>(it.value(), lp + ".overrides." + it.key());
        }
      }
      overrides.push_back(std::move(ov));
      l.finish();
    }
    p = PlacementState::from_devices(originals);
    for (std::size_t i = 0; i < extras.size(); ++i) {
      auto& layer = p.layer(static_cast<LayerId>(i + 1));
      for (DeviceId d : extras[i]) layer.replicas.push_back({d, false});
      layer.overrides = overrides[i];
    }
  } else {
    const std::string of = path + ".original";
    const auto& orig = o.at("original");
    if (orig.is_array()) {
      std::vector<DeviceId> devs;
      for (std::size_t i = 0; i < orig.size(); ++i) {
        devs.push_back(ConfigObject::as<int>(orig[i], of + "[" + std::to_string(i) + "]"));
      }
      p = PlacementState::from_devices(devs);
    } else {
      p = PlacementState::on_device(n_layers, ConfigObject::as<int>(orig, of));
    }
    if (o.has("replicas")) {
      const auto& groups = expect_array(o.at("replicas"), path + ".replicas");
      for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const std::string gp = path + ".replicas[" + std::to_string(gi) + "]";
        ConfigObject g(groups[gi], gp);
        const auto range = parse_range(g.at("layers"), gp + ".layers");
        const auto& devs = expect_array(g.at("devices"), gp + ".devices");
        g.finish();
        if (range.min < 1 || range.max > p.n_layers() || range.max < range.min) {
          throw ConfigError(gp + ".layers", "range outside 1.." + std::to_string(p.n_layers()));
        }
        for (std::size_t k = 0; k < devs.size(); ++k) {
          const DeviceId d = ConfigObject::as<int>(devs[k], gp + ".devices[" + std::to_string(k) + "]");
          for (LayerId i = range.min; i <= range.max; ++i) p.layer(i).replicas.push_back({d, false});
        }
      }
    }
    if (o.has("overrides")) {
      const auto& ovs = expect_array(o.at("overrides"), path + ".overrides");
      for (std::size_t k = 0; k < ovs.size(); ++k) {
        const std::string op = path + ".overrides[" + std::to_string(k) + "]";
        ConfigObject ov(ovs[k], op);
        const auto layer = ov.require<int>("layer");
        ModuleKind kind;
        try {
          kind = parse_module_kind(ov.require<std::string>("module"));
        } catch (const ConfigError&) {
          throw;
        } catch (const Error& e) {
          throw ConfigError(op + ".module", e.what());
        }
        const auto dev = ov.require<int>("device");
        ov.finish();
        if (layer < 1 || layer > p.n_layers()) throw ConfigError(op + ".layer", "out of range");
        p.layer(layer).overrides[kind] = dev;
      }
    }
  }
  o.finish();
  if (p.n_layers() != n_layers) {
    throw ConfigError(path, "placement has " + std::to_string(p.n_layers()) + " layers, model has " +
                                std::to_string(n_layers));
  }
  validated(path, [&] { p.validate(); });
  return p;
}

inline std::vector<InstanceSpec> parse_instances(const json& j, const ClusterSpec& cluster, const ModelSpec& model) {
  const auto& arr = expect_array(j, "instances");
  std::vector<InstanceSpec> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string path = "instances[" + std::to_string(i) + "]";
    ConfigObject o(arr[i], path);
    InstanceSpec spec;
    spec.id = static_cast<int>(i);
    o.get("id", spec.id);
    o.get("max_batch", spec.max_batch);
    spec.placement = o.has("placement") ? parse_placement(o.at("placement"), path + ".placement", model.n_layers)
                                        : PlacementState::on_device(model.n_layers, cluster.devices.front().id);
    o.finish();
    validated(path, [&] { spec.placement.validate_against(cluster); });
    out.push_back(std::move(spec));
  }
  return out;
}

inline WorkloadSpec parse_workload(const json& j) {
  ConfigObject o(j, "workload");
  WorkloadSpec w;
  o.get("rps", w.rps);
  o.get("duration_s", w.duration_s);
  if (o.has("prompt_len")) w.prompt_len = parse_range(o.at("prompt_len"), "workload.prompt_len");
  if (o.has("gen_len")) w.gen_len = parse_range(o.at("gen_len"), "workload.gen_len");
  if (o.has("trace")) {
    const auto& tr = expect_array(o.at("trace"), "workload.trace");
    for (std::size_t i = 0; i < tr.size(); ++i) {
      const std::string f = "workload.trace[" + std::to_string(i) + "]";
      if (!tr[i].is_array() || tr[i].size() != 3) throw ConfigError(f, "expected [t, prompt_len, gen_len]");
      w.trace.push_back({ConfigObject::as<double>(tr[i][0], f), ConfigObject::as<int>(tr[i][1], f),
                         ConfigObject::as<int>(tr[i][2], f)});
    }
  }
  o.finish();
  validated("workload", [&] { w.validate(); });
  return w;
}

inline ControllerConfig parse_controller(const json& j) {
  ConfigObject o(j, "controller");
  ControllerConfig c;
  o.get("enabled", c.enabled);
  o.get("t_up", c.t_up);
  o.get("t_down", c.t_down);
  o.get("slo_latency_s", c.slo_latency_s);
  o.get("violation_window_s", c.violation_window_s);
  o.get("replica_size_mb", c.replica_size_mb);
  o.get("bs_step", c.bs_step);
  o.get("eval_period_s", c.eval_period_s);
  o.get("target_util", c.target_util);
  o.get("offload_fraction", c.offload_fraction);
  o.get("offload_latency_multiplier", c.offload_latency_multiplier);
  o.get("max_migration_candidates", c.max_migration_candidates);
  o.get("kv_candidates", c.kv_candidates);
  o.get("projection_horizon_s", c.projection_horizon_s);
  o.get("cooldown_s", c.cooldown_s);
  if (o.has("vacancy_mode")) {
    const auto mode = o.require<std::string>("vacancy_mode");
    if (mode == "per_device_max") {
      c.vacancy_mode = VacancyMode::PerDeviceMax;
    } else if (mode == "cluster_mean") {
      c.vacancy_mode = VacancyMode::ClusterMean;
    } else {
      throw ConfigError("controller.vacancy_mode", "expected per_device_max or cluster_mean");
    }
  }
  o.finish();
  validated("controller", [&] { c.validate(); });
  return c;
}

inline CalibrationParams parse_calibration(const json& j) {
  ConfigObject o(j, "calibration");
  CalibrationParams c;
  o.get("kappa_c", c.kappa_c);
  o.get("kappa_b", c.kappa_b);
  o.get("overhead_s", c.overhead_s);
  o.finish();
  validated("calibration", [&] { c.validate(); });
  return c;
}

inline SpeedupParams parse_speedup(const json& j) {
  ConfigObject o(j, "speedup");
  SpeedupParams s;
  o.get("delta", s.delta);
  if (o.has("gamma") && !o.at("gamma").is_null()) s.gamma = o.require<double>("gamma");
  o.get("seq_len", s.seq_len);
  o.get("base_batch", s.base_batch);
  o.finish();
  validated("speedup", [&] { s.validate(); });
  return s;
}

inline OpCostModel parse_ops(const json& j) {
  ConfigObject o(j, "ops");
  OpCostModel m;
  if (o.has("anchors")) {
    const auto& arr = expect_array(o.at("anchors"), "ops.anchors");
    m.anchors.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string f = "ops.anchors[" + std::to_string(i) + "]";
      if (!arr[i].is_array() || arr[i].size() != 4) {
        throw ConfigError(f, "expected [layers, replicate_s, migrate_s, memory_mb]");
      }
      m.anchors.push_back({ConfigObject::as<double>(arr[i][0], f), ConfigObject::as<double>(arr[i][1], f),
                           ConfigObject::as<double>(arr[i][2], f), ConfigObject::as<double>(arr[i][3], f)});
    }
  }
  o.get("coordination_s", m.coordination_s);
  o.get("batched", m.batched);
  o.finish();
  validated("ops", [&] { m.validate(); });
  return m;
}

inline SimOptions parse_sim(const json& j) {
  ConfigObject o(j, "sim");
  SimOptions s;
  o.get("restart_penalty_s", s.restart_penalty_s);
  o.get("monitor_interval_s", s.monitor_interval_s);
  o.get("max_drain_s", s.max_drain_s);
  o.finish();
  return s;
}

inline std::pair<int, int> line_and_column(const std::string& text, std::size_t byte) {
  int line = 1;
  int col = 1;
  for (std::size_t i = 0; i < text.size() && i + 1 < byte; ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

}  // namespace detail

inline Scenario scenario_from_json(const json& j) {
  detail::ConfigObject o(j, "");
  Scenario s;
  if (!o.has("cluster")) throw ConfigError("cluster", "missing required section");
  s.cluster = detail::parse_cluster(o.at("cluster"));
  if (o.has("model")) s.model = detail::parse_model(o.at("model"));
  s.catalog = ModuleCatalog::for_model(s.model);
  if (o.has("catalog")) s.catalog = detail::parse_catalog(o.at("catalog"), s.catalog);
  if (o.has("instances")) {
    s.instances = detail::parse_instances(o.at("instances"), s.cluster, s.model);
  } else {
    s.instances.push_back({0, PlacementState::on_device(s.model.n_layers, s.cluster.devices.front().id), 32});
  }
  if (o.has("workload")) s.workload = detail::parse_workload(o.at("workload"));
  if (o.has("controller")) s.controller = detail::parse_controller(o.at("controller"));
  if (o.has("calibration")) s.calibration = detail::parse_calibration(o.at("calibration"));
  if (o.has("speedup")) s.speedup = detail::parse_speedup(o.at("speedup"));
  if (o.has("ops")) s.costs = detail::parse_ops(o.at("ops"));
  if (o.has("sim")) s.sim = detail::parse_sim(o.at("sim"));
  o.get("seed", s.seed);
  o.finish();
  s.workload.seed = s.seed;
  detail::validated("scenario", [&] { s.validate(); });
  return s;
}

/// Parses JSON text; syntax errors report line and column.
inline json parse_json_text(const std::string& text, const std::string& origin = "<config>") {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    const auto [line, col] = detail::line_and_column(text, e.byte);
    throw ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(col), "syntax error");
  }
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path, "cannot open file");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_json_text(buf.str(), path);
}

inline Scenario load_scenario(const std::string& path) { return scenario_from_json(read_json_file(path)); }

inline json placement_to_json(const PlacementState& p) {
  json layers = json::array();
  for (const auto& lp : p.layers()) {
    json reps = json::array({lp.original().device});
    for (const auto& r : lp.replicas) {
      if (!r.is_original) reps.push_back(r.device);
    }
    json l = {{"replicas", reps}};
    if (!lp.overrides.empty()) {
      json ov = json::object();
      for (const auto& [k, d] : lp.overrides) ov[std::string(to_string(k))] = d;
      l["overrides"] = ov;
    }
    layers.push_back(l);
  }
  return {{"layers", layers}};
}

inline json scenario_to_json(const Scenario& s) {
  json devices = json::array();
  for (const auto& d : s.cluster.devices) {
    devices.push_back({{"id", d.id}, {"compute_gflops", d.compute_gflops}, {"memory_mb", d.memory_mb}});
  }
  auto cost = [](const ModuleCost& c) { return json{{"memory_mb", c.memory_mb}, {"gflops", c.gflops}}; };
  json instances = json::array();
  for (const auto& i : s.instances) {
    instances.push_back({{"id", i.id}, {"max_batch", i.max_batch}, {"placement", placement_to_json(i.placement)}});
  }
  json trace = json::array();
  for (const auto& e : s.workload.trace) trace.push_back({e.t, e.prompt_len, e.gen_len});
  json anchors = json::array();
  for (const auto& a : s.costs.anchors) anchors.push_back({a.layers, a.replicate_s, a.migrate_s, a.memory_mb});
  const auto& c = s.controller;
  json j = {
      {"seed", s.seed},
      {"cluster", {{"devices", devices}, {"bandwidth_mb_s", s.cluster.bandwidth}}},
      {"model",
       {{"n_layers", s.model.n_layers},
        {"d_model", s.model.d_model},
        {"d_ff", s.model.d_ff},
        {"n_heads", s.model.n_heads},
        {"dtype_bytes", s.model.dtype_bytes}}},
      {"catalog",
       {{"attn_projection", cost(s.catalog.attn_projection)},
        {"self_attention", cost(s.catalog.self_attention)},
        {"ffn_projection", cost(s.catalog.ffn_projection)},
        {"decoder_layer", cost(s.catalog.decoder_layer)},
        {"kv_bytes_per_token_per_layer", s.catalog.kv_bytes_per_token_per_layer},
        {"ref_batch", s.catalog.ref_batch},
        {"ref_seq_len", s.catalog.ref_seq_len}}},
      {"instances", instances},
      {"workload",
       {{"rps", s.workload.rps},
        {"duration_s", s.workload.duration_s},
        {"prompt_len", {s.workload.prompt_len.min, s.workload.prompt_len.max}},
        {"gen_len", {s.workload.gen_len.min, s.workload.gen_len.max}},
        {"trace", trace}}},
      {"controller",
       {{"enabled", c.enabled},
        {"t_up", c.t_up},
        {"t_down", c.t_down},
        {"slo_latency_s", c.slo_latency_s},
        {"violation_window_s", c.violation_window_s},
        {"replica_size_mb", c.replica_size_mb},
        {"bs_step", c.bs_step},
        {"eval_period_s", c.eval_period_s},
        {"target_util", c.target_util},
        {"offload_fraction", c.offload_fraction},
        {"offload_latency_multiplier", c.offload_latency_multiplier},
        {"max_migration_candidates", c.max_migration_candidates},
        {"kv_candidates", c.kv_candidates},
        {"projection_horizon_s", c.projection_horizon_s},
        {"cooldown_s", c.cooldown_s},
        {"vacancy_mode", c.vacancy_mode == VacancyMode::PerDeviceMax ? "per_device_max" : "cluster_mean"}}},
      {"calibration",
       {{"kappa_c", s.calibration.kappa_c},
        {"kappa_b", s.calibration.kappa_b},
        {"overhead_s", s.calibration.overhead_s}}},
      {"speedup",
       {{"delta", s.speedup.delta},
        {"gamma", s.speedup.gamma ? json(*s.speedup.gamma) : json(nullptr)},
        {"seq_len", s.speedup.seq_len},
        {"base_batch", s.speedup.base_batch}}},
      {"ops", {{"anchors", anchors}, {"coordination_s", s.costs.coordination_s}, {"batched", s.costs.batched}}},
      {"sim",
       {{"restart_penalty_s", s.sim.restart_penalty_s},
        {"monitor_interval_s", s.sim.monitor_interval_s},
        {"max_drain_s", s.sim.max_drain_s}}},
  };
  return j;
}

}  // namespace modscale
