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

// Scaling decisions.
//
// Scale-up greedily adds layer replicas on vacant devices while the
// modelled speedup strictly improves, preferring layers that extend a
// contiguous run on the destination. Scale-down relieves a violating
// device in three phases of increasing cost: migrate modules away, evict
// co-located replicas, then shrink the batch and offload KV cache.
//
// Every decision works on a ClusterState snapshot and returns a new one;
// nothing here touches the simulator.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "modscale/domain.hpp"
#include "modscale/error.hpp"
#include "modscale/ops.hpp"
#include "modscale/speedup.hpp"

namespace modscale {

enum class VacancyMode { PerDeviceMax, ClusterMean };

struct ControllerConfig {
  bool enabled = true;
  double t_up = 0.3;
  double t_down = 0.05;
  double slo_latency_s = 10.0;
  double violation_window_s = 10.0;
  double replica_size_mb = 605.0 + 256.0;
  std::int64_t bs_step = 5;
  double eval_period_s = 1.0;
  /// Predicted device utilisation above which an SLO violation is still
  /// attributed to the device once the placement has changed.
  double target_util = 0.9;
  double offload_fraction = 0.25;
  double offload_latency_multiplier = 2.0;
  /// Bounded prefix returned by filter_modules.
  int max_migration_candidates = 8;
  int kv_candidates = 2;
  /// How far ahead KV growth is projected when checking for OOM.
  double projection_horizon_s = 2.0;
  /// SLO-based triggers are ignored for this long after a scale-down.
  double cooldown_s = 10.0;
  VacancyMode vacancy_mode = VacancyMode::PerDeviceMax;

  bool operator==(const ControllerConfig&) const = default;

  void validate() const {
    if (!(t_up > 0.0 && t_up <= 1.0)) throw InvalidArgument("t_up must be in (0, 1]");
    if (!(t_down >= 0.0 && t_down <= 1.0)) throw InvalidArgument("t_down must be in [0, 1]");
    if (bs_step < 1) throw InvalidArgument("bs_step must be >= 1");
    if (!(replica_size_mb > 0.0)) throw InvalidArgument("replica_size_mb must be > 0");
    if (!(slo_latency_s > 0.0) || !(violation_window_s > 0.0) || !(eval_period_s > 0.0)) {
      throw InvalidArgument("controller periods and SLO bound must be > 0");
    }
    if (!(offload_fraction >= 0.0 && offload_fraction < 1.0)) throw InvalidArgument("offload_fraction must be in [0, 1)");
    if (offload_latency_multiplier < 1.0) throw InvalidArgument("offload_latency_multiplier must be >= 1");
    if (max_migration_candidates < 0 || kv_candidates < 0) throw InvalidArgument("candidate bounds must be >= 0");
    if (projection_horizon_s < 0.0 || cooldown_s < 0.0) throw InvalidArgument("horizon and cooldown must be >= 0");
  }
};

/// What the controller knows about one model instance at snapshot time.
struct PendingRequest {
  double context = 0.0;    // tokens resident now
  double remaining = 0.0;  // tokens still to generate
};

struct InstanceView {
  int id = 0;
  PlacementState placement;
  KvLoad kv;
  /// Running then queued requests, in admission order.
  std::vector<PendingRequest> pending;
  /// Decode steps the KV projection looks ahead.
  std::int64_t horizon_steps = 0;
  /// Recent arrival rate per decode step and the mean shape of those
  /// arrivals; the projection assumes both persist over the horizon.
  double arrivals_per_step = 0.0;
  PendingRequest typical_arrival;
  std::int64_t max_batch = 32;    // configured
  std::int64_t batch_limit = 32;  // current, lowered by scale-down
  double violation_rate = 0.0;
  bool slo_suppressed = false;
  /// This instance's busy fraction per device (cluster index order).
  std::vector<double> device_util;

  // State the metrics were observed under.
  PlacementState observed_placement;
  std::int64_t observed_batch_limit = 32;

  /// Fills the observed_* fields from the current state.
  void mark_observed() {
    observed_placement = placement;
    observed_batch_limit = batch_limit;
  }

  bool unchanged() const { return placement == observed_placement && batch_limit == observed_batch_limit; }

  /// Peak KV load within the projection horizon under the current batch
  /// limit. Finished requests free their slot for the next queued one.
  KvLoad projected_kv() const {
    if (pending.empty()) return kv;
    const auto limit = static_cast<std::size_t>(std::max<std::int64_t>(batch_limit, 0));
    struct Slot {
      double context;
      double remaining;
    };
    std::vector<Slot> slots;
    std::size_t next = 0;
    KvLoad out;
    out.offloaded_fraction = kv.offloaded_fraction;
    double due = 0.0;
    std::int64_t waiting = 0;
    for (std::int64_t step = 0; step <= horizon_steps; ++step) {
      std::erase_if(slots, [](const Slot& sl) { return sl.remaining <= 0.0; });
      while (slots.size() < limit && next < pending.size()) {
        slots.push_back({pending[next].context, pending[next].remaining});
        ++next;
      }
      while (slots.size() < limit && waiting > 0) {
        slots.push_back({typical_arrival.context, typical_arrival.remaining});
        --waiting;
      }
      double tokens = 0.0;
      for (const auto& sl : slots) tokens += sl.context;
      if (tokens > out.tokens) {
        out.tokens = tokens;
        out.batch = static_cast<std::int64_t>(slots.size());
      }
      for (auto& sl : slots) {
        sl.context += 1.0;
        sl.remaining -= 1.0;
      }
      due += arrivals_per_step;
      const double whole = std::floor(due);
      waiting += static_cast<std::int64_t>(whole);
      due -= whole;
    }
    return out;
  }
};

struct ClusterState {
  ClusterSpec cluster;
  ModelSpec model;
  ModuleCatalog catalog;
  SpeedupParams speedup;
  OpCostModel costs;
  std::vector<InstanceView> instances;
  /// Memory per device outside any instance's footprint.
  std::vector<double> background_mb;

  std::size_t index_of_instance(int id) const {
    for (std::size_t i = 0; i < instances.size(); ++i) {
      if (instances[i].id == id) return i;
    }
    throw InvalidArgument("unknown instance " + std::to_string(id));
  }

  double background(std::size_t g) const { return g < background_mb.size() ? background_mb[g] : 0.0; }

  /// Memory per device with current KV. `reserve` charges every replica at
  /// least the configured replica size.
  std::vector<double> memory_used(double replica_reserve_mb = 0.0) const {
    std::vector<double> mem(cluster.size(), 0.0);
    for (std::size_t g = 0; g < mem.size(); ++g) mem[g] = background(g);
    for (const auto& inst : instances) {
      const auto f = memory_footprint(inst.placement, catalog, cluster, inst.kv, replica_reserve_mb);
      for (std::size_t g = 0; g < mem.size(); ++g) mem[g] += f[g];
    }
    return mem;
  }

  /// Memory per device once KV has grown to the projection horizon.
  std::vector<double> projected_memory() const {
    std::vector<double> mem(cluster.size(), 0.0);
    for (std::size_t g = 0; g < mem.size(); ++g) mem[g] = background(g);
    for (const auto& inst : instances) {
      const auto f = memory_footprint(inst.placement, catalog, cluster, inst.projected_kv());
      for (std::size_t g = 0; g < mem.size(); ++g) mem[g] += f[g];
    }
    return mem;
  }
};

/// Fraction of one instance's per-step compute that lands on each device.
inline std::vector<double> compute_share(const PlacementState& placement, const ModuleCatalog& catalog,
                                         const ClusterSpec& cluster, std::int64_t batch) {
  std::vector<double> share(cluster.size(), 0.0);
  const std::int64_t bs = std::max<std::int64_t>(batch, 1);
  double total = 0.0;
  for (int i = 1; i <= placement.n_layers(); ++i) {
    const auto& lp = placement.layer(i);
    const double layer = catalog.decoder_layer.gflops;
    if (!lp.overrides.empty()) {
      for (const auto& [dev, frac] : detail::layer_compute_split(lp, catalog)) share[cluster.index_of(dev)] += layer * frac;
      total += layer;
      continue;
    }
    const auto shards = split_batch(bs, static_cast<int>(lp.replicas.size()));
    for (std::size_t j = 0; j < lp.replicas.size(); ++j) {
      const double frac = static_cast<double>(shards[j]) / static_cast<double>(bs);
      share[cluster.index_of(lp.replicas[j].device)] += layer * frac;
      total += layer * frac;
    }
  }
  if (total > 0.0) {
    for (double& s : share) s /= total;
  }
  return share;
}

/// Device utilisation predicted for the current (possibly modified)
/// placements. An instance's observed load shrinks with its batch limit
/// once the limit drops below the running batch. Instances whose placement
/// is unchanged keep their observed distribution; others redistribute their
/// GFLOP/s by compute share.
inline std::vector<double> predicted_util(const ClusterState& state) {
  const auto& cl = state.cluster;
  std::vector<double> util(cl.size(), 0.0);
  for (const auto& inst : state.instances) {
    if (inst.device_util.empty()) continue;
    double scale = 1.0;
    if (inst.kv.batch > 0 && inst.batch_limit < inst.kv.batch) {
      scale = static_cast<double>(inst.batch_limit) / static_cast<double>(inst.kv.batch);
    }
    if (inst.placement == inst.observed_placement) {
      for (std::size_t g = 0; g < util.size() && g < inst.device_util.size(); ++g) {
        util[g] += inst.device_util[g] * scale;
      }
      continue;
    }
    double gflops = 0.0;
    for (std::size_t g = 0; g < cl.size() && g < inst.device_util.size(); ++g) {
      gflops += inst.device_util[g] * cl.devices[g].compute_gflops * scale;
    }
    const auto share = compute_share(inst.placement, state.catalog, cl, inst.kv.batch);
    for (std::size_t g = 0; g < util.size(); ++g) util[g] += gflops * share[g] / cl.devices[g].compute_gflops;
  }
  return util;
}

inline std::vector<double> observed_util(const ClusterState& state) {
  std::vector<double> util(state.cluster.size(), 0.0);
  for (const auto& inst : state.instances) {
    for (std::size_t g = 0; g < util.size() && g < inst.device_util.size(); ++g) util[g] += inst.device_util[g];
  }
  return util;
}

/// Devices hosting any part of the instance, in cluster order.
inline std::vector<DeviceId> devices_of(const ClusterState& state, std::size_t instance) {
  const auto used = state.instances.at(instance).placement.devices();
  std::vector<DeviceId> out;
  for (const auto& d : state.cluster.devices) {
    if (used.count(d.id)) out.push_back(d.id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scale-up

/// Devices with vacancy above t_up and room for one replica, most vacant
/// first (ties by id).
inline std::vector<DeviceId> get_eligible_nodes(const ClusterState& state, const ControllerConfig& cfg) {
  const auto mem = state.memory_used(cfg.replica_size_mb);
  const auto util = observed_util(state);
  std::vector<std::pair<double, DeviceId>> scored;
  for (std::size_t g = 0; g < state.cluster.size(); ++g) {
    const auto& dev = state.cluster.devices[g];
    const double vac = vacancy_rate(mem[g], util[g], dev);
    if (vac > cfg.t_up && dev.memory_mb - mem[g] >= cfg.replica_size_mb) scored.emplace_back(vac, dev.id);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<DeviceId> out;
  for (const auto& s : scored) out.push_back(s.second);
  return out;
}

/// Layers not yet on `dst`, ranked by the length of the replica run on
/// `dst` they would belong to (longest first, then lowest id). Layers with
/// split-off sub-modules cannot be replicated and are skipped.
inline std::vector<LayerId> sort_candidates_by_continuity(const PlacementState& placement, DeviceId dst,
                                                          int max_replicas) {
  if (max_replicas <= 0) return {};
  const int n = placement.n_layers();
  std::vector<std::pair<int, LayerId>> scored;
  for (LayerId i = 1; i <= n; ++i) {
    if (placement.hosts(i, dst) || !placement.layer(i).overrides.empty()) continue;
    int left = 0;
    for (LayerId j = i - 1; j >= 1 && placement.has_replica_on(j, dst); --j) ++left;
    int right = 0;
    for (LayerId j = i + 1; j <= n && placement.has_replica_on(j, dst); ++j) ++right;
    scored.emplace_back(1 + left + right, i);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<LayerId> out;
  for (std::size_t k = 0; k < scored.size() && static_cast<int>(k) < max_replicas; ++k) {
    out.push_back(scored[k].second);
  }
  return out;
}

/// Free memory scale-up may spend per device (cluster index order): the
/// room left after reserving replica headroom on eligible devices, 0 on the
/// rest.
inline std::vector<double> replica_budget_mb(const ClusterState& state, const ControllerConfig& cfg) {
  std::vector<double> budget(state.cluster.size(), 0.0);
  const auto mem = state.memory_used(cfg.replica_size_mb);
  for (DeviceId dev : get_eligible_nodes(state, cfg)) {
    const std::size_t g = state.cluster.index_of(dev);
    budget[g] = state.cluster.devices[g].memory_mb - mem[g];
  }
  return budget;
}

struct ScaleUpResult {
  ClusterState state;
  std::vector<ScalingOp> ops;
  double speedup_before = 1.0;
  double speedup_after = 1.0;
  /// sp_best after every executed replication.
  std::vector<double> speedup_trace;
};

inline ScaleUpResult scale_up(const ClusterState& state, std::size_t instance, const ControllerConfig& cfg) {
  ScaleUpResult res{state, {}, 1.0, 1.0, {}};
  auto& inst = res.state.instances.at(instance);
  const auto& cl = state.cluster;

  double sp_best = strategy_speedup(inst.placement, cl, state.model, state.speedup);
  res.speedup_before = sp_best;

  for (DeviceId dst : get_eligible_nodes(state, cfg)) {
    const std::size_t g = cl.index_of(dst);
    const double available = cl.devices[g].memory_mb - res.state.memory_used(cfg.replica_size_mb)[g];
    const int max_replicas = available > 0.0 ? static_cast<int>(std::floor(available / cfg.replica_size_mb)) : 0;

    for (LayerId layer : sort_candidates_by_continuity(inst.placement, dst, max_replicas)) {
      PlacementState trial = inst.placement;
      trial.layer(layer).replicas.push_back({dst, false});
      const double sp = strategy_speedup(trial, cl, state.model, state.speedup);
      if (!(sp > sp_best)) continue;

      ApplyOptions opts;
      opts.costs = state.costs;
      const auto mem = res.state.memory_used(cfg.replica_size_mb);
      const auto own = device_usage(inst.placement, state.catalog, cl);
      for (std::size_t d = 0; d < cl.size(); ++d) {
        opts.extra_mb.push_back(mem[d] - own.at(cl.devices[d].id).memory_used_mb);
      }
      try {
        inst.placement = apply(inst.placement, ReplicateLayer{layer, dst}, state.catalog, cl, opts).placement;
      } catch (const InfeasibleOp&) {
        continue;
      }
      res.ops.push_back(ReplicateLayer{layer, dst});
      sp_best = sp;
      res.speedup_trace.push_back(sp);
    }
  }
  res.speedup_after = sp_best;
  return res;
}

// ---------------------------------------------------------------------------
// Scale-down

inline bool memory_violation(const ClusterState& state, DeviceId device) {
  const std::size_t g = state.cluster.index_of(device);
  return state.projected_memory()[g] >= state.cluster.devices[g].memory_mb;
}

/// Windowed SLO violations above t_down. Once the instance's placement or
/// batch limit has changed, the violation only persists while the
/// device's predicted utilisation stays above target_util.
inline bool slo_violation(const ClusterState& state, std::size_t instance, const ControllerConfig& cfg,
                          std::optional<DeviceId> device) {
  const auto& inst = state.instances.at(instance);
  if (inst.slo_suppressed || !(inst.violation_rate > cfg.t_down)) return false;
  if (inst.unchanged()) return true;
  const auto util = predicted_util(state);
  if (device) return util[state.cluster.index_of(*device)] > cfg.target_util;
  for (DeviceId d : devices_of(state, instance)) {
    if (util[state.cluster.index_of(d)] > cfg.target_util) return true;
  }
  return false;
}

/// Device-level check when `device` is set, otherwise across every device
/// hosting the instance.
inline bool is_violating(const ClusterState& state, std::size_t instance, const ControllerConfig& cfg,
                         std::optional<DeviceId> device = std::nullopt) {
  if (device) return memory_violation(state, *device) || slo_violation(state, instance, cfg, device);
  for (DeviceId d : devices_of(state, instance)) {
    if (memory_violation(state, d)) return true;
  }
  return slo_violation(state, instance, cfg, std::nullopt);
}

enum class Pressure { None, Memory, Compute, Both };

inline Pressure classify_pressure(const ClusterState& state, std::size_t instance, DeviceId device,
                                  const ControllerConfig& cfg) {
  const bool mem = memory_violation(state, device);
  const bool cpu = slo_violation(state, instance, cfg, device);
  if (mem && cpu) return Pressure::Both;
  if (mem) return Pressure::Memory;
  if (cpu) return Pressure::Compute;
  return Pressure::None;
}

struct ModuleRef {
  LayerId layer = 1;
  ModuleKind kind = ModuleKind::DecoderLayer;
  bool operator==(const ModuleRef&) const = default;
};

/// Migration candidates on `src`, ordered by the kind of pressure there:
/// memory -> KV caches first, compute -> projections first, both -> whole
/// layers. Later layers come first so moved blocks stay contiguous. At
/// most `cfg.max_migration_candidates` entries.
inline std::vector<ModuleRef> filter_modules(const ClusterState& state, std::size_t instance, DeviceId src,
                                             const ControllerConfig& cfg) {
  const auto& p = state.instances.at(instance).placement;
  const Pressure pressure = classify_pressure(state, instance, src, cfg);
  std::vector<ModuleRef> out;
  if (pressure == Pressure::None) return out;

  std::vector<LayerId> resident;  // originals on src, last layer first
  for (LayerId i = p.n_layers(); i >= 1; --i) {
    if (p.original_device(i) == src) resident.push_back(i);
  }
  auto whole_layers = [&] {
    for (LayerId i : resident) out.push_back({i, ModuleKind::DecoderLayer});
  };

  switch (pressure) {
    case Pressure::Memory: {
      int kv = 0;
      for (LayerId i = p.n_layers(); i >= 1 && kv < cfg.kv_candidates; --i) {
        if (p.replica_count(i) == 1 && p.kv_device(i) == src) {
          out.push_back({i, ModuleKind::KvCache});
          ++kv;
        }
      }
      whole_layers();
      break;
    }
    case Pressure::Compute:
      for (LayerId i : resident) {
        if (p.replica_count(i) > 1) continue;
        for (ModuleKind k : {ModuleKind::GateProj, ModuleKind::UpProj, ModuleKind::DownProj, ModuleKind::QProj,
                             ModuleKind::KProj, ModuleKind::VProj, ModuleKind::OProj}) {
          if (!p.layer(i).overrides.count(k) && !p.layer(i).overrides.count(ModuleKind::SelfAttention)) {
            out.push_back({i, k});
          }
        }
        break;  // projections of the last resident layer only
      }
      whole_layers();
      break;
    default:
      whole_layers();
      break;
  }
  if (static_cast<int>(out.size()) > cfg.max_migration_candidates) {
    out.resize(static_cast<std::size_t>(cfg.max_migration_candidates));
  }
  return out;
}

namespace detail {

inline DeviceId module_device(const PlacementState& p, const ModuleRef& m) {
  if (m.kind == ModuleKind::DecoderLayer) return p.original_device(m.layer);
  if (m.kind == ModuleKind::KvCache) return p.kv_device(m.layer);
  const auto& ov = p.layer(m.layer).overrides;
  auto it = ov.find(m.kind);
  return it == ov.end() ? p.original_device(m.layer) : it->second;
}

inline ScalingOp migration_op(const ModuleRef& m, DeviceId dst, bool with_kv) {
  if (m.kind == ModuleKind::DecoderLayer) return MigrateLayer{m.layer, dst, with_kv};
  return MigrateSubModule{m.layer, m.kind, dst};
}

inline ApplyOptions apply_options(const ClusterState& state, std::size_t instance, bool projected) {
  const auto& inst = state.instances.at(instance);
  const auto& cl = state.cluster;
  ApplyOptions opts;
  opts.costs = state.costs;
  const auto mem = projected ? state.projected_memory() : state.memory_used();
  const auto own = device_usage(inst.placement, state.catalog, cl);
  for (std::size_t g = 0; g < cl.size(); ++g) {
    opts.extra_mb.push_back(mem[g] - own.at(cl.devices[g].id).memory_used_mb);
  }
  const KvLoad kv = projected ? inst.projected_kv() : inst.kv;
  for (LayerId i = 1; i <= inst.placement.n_layers(); ++i) {
    opts.layer_kv_mb[i] = layer_kv_mb(inst.placement, i, state.catalog, kv);
  }
  return opts;
}

}  // namespace detail

/// Device that would be most vacant after receiving `module`; it must fit
/// the module (weights plus projected KV) and stay under target_util.
inline DeviceId find_optimal_destination(const ClusterState& state, std::size_t instance, const ModuleRef& module,
                                         const ControllerConfig& cfg, bool with_kv = true) {
  const auto& inst = state.instances.at(instance);
  const auto& p = inst.placement;
  const DeviceId src = detail::module_device(p, module);

  std::optional<std::pair<double, DeviceId>> best;
  for (const auto& dev : state.cluster.devices) {
    if (dev.id == src) continue;
    if (module.kind == ModuleKind::DecoderLayer && p.hosts(module.layer, dev.id)) continue;

    ClusterState trial = state;
    auto& tp = trial.instances.at(instance).placement;
    try {
      tp = apply(p, detail::migration_op(module, dev.id, with_kv), state.catalog, state.cluster,
                 detail::apply_options(state, instance, true))
               .placement;
    } catch (const Error&) {
      continue;
    }
    const std::size_t g = state.cluster.index_of(dev.id);
    const double mem = trial.projected_memory()[g];
    const double util = predicted_util(trial)[g];
    if (mem >= dev.memory_mb || util > cfg.target_util) continue;
    const double vac = vacancy_rate(mem, util, dev);
    if (!best || vac > best->first) best = std::make_pair(vac, dev.id);
  }
  if (!best) {
    throw NoFeasibleDestination("no device can take " + std::string(to_string(module.kind)) + " of layer " +
                                std::to_string(module.layer));
  }
  return best->second;
}

struct PhasedOp {
  int phase = 1;
  int instance = 0;  // id of the instance whose placement the op changes
  ScalingOp op;
};

struct BatchReduction {
  std::int64_t batch_limit = 0;
  double offloaded_fraction = 0.0;
};

struct ScaleDownResult {
  ClusterState state;
  std::vector<PhasedOp> ops;
  std::vector<BatchReduction> reductions;  // phase 3 steps
  int final_phase = 0;                     // 0 when nothing was needed
  bool resolved = false;
};

inline ScaleDownResult scale_down(const ClusterState& state, std::size_t instance, DeviceId src,
                                  const ControllerConfig& cfg) {
  ScaleDownResult res{state, {}, {}, 0, false};
  if (!is_violating(state, instance, cfg, src)) {
    res.resolved = true;
    return res;
  }
  const int inst_id = state.instances.at(instance).id;

  // Phase 1: move modules off the source device.
  res.final_phase = 1;
  const Pressure pressure = classify_pressure(state, instance, src, cfg);
  const bool with_kv = pressure != Pressure::Compute;
  for (const ModuleRef& m : filter_modules(state, instance, src, cfg)) {
    auto& inst = res.state.instances.at(instance);
    if (detail::module_device(inst.placement, m) != src) continue;
    DeviceId dst;
    try {
      dst = find_optimal_destination(res.state, instance, m, cfg, with_kv);
    } catch (const NoFeasibleDestination&) {
      continue;
    }
    const ScalingOp op = detail::migration_op(m, dst, with_kv);
    try {
      inst.placement = apply(inst.placement, op, state.catalog, state.cluster,
                             detail::apply_options(res.state, instance, true))
                           .placement;
    } catch (const Error&) {
      continue;
    }
    res.ops.push_back({1, inst_id, op});
    if (!is_violating(res.state, instance, cfg, src)) {
      res.resolved = true;
      return res;
    }
  }

  // Phase 2: evict replicas co-located on the source device, least
  // continuous first.
  res.final_phase = 2;
  struct Evictee {
    std::size_t run_length;
    LayerId layer;
    std::size_t instance;
  };
  std::vector<Evictee> evictees;
  for (std::size_t k = 0; k < res.state.instances.size(); ++k) {
    for (const auto& run : replica_runs(res.state.instances[k].placement, src)) {
      for (LayerId l : run) evictees.push_back({run.size(), l, k});
    }
  }
  std::sort(evictees.begin(), evictees.end(), [](const Evictee& a, const Evictee& b) {
    if (a.run_length != b.run_length) return a.run_length < b.run_length;
    if (a.layer != b.layer) return a.layer > b.layer;
    return a.instance > b.instance;
  });
  for (const auto& e : evictees) {
    auto& target = res.state.instances[e.instance];
    const ScalingOp op = EvictReplica{e.layer, src};
    target.placement = apply(target.placement, op, state.catalog, state.cluster).placement;
    res.ops.push_back({2, target.id, op});
    if (!is_violating(res.state, instance, cfg, src)) {
      res.resolved = true;
      return res;
    }
  }

  // Phase 3: shrink the batch and offload KV until the instance is clear.
  res.final_phase = 3;
  auto& inst = res.state.instances.at(instance);
  while (is_violating(res.state, instance, cfg) && inst.batch_limit > 1) {
    inst.batch_limit = std::max<std::int64_t>(1, inst.batch_limit - cfg.bs_step);
    inst.kv.offloaded_fraction = 1.0 - (1.0 - inst.kv.offloaded_fraction) * (1.0 - cfg.offload_fraction);
    res.reductions.push_back({inst.batch_limit, inst.kv.offloaded_fraction});
    if (!is_violating(res.state, instance, cfg)) break;
  }
  res.resolved = !is_violating(res.state, instance, cfg);
  return res;
}

// ---------------------------------------------------------------------------
// Controller

enum class Trigger { None, ScaleDown, Relax, ScaleUp };

inline std::string_view to_string(Trigger t) noexcept {
  switch (t) {
    case Trigger::ScaleDown: return "scale_down";
    case Trigger::Relax: return "relax";
    case Trigger::ScaleUp: return "scale_up";
    default: return "none";
  }
}

struct ControllerDecision {
  int instance = 0;
  Trigger trigger = Trigger::None;
  std::optional<DeviceId> device;  // violating device for scale-down
  std::vector<PhasedOp> ops;
  std::vector<BatchReduction> reductions;
  int final_phase = 0;
  double speedup_before = 1.0;
  double speedup_after = 1.0;
  std::int64_t batch_before = 0;
  std::int64_t batch_after = 0;
  double offload_before = 0.0;
  double offload_after = 0.0;
  ClusterState state;  // snapshot after the decision
};

inline double vacancy_signal(const ClusterState& state, const ControllerConfig& cfg) {
  const auto mem = state.memory_used();
  const auto util = observed_util(state);
  double best = 0.0;
  double sum = 0.0;
  for (std::size_t g = 0; g < state.cluster.size(); ++g) {
    const double v = vacancy_rate(mem[g], util[g], state.cluster.devices[g]);
    best = std::max(best, v);
    sum += v;
  }
  return cfg.vacancy_mode == VacancyMode::PerDeviceMax ? best : sum / static_cast<double>(state.cluster.size());
}

/// One controller evaluation for one instance: scale down if any of its
/// devices violates, otherwise undo earlier batch/offload cuts when memory
/// allows, otherwise scale up on vacancy above t_up.
inline ControllerDecision controller_step(const ClusterState& state, std::size_t instance,
                                          const ControllerConfig& cfg) {
  const auto& inst = state.instances.at(instance);
  ControllerDecision dec;
  dec.instance = inst.id;
  dec.state = state;
  dec.speedup_before = dec.speedup_after = strategy_speedup(inst.placement, state.cluster, state.model, state.speedup);
  dec.batch_before = dec.batch_after = inst.batch_limit;
  dec.offload_before = dec.offload_after = inst.kv.offloaded_fraction;

  for (DeviceId d : devices_of(state, instance)) {
    if (!is_violating(state, instance, cfg, d)) continue;
    auto down = scale_down(state, instance, d, cfg);
    dec.trigger = Trigger::ScaleDown;
    dec.device = d;
    dec.ops = std::move(down.ops);
    dec.reductions = std::move(down.reductions);
    dec.final_phase = down.final_phase;
    dec.state = std::move(down.state);
    const auto& after = dec.state.instances.at(instance);
    dec.speedup_after = strategy_speedup(after.placement, state.cluster, state.model, state.speedup);
    dec.batch_after = after.batch_limit;
    dec.offload_after = after.kv.offloaded_fraction;
    return dec;
  }

  if ((inst.batch_limit < inst.max_batch || inst.kv.offloaded_fraction > 0.0) && inst.violation_rate <= 0.0) {
    ClusterState relaxed = state;
    auto& r = relaxed.instances.at(instance);
    r.batch_limit = std::min(inst.max_batch, inst.batch_limit + cfg.bs_step);
    r.kv.offloaded_fraction = 0.0;
    bool fits = true;
    const auto mem = relaxed.projected_memory();
    for (DeviceId d : devices_of(relaxed, instance)) {
      const std::size_t g = relaxed.cluster.index_of(d);
      fits = fits && mem[g] < relaxed.cluster.devices[g].memory_mb;
    }
    if (fits) {
      dec.trigger = Trigger::Relax;
      dec.batch_after = r.batch_limit;
      dec.offload_after = 0.0;
      dec.state = std::move(relaxed);
      return dec;
    }
  }

  if (vacancy_signal(state, cfg) > cfg.t_up) {
    auto up = scale_up(state, instance, cfg);
    dec.trigger = Trigger::ScaleUp;
    for (const auto& op : up.ops) dec.ops.push_back({0, inst.id, op});
    dec.speedup_before = up.speedup_before;
    dec.speedup_after = up.speedup_after;
    dec.state = std::move(up.state);
  }
  return dec;
}

}  // namespace modscale
