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

// Scaling operations on a placement: replicate, migrate, evict. Each
// accepted op yields a new placement plus a transition cost interpolated
// from measured replication/migration anchors.

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "modscale/domain.hpp"
#include "modscale/error.hpp"

namespace modscale {

/// Splits `bs` requests over `p` replicas; the remainder goes to the later
/// replicas, so (15, 2) -> [7, 8].
inline std::vector<std::int64_t> split_batch(std::int64_t bs, int p) {
  if (bs < 0) throw InvalidArgument("batch size must be >= 0");
  if (p < 1) throw InvalidArgument("replica count must be >= 1");
  const std::int64_t base = bs / p;
  const std::int64_t rem = bs % p;
  std::vector<std::int64_t> out(static_cast<std::size_t>(p), base);
  for (std::int64_t j = p - rem; j < p; ++j) out[static_cast<std::size_t>(j)] += 1;
  return out;
}

/// Resident KV state of one model instance.
struct KvLoad {
  double tokens = 0.0;          // summed context length over the running batch
  std::int64_t batch = 0;       // running requests, used to shard KV across replicas
  double offloaded_fraction = 0.0;

  bool operator==(const KvLoad&) const = default;
};

/// Memory held on each cluster device (indexed like `cluster.devices`) by
/// one instance: static module weights plus KV cache.
///
/// KV of a replicated layer is split across its replicas in proportion to
/// their batch shard. With `replica_reserve_mb > 0`, every non-original
/// replica is charged at least that much (weights plus KV headroom).
inline std::vector<double> memory_footprint(const PlacementState& placement, const ModuleCatalog& catalog,
                                            const ClusterSpec& cluster, const KvLoad& kv,
                                            double replica_reserve_mb = 0.0) {
  std::vector<double> mem(cluster.size(), 0.0);
  const double on_device_tokens = kv.tokens * (1.0 - kv.offloaded_fraction);
  const double kv_mb_per_token = catalog.kv_mb_per_token_per_layer();

  for (int i = 1; i <= placement.n_layers(); ++i) {
    const auto& lp = placement.layer(i);
    const int p = static_cast<int>(lp.replicas.size());
    const auto shards = split_batch(kv.batch, p);
    for (std::size_t j = 0; j < lp.replicas.size(); ++j) {
      const auto& r = lp.replicas[j];
      const double share = kv.batch > 0 ? static_cast<double>(shards[j]) / static_cast<double>(kv.batch)
                                        : 1.0 / p;
      const double kv_mb = on_device_tokens * share * kv_mb_per_token;
      if (r.is_original) {
        mem[cluster.index_of(r.device)] += detail::resident_layer_cost(lp, catalog).memory_mb;
        mem[cluster.index_of(placement.kv_device(i))] += kv_mb;
      } else {
        mem[cluster.index_of(r.device)] +=
            std::max(replica_reserve_mb, catalog.decoder_layer.memory_mb + kv_mb);
      }
    }
    for (const auto& [k, d] : lp.overrides) mem[cluster.index_of(d)] += catalog.cost(k).memory_mb;
  }
  return mem;
}

/// KV megabytes attached to the original replica of `layer`.
inline double layer_kv_mb(const PlacementState& placement, LayerId layer, const ModuleCatalog& catalog,
                          const KvLoad& kv) {
  const int p = placement.replica_count(layer);
  const auto shards = split_batch(kv.batch, p);
  const auto& reps = placement.layer(layer).replicas;
  for (std::size_t j = 0; j < reps.size(); ++j) {
    if (!reps[j].is_original) continue;
    const double share = kv.batch > 0 ? static_cast<double>(shards[j]) / static_cast<double>(kv.batch) : 1.0 / p;
    return kv.tokens * (1.0 - kv.offloaded_fraction) * share * catalog.kv_mb_per_token_per_layer();
  }
  return 0.0;
}

struct ReplicateLayer {
  LayerId layer = 1;
  DeviceId dst = 0;
  bool operator==(const ReplicateLayer&) const = default;
};

struct MigrateLayer {
  LayerId layer = 1;
  DeviceId dst = 0;
  bool with_kv = true;
  bool operator==(const MigrateLayer&) const = default;
};

struct MigrateSubModule {
  LayerId layer = 1;
  ModuleKind kind = ModuleKind::KvCache;
  DeviceId dst = 0;
  bool operator==(const MigrateSubModule&) const = default;
};

struct EvictReplica {
  LayerId layer = 1;
  DeviceId device = 0;
  bool operator==(const EvictReplica&) const = default;
};

using ScalingOp = std::variant<ReplicateLayer, MigrateLayer, MigrateSubModule, EvictReplica>;

inline std::string_view op_name(const ScalingOp& op) noexcept {
  return std::visit(
      [](const auto& o) -> std::string_view {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, ReplicateLayer>) return "replicate_layer";
        else if constexpr (std::is_same_v<T, MigrateLayer>) return "migrate_layer";
        else if constexpr (std::is_same_v<T, MigrateSubModule>) return "migrate_submodule";
        else return "evict_replica";
      },
      op);
}

inline LayerId op_layer(const ScalingOp& op) noexcept {
  return std::visit([](const auto& o) { return o.layer; }, op);
}

/// Replica topology (and hence P) changes.
inline bool changes_topology(const ScalingOp& op) noexcept {
  return std::holds_alternative<ReplicateLayer>(op) || std::holds_alternative<EvictReplica>(op);
}

struct CostAnchor {
  double layers = 0.0;
  double replicate_s = 0.0;
  double migrate_s = 0.0;
  double memory_mb = 0.0;

  bool operator==(const CostAnchor&) const = default;
};

/// Measured replication/migration cost per layer count, interpolated
/// piecewise-linearly and extrapolated from the outer segments.
struct OpCostModel {
  std::vector<CostAnchor> anchors = {
      {1, 0.2987, 0.2492, 1107},
      {10, 0.3581, 0.3181, 6579},
      {20, 0.3826, 0.3426, 12659},
      {30, 0.4947, 0.3947, 18739},
      {40, 0.8938, 0.8138, 24819},
  };
  double coordination_s = 0.0391;
  /// Consecutive same-kind layer ops to one device are costed as a single
  /// k-layer transfer; otherwise each op pays the 1-layer cost.
  bool batched = true;

  bool operator==(const OpCostModel&) const = default;

  void validate() const {
    if (anchors.size() < 2) throw InvalidArgument("cost model needs at least two anchors");
    for (std::size_t i = 1; i < anchors.size(); ++i) {
      const auto& a = anchors[i - 1];
      const auto& b = anchors[i];
      if (!(b.layers > a.layers && b.replicate_s > a.replicate_s && b.migrate_s > a.migrate_s &&
            b.memory_mb > a.memory_mb)) {
        throw InvalidArgument("cost anchors must be strictly increasing in every column");
      }
    }
    if (coordination_s < 0.0) throw InvalidArgument("coordination time must be >= 0");
  }

  double replicate_time(double layers) const { return interpolate(layers, &CostAnchor::replicate_s); }
  double migrate_time(double layers) const { return interpolate(layers, &CostAnchor::migrate_s); }
  double memory(double layers) const { return interpolate(layers, &CostAnchor::memory_mb); }

 private:
  double interpolate(double x, double CostAnchor::*col) const {
    std::size_t hi = 1;
    while (hi + 1 < anchors.size() && x > anchors[hi].layers) ++hi;
    const auto& a = anchors[hi - 1];
    const auto& b = anchors[hi];
    const double t = (x - a.layers) / (b.layers - a.layers);
    return std::max(0.0, a.*col + t * (b.*col - a.*col));
  }
};

struct TransitionCost {
  double time_s = 0.0;          // data movement
  double coordination_s = 0.0;  // replica re-synchronisation after topology changes
  double transient_mb = 0.0;    // peak extra memory while the op runs

  double total_s() const noexcept { return time_s + coordination_s; }
};

struct OpLogRecord {
  std::int64_t tick = 0;
  std::string op;
  LayerId layer = 0;
  std::string module;
  DeviceId src = -1;
  DeviceId dst = -1;
  double time_s = 0.0;
  double transient_mb = 0.0;
};

struct ApplyOptions {
  /// Memory per device (cluster index order) not covered by this
  /// placement's static weights: other instances, KV cache, reservations.
  std::vector<double> extra_mb;
  /// KV attached to each layer's original replica; moves with `with_kv`
  /// layer migrations and KV sub-module migrations.
  std::map<LayerId, double> layer_kv_mb;
  OpCostModel costs;
  std::int64_t tick = 0;
};

struct ApplyResult {
  PlacementState placement;
  TransitionCost cost;
  std::vector<OpLogRecord> log;
};

namespace detail {

struct StepOutcome {
  PlacementState placement;
  double moved_layers = 0.0;  // layer-equivalents moved, for cost interpolation
  OpLogRecord record;
  DeviceId kv_from = -1;
  DeviceId kv_to = -1;
  double kv_mb = 0.0;
};

inline void require_room(const PlacementState& placement, const ModuleCatalog& catalog,
                         const ClusterSpec& cluster, const ApplyOptions& opts, DeviceId dst,
                         double required_mb, const std::string& what) {
  const auto usage = device_usage(placement, catalog, cluster);
  const std::size_t idx = cluster.index_of(dst);
  const double extra = idx < opts.extra_mb.size() ? opts.extra_mb[idx] : 0.0;
  const double free_mb = cluster.devices[idx].memory_mb - usage.at(dst).memory_used_mb - extra;
  if (required_mb > free_mb) {
    throw InfeasibleOp(what + ": device " + std::to_string(dst) + " lacks " +
                           std::to_string(required_mb - free_mb) + " MB",
                       required_mb - free_mb);
  }
}

inline StepOutcome apply_one(const PlacementState& placement, const ScalingOp& op,
                             const ModuleCatalog& catalog, const ClusterSpec& cluster,
                             const ApplyOptions& opts) {
  StepOutcome out{placement, 1.0, {}, -1, -1, 0.0};
  out.record.tick = opts.tick;
  out.record.op = std::string(op_name(op));
  out.record.layer = op_layer(op);
  PlacementState& next = out.placement;

  std::visit(
      [&](const auto& o) {
        using T = std::decay_t<decltype(o)>;
        const auto& lp = placement.layer(o.layer);
        const std::string where = std::string(op_name(op)) + " layer " + std::to_string(o.layer);

        if constexpr (std::is_same_v<T, ReplicateLayer>) {
          cluster.index_of(o.dst);
          if (!lp.overrides.empty()) throw InvalidArgument(where + ": layer has sub-module overrides");
          if (placement.hosts(o.layer, o.dst)) {
            throw InvalidArgument(where + ": device " + std::to_string(o.dst) + " already hosts it");
          }
          require_room(placement, catalog, cluster, opts, o.dst, catalog.decoder_layer.memory_mb, where);
          next.layer(o.layer).replicas.push_back({o.dst, false});
          out.record.module = "decoder_layer";
          out.record.src = lp.original().device;
          out.record.dst = o.dst;
        } else if constexpr (std::is_same_v<T, MigrateLayer>) {
          cluster.index_of(o.dst);
          const DeviceId src = lp.original().device;
          if (placement.hosts(o.layer, o.dst)) {
            throw InvalidArgument(where + ": device " + std::to_string(o.dst) + " already hosts it");
          }
          const DeviceId kv_at = placement.kv_device(o.layer);
          auto kv_it = opts.layer_kv_mb.find(o.layer);
          const double kv_mb = kv_it == opts.layer_kv_mb.end() ? 0.0 : kv_it->second;
          const bool kv_moves = o.with_kv && kv_at != o.dst;
          const double weights = resident_layer_cost(lp, catalog).memory_mb;
          require_room(placement, catalog, cluster, opts, o.dst, weights + (kv_moves ? kv_mb : 0.0), where);
          auto& nl = next.layer(o.layer);
          for (auto& r : nl.replicas) {
            if (r.is_original) r.device = o.dst;
          }
          if (o.with_kv) {
            nl.overrides.erase(ModuleKind::KvCache);
            if (kv_moves) {
              out.kv_from = kv_at;
              out.kv_to = o.dst;
              out.kv_mb = kv_mb;
            }
          } else if (!lp.overrides.count(ModuleKind::KvCache)) {
            if (lp.replicas.size() > 1) throw InvalidArgument(where + ": replicated layers cannot split sub-modules");
            nl.overrides[ModuleKind::KvCache] = src;
          }
          // Sub-modules parked on the destination fold back into the layer.
          for (auto it = nl.overrides.begin(); it != nl.overrides.end();) {
            it = (it->second == o.dst) ? nl.overrides.erase(it) : std::next(it);
          }
          out.moved_layers = weights / catalog.decoder_layer.memory_mb;
          out.record.module = "decoder_layer";
          out.record.src = src;
          out.record.dst = o.dst;
        } else if constexpr (std::is_same_v<T, MigrateSubModule>) {
          cluster.index_of(o.dst);
          if (o.kind == ModuleKind::DecoderLayer) throw InvalidArgument(where + ": use migrate_layer for whole layers");
          if (lp.replicas.size() > 1) throw InvalidArgument(where + ": replicated layers cannot split sub-modules");
          for (const auto& [k, d] : lp.overrides) {
            if (is_part_of(k, o.kind) || is_part_of(o.kind, k)) {
              throw InvalidArgument(where + ": overlaps existing override of " + std::string(to_string(k)));
            }
          }
          const DeviceId origin = lp.original().device;
          const DeviceId src = o.kind == ModuleKind::KvCache
                                   ? placement.kv_device(o.layer)
                                   : (lp.overrides.count(o.kind) ? lp.overrides.at(o.kind) : origin);
          if (src == o.dst) throw InvalidArgument(where + ": module already on device " + std::to_string(o.dst));
          double required = catalog.cost(o.kind).memory_mb;
          if (o.kind == ModuleKind::KvCache) {
            auto kv_it = opts.layer_kv_mb.find(o.layer);
            const double kv_mb = kv_it == opts.layer_kv_mb.end() ? 0.0 : kv_it->second;
            required += kv_mb;
            out.kv_from = src;
            out.kv_to = o.dst;
            out.kv_mb = kv_mb;
          }
          require_room(placement, catalog, cluster, opts, o.dst, required, where);
          auto& nl = next.layer(o.layer);
          if (o.dst == origin) {
            nl.overrides.erase(o.kind);
          } else {
            nl.overrides[o.kind] = o.dst;
          }
          out.moved_layers = required / catalog.decoder_layer.memory_mb;
          out.record.module = std::string(to_string(o.kind));
          out.record.src = src;
          out.record.dst = o.dst;
        } else {
          auto& reps = next.layer(o.layer).replicas;
          auto it = std::find_if(reps.begin(), reps.end(),
                                 [&](const Replica& r) { return r.device == o.device; });
          if (it == reps.end()) {
            throw InvalidArgument(where + ": no replica on device " + std::to_string(o.device));
          }
          if (it->is_original) throw InvalidArgument(where + ": refusing to evict the original replica");
          reps.erase(it);
          out.moved_layers = 0.0;
          out.record.module = "decoder_layer";
          out.record.src = o.device;
          out.record.dst = -1;
        }
      },
      op);
  return out;
}

inline TransitionCost group_cost(const ScalingOp& kind, double layers, const OpCostModel& m) {
  TransitionCost c;
  if (std::holds_alternative<EvictReplica>(kind)) return c;
  c.time_s = std::holds_alternative<ReplicateLayer>(kind) ? m.replicate_time(layers) : m.migrate_time(layers);
  c.transient_mb = m.memory(layers);
  return c;
}

inline DeviceId op_dst(const ScalingOp& op) noexcept {
  return std::visit(
      [](const auto& o) -> DeviceId {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, EvictReplica>) return o.device;
        else return o.dst;
      },
      op);
}

}  // namespace detail

/// Applies `ops` in order against a copy of `placement`. The first op that
/// is invalid or does not fit aborts the whole batch by rethrowing; the
/// caller's placement is never modified.
inline ApplyResult batch_apply(const PlacementState& placement, const std::vector<ScalingOp>& ops,
                               const ModuleCatalog& catalog, const ClusterSpec& cluster,
                               const ApplyOptions& options = {}) {
  ApplyOptions opts = options;
  opts.extra_mb.resize(cluster.size(), 0.0);
  ApplyResult result{placement, {}, {}};
  bool topology_changed = false;

  // Consecutive ops of the same kind towards the same device share one
  // transfer in batched mode.
  std::size_t group_start = 0;
  double group_layers = 0.0;
  std::vector<std::size_t> record_idx;

  auto flush = [&](std::size_t end) {
    if (end == group_start) return;
    const TransitionCost c = detail::group_cost(ops[group_start], group_layers, opts.costs);
    result.cost.time_s += c.time_s;
    result.cost.transient_mb = std::max(result.cost.transient_mb, c.transient_mb);
    // Spread the group's cost evenly over its log records.
    const double n = static_cast<double>(end - group_start);
    for (std::size_t i = group_start; i < end; ++i) {
      result.log[i].time_s = c.time_s / n;
      result.log[i].transient_mb = c.transient_mb;
    }
    group_start = end;
    group_layers = 0.0;
  };

  for (std::size_t i = 0; i < ops.size(); ++i) {
    const bool joins = opts.costs.batched && i > group_start && ops[i].index() == ops[group_start].index() &&
                       detail::op_dst(ops[i]) == detail::op_dst(ops[group_start]) &&
                       (std::holds_alternative<ReplicateLayer>(ops[i]) ||
                        std::holds_alternative<MigrateLayer>(ops[i]));
    if (!joins) flush(i);

    auto step = detail::apply_one(result.placement, ops[i], catalog, cluster, opts);
    if (step.kv_mb > 0.0) {
      opts.extra_mb[cluster.index_of(step.kv_from)] -= step.kv_mb;
      opts.extra_mb[cluster.index_of(step.kv_to)] += step.kv_mb;
    }
    result.placement = std::move(step.placement);
    result.log.push_back(std::move(step.record));
    group_layers += step.moved_layers;
    topology_changed = topology_changed || changes_topology(ops[i]);
  }
  flush(ops.size());
  if (topology_changed) result.cost.coordination_s = opts.costs.coordination_s;
  return result;
}

inline ApplyResult apply(const PlacementState& placement, const ScalingOp& op, const ModuleCatalog& catalog,
                         const ClusterSpec& cluster, const ApplyOptions& options = {}) {
  return batch_apply(placement, {op}, catalog, cluster, options);
}

/// Maximal runs of consecutive layer ids that have a (non-original) replica
/// on `device`, e.g. {3, 4, 7} -> [[3, 4], [7]].
inline std::vector<std::vector<LayerId>> replica_runs(const PlacementState& placement, DeviceId device) {
  std::vector<std::vector<LayerId>> runs;
  for (int i = 1; i <= placement.n_layers(); ++i) {
    if (!placement.has_replica_on(i, device)) continue;
    if (!runs.empty() && runs.back().back() == i - 1) {
      runs.back().push_back(i);
    } else {
      runs.push_back({i});
    }
  }
  return runs;
}

}  // namespace modscale
