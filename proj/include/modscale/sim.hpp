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

// Deterministic serving simulator.
//
// Time advances in 1 ms ticks, jumping straight to the next tick on which
// something happens. Each instance runs one continuous batch: arrivals
// join at step boundaries up to the batch limit, every step produces one
// token per running request and joiners also pay their prefill. Step
// duration follows the speedup model's compute term (scaled by kappa_c),
// a communication term counted per replica-run boundary (scaled by
// kappa_b) and a fixed overhead.
//
// The monitor emits one metrics row per interval; the controller runs
// inline every eval period and its scaling ops take effect atomically
// once their transition time has elapsed.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "modscale/autoscaler.hpp"
#include "modscale/domain.hpp"
#include "modscale/error.hpp"
#include "modscale/ops.hpp"
#include "modscale/speedup.hpp"
#include "modscale/workload.hpp"

namespace modscale {

inline constexpr double kTicksPerSecond = 1000.0;

inline std::int64_t to_ticks(double seconds) { return std::llround(seconds * kTicksPerSecond); }
inline double to_seconds(std::int64_t ticks) { return static_cast<double>(ticks) / kTicksPerSecond; }

/// Converts abstract work units to seconds.
struct CalibrationParams {
  double kappa_c = 4.3e-8;   // s per compute unit (d^2 * tokens / GFLOP/s)
  double kappa_b = 4e-6;     // s per communication unit (d * tokens / MB/s)
  double overhead_s = 0.002;  // fixed per step

  bool operator==(const CalibrationParams&) const = default;

  void validate() const {
    if (!(kappa_c > 0.0) || !(kappa_b > 0.0) || !(overhead_s > 0.0)) {
      throw InvalidArgument("calibration constants must be > 0");
    }
  }
};

struct InstanceSpec {
  int id = 0;
  PlacementState placement;
  std::int64_t max_batch = 32;

  bool operator==(const InstanceSpec&) const = default;
};

struct SimOptions {
  double restart_penalty_s = 30.0;
  double monitor_interval_s = 1.0;
  /// After arrivals stop, keep serving at most this long.
  double max_drain_s = 600.0;

  bool operator==(const SimOptions&) const = default;
};

struct Scenario {
  std::uint64_t seed = 42;
  ClusterSpec cluster;
  ModelSpec model;
  ModuleCatalog catalog;
  std::vector<InstanceSpec> instances;
  WorkloadSpec workload;
  ControllerConfig controller;
  CalibrationParams calibration;
  SpeedupParams speedup;
  OpCostModel costs;
  SimOptions sim;

  void validate() const {
    cluster.validate();
    model.validate();
    catalog.validate();
    workload.validate();
    controller.validate();
    calibration.validate();
    speedup.validate();
    costs.validate();
    if (instances.empty()) throw InvalidArgument("scenario needs at least one instance");
    std::set<int> ids;
    for (const auto& inst : instances) {
      if (!ids.insert(inst.id).second) throw InvalidArgument("duplicate instance id " + std::to_string(inst.id));
      if (inst.placement.n_layers() != model.n_layers) {
        throw InvalidArgument("instance " + std::to_string(inst.id) + " placement does not cover " +
                              std::to_string(model.n_layers) + " layers");
      }
      inst.placement.validate_against(cluster);
      if (inst.max_batch < 1) throw InvalidArgument("max_batch must be >= 1");
    }
    if (!(sim.monitor_interval_s > 0.0) || sim.restart_penalty_s < 0.0 || sim.max_drain_s < 0.0) {
      throw InvalidArgument("sim options must be positive");
    }
  }
};

// ---------------------------------------------------------------------------
// Step timing

struct StepWork {
  std::int64_t decode_batch = 0;   // requests emitting a token this step
  std::int64_t prefill_batch = 0;  // requests joining this step
  double prefill_tokens = 0.0;     // context they prefill, summed
  double offloaded_fraction = 0.0;
  double offload_multiplier = 1.0;
};

struct StepTiming {
  double compute_s = 0.0;
  double comm_s = 0.0;
  double overhead_s = 0.0;
  /// Compute seconds per device at nominal capacity (cluster index order).
  std::vector<double> busy_s;
  int boundary_pairs = 0;

  double total_s() const noexcept { return compute_s + comm_s + overhead_s; }
};

/// Scatter/gather pairs per forward pass: one per maximal replica run on
/// each device, one per device holding overridden sub-modules of a layer,
/// and one per hop between consecutive layers on different devices.
inline int boundary_pairs(const PlacementState& p, const ClusterSpec& cluster) {
  int pairs = 0;
  for (const auto& dev : cluster.devices) pairs += static_cast<int>(replica_runs(p, dev.id).size());
  for (LayerId i = 1; i <= p.n_layers(); ++i) {
    std::set<DeviceId> remote;
    for (const auto& [k, d] : p.layer(i).overrides) {
      if (d != p.original_device(i)) remote.insert(d);
    }
    pairs += static_cast<int>(remote.size());
    if (i < p.n_layers() && p.original_device(i) != p.original_device(i + 1)) ++pairs;
  }
  return pairs;
}

namespace detail {

struct PhaseCost {
  double compute = 0.0;  // seconds
  double comm = 0.0;     // communication units
};

inline PhaseCost phase_cost(const PlacementState& p, std::int64_t bs, double l, const ClusterSpec& cluster,
                            const ModelSpec& model, const ModuleCatalog& catalog, const SpeedupParams& params,
                            const CalibrationParams& calib, const std::vector<double>& capacity_scale,
                            std::vector<double>& busy) {
  PhaseCost out;
  if (bs <= 0 || l <= 0.0) return out;
  const double d = model.d_model;
  auto cap = [&](std::size_t g, bool effective) {
    const double c = cluster.devices[g].compute_gflops;
    return effective && g < capacity_scale.size() ? c * capacity_scale[g] : c;
  };

  for (LayerId i = 1; i <= p.n_layers(); ++i) {
    const auto& lp = p.layer(i);
    const auto shards = split_batch(bs, static_cast<int>(lp.replicas.size()));
    if (lp.overrides.empty()) {
      double worst = 0.0;
      for (std::size_t j = 0; j < lp.replicas.size(); ++j) {
        const std::size_t g = cluster.index_of(lp.replicas[j].device);
        const double shard = static_cast<double>(shards[j]);
        worst = std::max(worst, calib.kappa_c * compute_term(d, shard, l, cap(g, true)));
        busy[g] += calib.kappa_c * compute_term(d, shard, l, cap(g, false));
      }
      out.compute += worst;
      continue;
    }
    // Sub-modules run where they were moved, in sequence with the rest.
    for (const auto& [dev, frac] : layer_compute_split(lp, catalog)) {
      const std::size_t g = cluster.index_of(dev);
      out.compute += calib.kappa_c * frac * compute_term(d, static_cast<double>(bs), l, cap(g, true));
      busy[g] += calib.kappa_c * frac * compute_term(d, static_cast<double>(bs), l, cap(g, false));
    }
  }

  // Communication per boundary pair.
  for (const auto& dev : cluster.devices) {
    for (const auto& run : replica_runs(p, dev.id)) {
      std::int64_t shard = 0;
      for (LayerId i : run) {
        const auto& reps = p.layer(i).replicas;
        const auto shards = split_batch(bs, static_cast<int>(reps.size()));
        for (std::size_t j = 0; j < reps.size(); ++j) {
          if (reps[j].device == dev.id) shard = std::max(shard, shards[j]);
        }
      }
      out.comm += d * static_cast<double>(shard) * l / cluster.bandwidth_between(p.original_device(run.front()), dev.id);
    }
  }
  for (LayerId i = 1; i <= p.n_layers(); ++i) {
    const DeviceId origin = p.original_device(i);
    std::set<DeviceId> remote;
    for (const auto& [k, dev] : p.layer(i).overrides) {
      if (dev != origin) remote.insert(dev);
    }
    for (DeviceId dev : remote) out.comm += d * static_cast<double>(bs) * l / cluster.bandwidth_between(origin, dev);
    if (i < p.n_layers() && origin != p.original_device(i + 1)) {
      out.comm += d * static_cast<double>(bs) * l / cluster.bandwidth_between(origin, p.original_device(i + 1));
    }
  }
  out.comm *= params.delta;
  return out;
}

}  // namespace detail

/// Duration of one continuous-batching step for `p`. `capacity_scale[g]`
/// shrinks device g's compute when other instances share it.
inline StepTiming step_batch(const PlacementState& p, const StepWork& work, const ClusterSpec& cluster,
                             const ModelSpec& model, const ModuleCatalog& catalog, const SpeedupParams& params,
                             const CalibrationParams& calib, const std::vector<double>& capacity_scale = {}) {
  if (work.decode_batch <= 0 && work.prefill_batch <= 0) throw InvalidArgument("step_batch needs a non-empty batch");
  StepTiming t;
  t.busy_s.assign(cluster.size(), 0.0);
  const auto decode = detail::phase_cost(p, work.decode_batch, 1.0, cluster, model, catalog, params, calib,
                                         capacity_scale, t.busy_s);
  const double mean_prompt = work.prefill_batch > 0 ? work.prefill_tokens / static_cast<double>(work.prefill_batch) : 0.0;
  const auto prefill = detail::phase_cost(p, work.prefill_batch, mean_prompt, cluster, model, catalog, params, calib,
                                          capacity_scale, t.busy_s);
  const double slowdown = 1.0 + work.offloaded_fraction * (work.offload_multiplier - 1.0);
  t.compute_s = (decode.compute + prefill.compute) * slowdown;
  for (double& b : t.busy_s) b *= slowdown;
  t.comm_s = calib.kappa_b * (decode.comm + prefill.comm);
  t.overhead_s = calib.overhead_s;
  t.boundary_pairs = boundary_pairs(p, cluster);
  return t;
}

// ---------------------------------------------------------------------------
// Scheduling

struct InstanceLoad {
  int id = 0;
  std::int64_t queue_len = 0;  // waiting + running
  double speedup = 1.0;
  bool available = true;
};

/// Join-shortest-queue with queues normalised by instance speedup. Exact
/// ties go to the lowest id when the tied speedups are equal, otherwise to
/// a speedup-weighted draw from `rng`. Returns an index into `instances`.
inline std::size_t schedule(const std::vector<InstanceLoad>& instances, Rng& rng) {
  if (instances.empty()) throw InvalidArgument("no instances to schedule onto");
  const bool any_up = std::any_of(instances.begin(), instances.end(), [](const InstanceLoad& i) { return i.available; });
  std::vector<std::size_t> pool;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < instances.size(); ++k) {
    if (any_up && !instances[k].available) continue;
    const double score = static_cast<double>(instances[k].queue_len) / std::max(instances[k].speedup, 1e-12);
    if (score < best - 1e-12) {
      best = score;
      pool.assign(1, k);
    } else if (std::abs(score - best) <= 1e-12) {
      pool.push_back(k);
    }
  }
  std::sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) { return instances[a].id < instances[b].id; });
  if (pool.size() == 1) return pool.front();
  const bool same = std::all_of(pool.begin(), pool.end(),
                                [&](std::size_t k) { return instances[k].speedup == instances[pool.front()].speedup; });
  if (same) return pool.front();
  double total = 0.0;
  for (std::size_t k : pool) total += instances[k].speedup;
  double draw = rng.uniform() * total;
  for (std::size_t k : pool) {
    draw -= instances[k].speedup;
    if (draw < 0.0) return k;
  }
  return pool.back();
}

// ---------------------------------------------------------------------------
// OOM and monitoring

struct OomEvent {
  std::int64_t tick = 0;
  DeviceId device = 0;
  int instance = -1;
  double used_mb = 0.0;
  double capacity_mb = 0.0;
};

inline std::optional<OomEvent> detect_oom(DeviceId device, double used_mb, double capacity_mb, std::int64_t tick = 0,
                                          int instance = -1) {
  if (used_mb > capacity_mb) return OomEvent{tick, device, instance, used_mb, capacity_mb};
  return std::nullopt;
}

/// Nearest-rank percentile; 0 for an empty sample.
inline double percentile(std::vector<double> samples, double pct) {
  if (samples.empty()) return 0.0;
  std::sort(samples.begin(), samples.end());
  const double rank = std::ceil(pct / 100.0 * static_cast<double>(samples.size()));
  const auto idx = static_cast<std::size_t>(std::clamp(rank, 1.0, static_cast<double>(samples.size()))) - 1;
  return samples[idx];
}

/// Raw counts for one monitor row.
struct MonitorInput {
  std::int64_t tick = 0;
  double interval_s = 1.0;
  std::int64_t arrivals = 0;
  std::int64_t tokens = 0;
  std::vector<double> latencies;  // completions and failures in this interval, to resolution
  std::int64_t failed = 0;        // failures in this interval
  std::int64_t violations = 0;    // SLO misses (incl. failures) in this interval
  std::int64_t window_outcomes = 0;    // completions + failures in the trailing violation window
  std::int64_t window_violations = 0;
  std::int64_t oom_events = 0;
  std::int64_t in_flight = 0;
  std::int64_t queued = 0;
  std::int64_t arrived_total = 0;
  std::int64_t completed_total = 0;
  std::int64_t failed_total = 0;
  std::vector<double> memory_used_mb;  // per device, now
  std::vector<double> busy_s;          // per device, over the interval
};

struct SimMetrics {
  std::int64_t tick = 0;
  double time_s = 0.0;
  double rps_in = 0.0;
  double throughput_tok_s = 0.0;
  double throughput_req_s = 0.0;
  double p50_latency_s = 0.0;
  double p95_latency_s = 0.0;
  double p99_latency_s = 0.0;
  double violation_rate = 0.0;
  std::int64_t arrivals = 0;
  std::int64_t completed = 0;
  std::int64_t failed = 0;
  std::int64_t violations = 0;
  std::int64_t tokens = 0;
  double latency_sum_s = 0.0;
  std::int64_t oom_events = 0;
  std::int64_t in_flight = 0;
  std::int64_t queued = 0;
  std::int64_t arrived_total = 0;
  std::int64_t completed_total = 0;
  std::int64_t failed_total = 0;
  std::vector<double> mem_util;
  std::vector<double> compute_util;
};

inline SimMetrics monitor_tick(const MonitorInput& in, const ClusterSpec& cluster) {
  SimMetrics m;
  m.tick = in.tick;
  m.time_s = to_seconds(in.tick);
  const double dt = in.interval_s > 0.0 ? in.interval_s : 1.0;
  m.arrivals = in.arrivals;
  m.rps_in = static_cast<double>(in.arrivals) / dt;
  m.tokens = in.tokens;
  m.throughput_tok_s = static_cast<double>(in.tokens) / dt;
  m.completed = static_cast<std::int64_t>(in.latencies.size()) - in.failed;
  m.throughput_req_s = static_cast<double>(m.completed) / dt;
  m.p50_latency_s = percentile(in.latencies, 50);
  m.p95_latency_s = percentile(in.latencies, 95);
  m.p99_latency_s = percentile(in.latencies, 99);
  for (double l : in.latencies) m.latency_sum_s += l;
  m.violation_rate = in.window_outcomes > 0
                         ? static_cast<double>(in.window_violations) / static_cast<double>(in.window_outcomes)
                         : 0.0;
  m.failed = in.failed;
  m.violations = in.violations;
  m.oom_events = in.oom_events;
  m.in_flight = in.in_flight;
  m.queued = in.queued;
  m.arrived_total = in.arrived_total;
  m.completed_total = in.completed_total;
  m.failed_total = in.failed_total;
  for (std::size_t g = 0; g < cluster.size(); ++g) {
    const double mem = g < in.memory_used_mb.size() ? in.memory_used_mb[g] : 0.0;
    const double busy = g < in.busy_s.size() ? in.busy_s[g] : 0.0;
    m.mem_util.push_back(mem / cluster.devices[g].memory_mb);
    m.compute_util.push_back(std::clamp(busy / dt, 0.0, 1.0));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Simulation

struct DecisionRecord {
  std::int64_t tick = 0;
  int instance = 0;
  std::string trigger;
  std::optional<DeviceId> device;
  std::vector<std::string> ops;
  int final_phase = 0;
  double speedup_before = 1.0;
  double speedup_after = 1.0;
  std::int64_t batch_before = 0;
  std::int64_t batch_after = 0;
  double offload_before = 0.0;
  double offload_after = 0.0;
  double cost_s = 0.0;  // transition time of the ops this decision started
};

struct Summary {
  double duration_s = 0.0;   // arrival window
  double end_time_s = 0.0;   // last simulated tick
  std::int64_t arrived = 0;
  std::int64_t completed = 0;
  std::int64_t failed = 0;
  std::int64_t unfinished = 0;
  // Latency statistics cover completed and failed requests; a failure is
  // measured at the time it was dropped.
  double mean_latency_s = 0.0;
  double p50_latency_s = 0.0;
  double p95_latency_s = 0.0;
  double p99_latency_s = 0.0;
  double throughput_tok_s = 0.0;  // tokens generated inside the arrival window / its length
  double throughput_req_s = 0.0;  // completions inside the arrival window / its length
  double violation_rate = 0.0;
  std::int64_t oom_events = 0;
  std::int64_t ops_executed = 0;
  double total_scaling_cost_s = 0.0;
};

struct SimResult {
  std::vector<SimMetrics> trace;
  std::vector<OpLogRecord> op_log;
  std::vector<DecisionRecord> decisions;
  std::vector<Request> requests;
  std::vector<OomEvent> oom_events;
  Summary summary;
};

inline std::string describe(const ScalingOp& op) {
  return std::visit(
      [](const auto& o) -> std::string {
        using T = std::decay_t<decltype(o)>;
        std::string s = std::string(op_name(ScalingOp{o})) + " layer=" + std::to_string(o.layer);
        if constexpr (std::is_same_v<T, EvictReplica>) {
          s += " device=" + std::to_string(o.device);
        } else {
          if constexpr (std::is_same_v<T, MigrateSubModule>) s += " module=" + std::string(to_string(o.kind));
          s += " dst=" + std::to_string(o.dst);
          if constexpr (std::is_same_v<T, MigrateLayer>) s += o.with_kv ? " with_kv" : "";
        }
        return s;
      },
      op);
}

class Simulator {
 public:
  explicit Simulator(Scenario scenario) : sc_(std::move(scenario)), sched_rng_(sc_.seed ^ 0x9e3779b97f4a7c15ULL) {
    sc_.validate();
    sc_.workload.seed = sc_.seed;
    for (const auto& spec : sc_.instances) {
      Runtime rt;
      rt.spec = spec;
      rt.placement = spec.placement;
      rt.batch_limit = spec.max_batch;
      inst_.push_back(std::move(rt));
    }
  }

  SimResult run() {
    const auto arrivals = generate_arrivals(sc_.workload);
    for (const auto& a : arrivals) {
      Request r;
      r.id = a.id;
      r.arrival_t = a.t;
      r.prompt_len = a.prompt_len;
      r.gen_len = a.gen_len;
      requests_.push_back(r);
    }
    std::size_t next_arrival = 0;
    const std::int64_t duration = to_ticks(sc_.workload.duration_s);
    const std::int64_t last_arrival = arrivals.empty() ? 0 : arrival_tick(arrivals.back().t);
    const std::int64_t arrival_end = std::max(duration, last_arrival);
    const std::int64_t hard_stop = arrival_end + to_ticks(sc_.sim.max_drain_s);
    const std::int64_t monitor_every = std::max<std::int64_t>(1, to_ticks(sc_.sim.monitor_interval_s));
    const std::int64_t eval_every = std::max<std::int64_t>(1, to_ticks(sc_.controller.eval_period_s));
    std::int64_t last_row = 0;

    std::int64_t t = 0;
    while (true) {
      now_ = t;
      // Scaling ops that finished switch atomically.
      for (auto& rt : inst_) {
        if (rt.pending && rt.pending_done <= t) {
          rt.placement = std::move(*rt.pending);
          rt.pending.reset();
        }
      }
      for (std::size_t k = 0; k < inst_.size(); ++k) {
        if (inst_[k].step_end == t) finish_step(k, t);
      }
      while (next_arrival < arrivals.size() && arrival_tick(arrivals[next_arrival].t) <= t) {
        ++arrived_;
        ++row_.arrivals;
        dispatch(arrivals[next_arrival].id);
        ++next_arrival;
      }
      if (sc_.controller.enabled && t > 0 && t % eval_every == 0) control(t);
      for (std::size_t k = 0; k < inst_.size(); ++k) {
        if (inst_[k].step_end < 0 && inst_[k].down_until <= t) start_step(k, t);
      }
      if (t > 0 && (t % monitor_every == 0 || t == duration) && t > last_row) {
        emit_row(t, t - last_row);
        last_row = t;
      }

      const bool arrivals_done = next_arrival >= arrivals.size();
      if ((arrivals_done && t >= arrival_end && in_flight() == 0) || t >= hard_stop) {
        if (t > last_row) emit_row(t, t - last_row);
        break;
      }

      // Next tick on which anything can happen.
      std::int64_t next = (t / monitor_every + 1) * monitor_every;
      if (sc_.controller.enabled) next = std::min(next, (t / eval_every + 1) * eval_every);
      if (!arrivals_done) next = std::min(next, std::max(t + 1, arrival_tick(arrivals[next_arrival].t)));
      if (t < arrival_end) next = std::min(next, arrival_end);
      if (t < duration) next = std::min(next, duration);
      for (const auto& rt : inst_) {
        if (rt.step_end > t) next = std::min(next, rt.step_end);
        if (rt.pending) next = std::min(next, std::max(t + 1, rt.pending_done));
        if (rt.down_until > t) next = std::min(next, rt.down_until);
      }
      t = std::min(next, hard_stop);
    }
    return finish(t, duration);
  }

 private:
  struct StepRecord {
    std::int64_t start = 0;
    std::int64_t end = 0;
    std::vector<double> busy_s;
  };

  struct Runtime {
    InstanceSpec spec;
    PlacementState placement;
    std::optional<PlacementState> pending;
    std::int64_t pending_done = -1;
    std::deque<std::int64_t> queue;
    std::vector<std::int64_t> running;
    std::int64_t batch_limit = 1;
    double offloaded = 0.0;
    std::int64_t step_end = -1;
    double last_step_s = 0.0;
    double allocated_tokens = 0.0;  // KV reserved through the end of the current step
    std::int64_t down_until = -1;
    std::int64_t slo_suppressed_until = -1;
    std::deque<StepRecord> steps;
    std::deque<std::pair<std::int64_t, bool>> outcomes;  // (tick, violated)
    std::deque<std::pair<std::int64_t, PendingRequest>> arrivals;  // first dispatches
  };

  static std::int64_t arrival_tick(double t) { return static_cast<std::int64_t>(std::ceil(t * kTicksPerSecond - 1e-9)); }

  std::int64_t in_flight() const {
    std::int64_t n = 0;
    for (const auto& rt : inst_) n += static_cast<std::int64_t>(rt.queue.size() + rt.running.size());
    return n;
  }

  double instance_speedup(const Runtime& rt) const {
    return strategy_speedup(rt.placement, sc_.cluster, sc_.model, sc_.speedup);
  }

  void dispatch(std::int64_t req_id) {
    std::vector<InstanceLoad> loads;
    for (const auto& rt : inst_) {
      loads.push_back({rt.spec.id, static_cast<std::int64_t>(rt.queue.size() + rt.running.size()), instance_speedup(rt),
                       rt.down_until < 0 || rt.down_until <= now_});
    }
    const std::size_t k = schedule(loads, sched_rng_);
    auto& r = requests_[static_cast<std::size_t>(req_id)];
    r.instance = inst_[k].spec.id;
    inst_[k].queue.push_back(req_id);
    if (r.requeues == 0) {
      inst_[k].arrivals.emplace_back(now_, PendingRequest{static_cast<double>(r.prompt_len), static_cast<double>(r.gen_len)});
    }
  }

  KvLoad kv_of(const Runtime& rt, double tokens) const {
    return {tokens, static_cast<std::int64_t>(rt.running.size()), rt.offloaded};
  }

  /// Memory per device with every instance's KV reservation; in-flight
  /// scaling ops hold both the old and the new copy.
  std::vector<double> device_memory() const {
    std::vector<double> mem(sc_.cluster.size(), 0.0);
    for (const auto& rt : inst_) {
      const KvLoad kv = kv_of(rt, rt.allocated_tokens);
      auto f = memory_footprint(rt.placement, sc_.catalog, sc_.cluster, kv);
      if (rt.pending) {
        const auto g = memory_footprint(*rt.pending, sc_.catalog, sc_.cluster, kv);
        for (std::size_t d = 0; d < f.size(); ++d) f[d] = std::max(f[d], g[d]);
      }
      for (std::size_t d = 0; d < mem.size(); ++d) mem[d] += f[d];
    }
    return mem;
  }

  void record_outcome(Runtime& rt, std::int64_t t, bool violated) {
    rt.outcomes.emplace_back(t, violated);
    outcomes_.emplace_back(t, violated);
    if (violated) ++row_.violations;
  }

  void finish_step(std::size_t k, std::int64_t t) {
    auto& rt = inst_[k];
    rt.step_end = -1;
    std::vector<std::int64_t> still;
    for (std::int64_t id : rt.running) {
      auto& r = requests_[static_cast<std::size_t>(id)];
      ++r.generated;
      ++row_.tokens;
      if (t <= duration_ticks()) ++tokens_in_window_;
      if (r.generated >= r.gen_len) {
        r.completion_t = to_seconds(t);
        ++completed_;
        if (t <= duration_ticks()) ++completed_in_window_;
        row_.latencies.push_back(r.latency());
        record_outcome(rt, t, r.latency() > sc_.controller.slo_latency_s);
      } else {
        still.push_back(id);
      }
    }
    rt.running = std::move(still);
    rt.allocated_tokens = 0.0;
    for (std::int64_t id : rt.running) rt.allocated_tokens += requests_[static_cast<std::size_t>(id)].context_len();
  }

  std::int64_t duration_ticks() const { return to_ticks(sc_.workload.duration_s); }

  void start_step(std::size_t k, std::int64_t t) {
    auto& rt = inst_[k];
    // A lowered batch limit preempts the most recent admissions.
    while (static_cast<std::int64_t>(rt.running.size()) > rt.batch_limit) {
      rt.queue.push_front(rt.running.back());
      rt.running.pop_back();
    }
    StepWork work;
    while (!rt.queue.empty() && static_cast<std::int64_t>(rt.running.size()) < rt.batch_limit) {
      const std::int64_t id = rt.queue.front();
      rt.queue.pop_front();
      rt.running.push_back(id);
      ++work.prefill_batch;
      work.prefill_tokens += requests_[static_cast<std::size_t>(id)].context_len();
    }
    if (rt.running.empty()) {
      rt.allocated_tokens = 0.0;
      return;
    }
    work.decode_batch = static_cast<std::int64_t>(rt.running.size()) - work.prefill_batch;
    work.offloaded_fraction = rt.offloaded;
    work.offload_multiplier = sc_.controller.offload_latency_multiplier;

    rt.allocated_tokens = 0.0;
    for (std::int64_t id : rt.running) rt.allocated_tokens += requests_[static_cast<std::size_t>(id)].context_len() + 1;

    const auto mem = device_memory();
    const auto used = rt.placement.devices();
    for (std::size_t g = 0; g < sc_.cluster.size(); ++g) {
      const auto& dev = sc_.cluster.devices[g];
      if (!used.count(dev.id)) continue;
      if (auto oom = detect_oom(dev.id, mem[g], dev.memory_mb, t, rt.spec.id)) {
        crash(k, t, *oom);
        return;
      }
    }

    // Instances mid-step claim each device in proportion to their compute
    // share there.
    std::vector<double> load(sc_.cluster.size(), 1.0);
    for (std::size_t o = 0; o < inst_.size(); ++o) {
      if (o == k || inst_[o].step_end <= t) continue;
      const auto share = compute_share(inst_[o].placement, sc_.catalog, sc_.cluster,
                                       static_cast<std::int64_t>(inst_[o].running.size()));
      for (std::size_t g = 0; g < load.size(); ++g) load[g] += share[g];
    }
    std::vector<double> scale(sc_.cluster.size(), 1.0);
    for (std::size_t g = 0; g < scale.size(); ++g) scale[g] = 1.0 / load[g];
    const auto timing = step_batch(rt.placement, work, sc_.cluster, sc_.model, sc_.catalog, sc_.speedup,
                                   sc_.calibration, scale);
    rt.last_step_s = timing.total_s();
    rt.step_end = t + std::max<std::int64_t>(1, to_ticks(timing.total_s()));
    rt.steps.push_back({t, rt.step_end, timing.busy_s});
  }

  void crash(std::size_t k, std::int64_t t, const OomEvent& ev) {
    auto& rt = inst_[k];
    ooms_.push_back(ev);
    ++row_.oom_events;
    rt.down_until = t + std::max<std::int64_t>(1, to_ticks(sc_.sim.restart_penalty_s));
    auto dropped = std::move(rt.running);
    rt.running.clear();
    rt.allocated_tokens = 0.0;
    for (std::int64_t id : dropped) {
      auto& r = requests_[static_cast<std::size_t>(id)];
      r.generated = 0;
      if (r.requeues >= 1) {
        r.failed = true;
        r.completion_t = to_seconds(t);
        ++failed_;
        ++row_.failed;
        row_.latencies.push_back(r.latency());
        record_outcome(rt, t, true);
      } else {
        ++r.requeues;
        dispatch(id);
      }
    }
  }

  std::vector<double> busy_between(const Runtime& rt, std::int64_t from, std::int64_t to) const {
    std::vector<double> busy(sc_.cluster.size(), 0.0);
    for (const auto& s : rt.steps) {
      const std::int64_t lo = std::max(from, s.start);
      const std::int64_t hi = std::min(to, s.end);
      if (hi <= lo || s.end <= s.start) continue;
      const double frac = static_cast<double>(hi - lo) / static_cast<double>(s.end - s.start);
      for (std::size_t g = 0; g < busy.size(); ++g) busy[g] += s.busy_s[g] * frac;
    }
    return busy;
  }

  void prune(std::int64_t t) {
    const std::int64_t keep = std::max(to_ticks(sc_.controller.violation_window_s),
                                       std::max(to_ticks(sc_.sim.monitor_interval_s), to_ticks(2.0 * sc_.controller.eval_period_s)));
    for (auto& rt : inst_) {
      while (!rt.steps.empty() && rt.steps.front().end < t - keep) rt.steps.pop_front();
      while (!rt.outcomes.empty() && rt.outcomes.front().first < t - keep) rt.outcomes.pop_front();
      while (!rt.arrivals.empty() && rt.arrivals.front().first < t - keep) rt.arrivals.pop_front();
    }
    while (!outcomes_.empty() && outcomes_.front().first < t - keep) outcomes_.pop_front();
  }

  static std::pair<std::int64_t, std::int64_t> window_counts(const std::deque<std::pair<std::int64_t, bool>>& outcomes,
                                                             std::int64_t from) {
    std::int64_t n = 0;
    std::int64_t bad = 0;
    for (const auto& [tick, violated] : outcomes) {
      if (tick <= from) continue;
      ++n;
      bad += violated ? 1 : 0;
    }
    return {n, bad};
  }

  void emit_row(std::int64_t t, std::int64_t span) {
    prune(t);
    MonitorInput in;
    in.tick = t;
    in.interval_s = to_seconds(span);
    in.arrivals = row_.arrivals;
    in.tokens = row_.tokens;
    in.latencies = std::move(row_.latencies);
    in.failed = row_.failed;
    in.violations = row_.violations;
    const auto [n, bad] = window_counts(outcomes_, t - to_ticks(sc_.controller.violation_window_s));
    in.window_outcomes = n;
    in.window_violations = bad;
    in.oom_events = row_.oom_events;
    in.in_flight = in_flight();
    for (const auto& rt : inst_) in.queued += static_cast<std::int64_t>(rt.queue.size());
    in.arrived_total = arrived_;
    in.completed_total = completed_;
    in.failed_total = failed_;
    in.memory_used_mb = device_memory();
    in.busy_s.assign(sc_.cluster.size(), 0.0);
    for (const auto& rt : inst_) {
      const auto b = busy_between(rt, t - span, t);
      for (std::size_t g = 0; g < b.size(); ++g) in.busy_s[g] += b[g];
    }
    trace_.push_back(monitor_tick(in, sc_.cluster));
    row_ = {};
  }

  ClusterState snapshot(std::int64_t t) const {
    ClusterState st;
    st.cluster = sc_.cluster;
    st.model = sc_.model;
    st.catalog = sc_.catalog;
    st.speedup = sc_.speedup;
    st.costs = sc_.costs;
    st.background_mb.assign(sc_.cluster.size(), 0.0);
    const std::int64_t util_window = std::max<std::int64_t>(1, to_ticks(2.0 * sc_.controller.eval_period_s));
    for (const auto& rt : inst_) {
      InstanceView v;
      v.id = rt.spec.id;
      v.placement = rt.placement;
      v.kv = kv_of(rt, rt.allocated_tokens);
      v.max_batch = rt.spec.max_batch;
      v.batch_limit = rt.batch_limit;

      const double step_s = rt.last_step_s > 0.0 ? rt.last_step_s : sc_.calibration.overhead_s;
      v.horizon_steps = static_cast<std::int64_t>(std::ceil(sc_.controller.projection_horizon_s / step_s));
      auto pending = [&](std::int64_t id) {
        const auto& r = requests_[static_cast<std::size_t>(id)];
        return PendingRequest{static_cast<double>(r.context_len()), static_cast<double>(r.gen_len - r.generated)};
      };
      for (std::int64_t id : rt.running) v.pending.push_back(pending(id));
      for (std::int64_t id : rt.queue) v.pending.push_back(pending(id));
      const std::int64_t since = std::max<std::int64_t>(0, t - to_ticks(sc_.controller.violation_window_s));
      std::int64_t seen = 0;
      for (const auto& [tick, shape] : rt.arrivals) {
        if (tick < since) continue;
        ++seen;
        v.typical_arrival.context += shape.context;
        v.typical_arrival.remaining += shape.remaining;
      }
      if (seen > 0 && t > since) {
        v.typical_arrival.context /= static_cast<double>(seen);
        v.typical_arrival.remaining /= static_cast<double>(seen);
        v.arrivals_per_step = static_cast<double>(seen) / to_seconds(t - since) * step_s;
      }

      const auto [n, bad] = window_counts(rt.outcomes, t - to_ticks(sc_.controller.violation_window_s));
      v.violation_rate = n > 0 ? static_cast<double>(bad) / static_cast<double>(n) : 0.0;
      v.slo_suppressed = t < rt.slo_suppressed_until;
      const auto busy = busy_between(rt, t - util_window, t);
      for (double b : busy) v.device_util.push_back(std::clamp(b / to_seconds(util_window), 0.0, 1.0));
      v.mark_observed();
      st.instances.push_back(std::move(v));
    }
    return st;
  }

  void control(std::int64_t t) {
    prune(t);
    for (const auto& rt : inst_) {
      if (rt.pending) return;  // the controller never overlaps its own ops
    }
    ClusterState state = snapshot(t);
    for (std::size_t k = 0; k < inst_.size(); ++k) {
      auto dec = controller_step(state, k, sc_.controller);

      DecisionRecord rec;
      rec.tick = t;
      rec.instance = dec.instance;
      rec.trigger = std::string(to_string(dec.trigger));
      rec.device = dec.device;
      rec.final_phase = dec.final_phase;
      rec.speedup_before = dec.speedup_before;
      rec.speedup_after = dec.speedup_after;
      rec.batch_before = dec.batch_before;
      rec.batch_after = dec.batch_after;
      rec.offload_before = dec.offload_before;
      rec.offload_after = dec.offload_after;

      // Group ops by the instance whose placement they touch.
      std::map<int, std::vector<ScalingOp>> by_instance;
      for (const auto& po : dec.ops) {
        by_instance[po.instance].push_back(po.op);
        rec.ops.push_back("phase" + std::to_string(po.phase) + " instance=" + std::to_string(po.instance) + " " +
                          describe(po.op));
      }
      for (auto& [id, ops] : by_instance) {
        auto& rt = inst_[instance_index(id)];
        ApplyOptions opts;
        opts.costs = sc_.costs;
        opts.tick = t;
        const auto mem = device_memory();
        const auto own = device_usage(rt.placement, sc_.catalog, sc_.cluster);
        for (std::size_t g = 0; g < sc_.cluster.size(); ++g) {
          opts.extra_mb.push_back(mem[g] - own.at(sc_.cluster.devices[g].id).memory_used_mb);
        }
        const KvLoad kv = kv_of(rt, rt.allocated_tokens);
        for (LayerId i = 1; i <= rt.placement.n_layers(); ++i) {
          opts.layer_kv_mb[i] = layer_kv_mb(rt.placement, i, sc_.catalog, kv);
        }
        try {
          auto applied = batch_apply(rt.placement, ops, sc_.catalog, sc_.cluster, opts);
          rt.pending = std::move(applied.placement);
          rt.pending_done = t + std::max<std::int64_t>(1, to_ticks(applied.cost.total_s()));
          scaling_cost_s_ += applied.cost.total_s();
          rec.cost_s += applied.cost.total_s();
          ops_executed_ += static_cast<std::int64_t>(ops.size());
          for (auto& r : applied.log) op_log_.push_back(std::move(r));
        } catch (const Error& e) {
          rec.ops.push_back(std::string("rejected: ") + e.what());
        }
      }

      const auto& after = dec.state.instances.at(k);
      auto& rt = inst_[k];
      rt.batch_limit = after.batch_limit;
      rt.offloaded = after.kv.offloaded_fraction;
      if (dec.trigger == Trigger::ScaleDown && (!dec.ops.empty() || !dec.reductions.empty())) {
        rt.slo_suppressed_until = t + to_ticks(sc_.controller.cooldown_s);
      }
      decisions_.push_back(std::move(rec));
      state = std::move(dec.state);
    }
  }

  std::size_t instance_index(int id) const {
    for (std::size_t k = 0; k < inst_.size(); ++k) {
      if (inst_[k].spec.id == id) return k;
    }
    throw InvalidArgument("unknown instance " + std::to_string(id));
  }

  SimResult finish(std::int64_t t, std::int64_t duration) {
    SimResult res;
    res.trace = std::move(trace_);
    res.op_log = std::move(op_log_);
    res.decisions = std::move(decisions_);
    res.oom_events = std::move(ooms_);
    res.requests = std::move(requests_);

    Summary& s = res.summary;
    s.duration_s = to_seconds(duration);
    s.end_time_s = to_seconds(t);
    s.arrived = arrived_;
    s.completed = completed_;
    s.failed = failed_;
    s.unfinished = arrived_ - completed_ - failed_;
    std::vector<double> lat;
    std::int64_t violated = 0;
    for (const auto& r : res.requests) {
      if (!r.done()) continue;
      lat.push_back(r.latency());
      violated += r.failed || r.latency() > sc_.controller.slo_latency_s ? 1 : 0;
    }
    double sum = 0.0;
    for (double l : lat) sum += l;
    s.mean_latency_s = lat.empty() ? 0.0 : sum / static_cast<double>(lat.size());
    s.p50_latency_s = percentile(lat, 50);
    s.p95_latency_s = percentile(lat, 95);
    s.p99_latency_s = percentile(lat, 99);
    s.throughput_tok_s = duration > 0 ? static_cast<double>(tokens_in_window_) / to_seconds(duration) : 0.0;
    s.throughput_req_s = duration > 0 ? static_cast<double>(completed_in_window_) / to_seconds(duration) : 0.0;
    const std::int64_t outcomes = s.completed + s.failed;
    s.violation_rate = outcomes > 0 ? static_cast<double>(violated) / static_cast<double>(outcomes) : 0.0;
    s.oom_events = static_cast<std::int64_t>(res.oom_events.size());
    s.ops_executed = ops_executed_;
    s.total_scaling_cost_s = scaling_cost_s_;
    return res;
  }

  struct RowAccumulator {
    std::int64_t arrivals = 0;
    std::int64_t tokens = 0;
    std::vector<double> latencies;
    std::int64_t failed = 0;
    std::int64_t violations = 0;
    std::int64_t oom_events = 0;
  };

  Scenario sc_;
  Rng sched_rng_;
  std::vector<Runtime> inst_;
  std::vector<Request> requests_;
  std::deque<std::pair<std::int64_t, bool>> outcomes_;
  std::vector<SimMetrics> trace_;
  std::vector<OpLogRecord> op_log_;
  std::vector<DecisionRecord> decisions_;
  std::vector<OomEvent> ooms_;
  RowAccumulator row_;
  std::int64_t now_ = 0;
  std::int64_t arrived_ = 0;
  std::int64_t completed_ = 0;
  std::int64_t failed_ = 0;
  std::int64_t tokens_in_window_ = 0;
  std::int64_t completed_in_window_ = 0;
  std::int64_t ops_executed_ = 0;
  double scaling_cost_s_ = 0.0;
};

inline SimResult run(const Scenario& scenario) { return Simulator(scenario).run(); }

}  // namespace modscale
