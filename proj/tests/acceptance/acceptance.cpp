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


// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "modscale/cli.hpp"

namespace {

using namespace modscale;

// Pinned tolerances and budgets.
constexpr double kExactTol = 1e-12;         // AC1
constexpr double kEquivTol = 1e-9;          // AC2
constexpr double kTableTol = 0.10;          // AC3, relative
constexpr double kRatioTarget = 2.99;       // AC10
constexpr double kSlopeTarget = 608.0;      // AC10, MB per layer
constexpr double kCostTol = 0.01;           // AC10, relative
constexpr double kLatencyGap = 2.0;         // AC7, baseline p95 / 30-layer p95
constexpr double kMigrationGain = 0.5;      // AC8, required p95 reduction
constexpr double kFeasibilityEps = 1e-9;    // memory comparisons, MB

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  double budget_s;
  std::function<Outcome()> body;
};

double rel_err(double got, double want) { return std::abs(got - want) / std::abs(want); }

ClusterSpec gpus(std::size_t n, double mem) { return ClusterSpec::uniform(n, 312000, mem, 32000, 1.6e6); }

InstanceView view(int id, PlacementState p, std::size_t devices) {
  InstanceView v;
  v.id = id;
  v.placement = std::move(p);
  v.device_util.assign(devices, 0.0);
  v.mark_observed();
  return v;
}

ClusterState state_of(ClusterSpec c, std::vector<InstanceView> instances, double gamma) {
  ClusterState st;
  st.cluster = std::move(c);
  st.speedup.gamma = gamma;
  st.background_mb.assign(st.cluster.size(), 0.0);
  st.instances = std::move(instances);
  return st;
}

bool memory_feasible(const ClusterState& st, const ControllerConfig& cfg) {
  const auto mem = st.memory_used(cfg.replica_size_mb);
  for (std::size_t g = 0; g < mem.size(); ++g) {
    if (mem[g] > st.cluster.devices[g].memory_mb + kFeasibilityEps) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

Outcome ac1() {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> g01(0.0, 1.0);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double gamma = g01(rng);
    const auto n = 1 + static_cast<std::size_t>(rng() % 64);
    worst = std::max(worst, std::abs(speedup_homo(std::vector<int>(n, 1), gamma) - 1.0));
  }
  for (int p = 1; p <= 16; ++p) {
    const auto n = 1 + static_cast<std::size_t>(rng() % 64);
    worst = std::max(worst, std::abs(speedup_homo(std::vector<int>(n, p), 0.0) - p));
  }
  return {worst < kExactTol, fmt::format("max error {:.3g}", worst)};
}

Outcome ac2() {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.5, 4.0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 64);
    const double C = 1e5 * u(rng);
    const double B = 1e4 * u(rng);
    const double delta = u(rng);
    ModelSpec m;
    m.n_layers = n;
    m.d_model = 64 * (1 + static_cast<int>(rng() % 128));
    m.n_heads = 1;
    const double l = 1.0 + static_cast<double>(rng() % 512);
    // 840 is divisible by every p_i <= 8, so each split is exactly even.
    const std::int64_t bs = 840 * (1 + static_cast<std::int64_t>(rng() % 4));
    std::vector<int> pv;
    auto p = PlacementState::on_device(n, 0);
    for (LayerId i = 1; i <= n; ++i) {
      const int pi = 1 + static_cast<int>(rng() % 8);
      pv.push_back(pi);
      for (int r = 1; r < pi; ++r) p.layer(i).replicas.push_back({r, false});
    }
    const auto cluster = ClusterSpec::uniform(8, C, 1e12, B, B);
    SpeedupParams sp;
    sp.delta = delta;
    const double gamma = delta * C / (m.d_model * B);
    const double s = speedup(p, even_assignment(p, bs, l), cluster, m, sp);
    worst = std::max(worst, std::abs(s - speedup_homo(pv, gamma)));
  }
  return {worst < kEquivTol, fmt::format("1000 configs, max |S - S_homo| {:.3g}", worst)};
}

Outcome ac3() {
  const double d = 5120, dff = 13824, l = 256, bs = 1, bytes = 2;
  const double attn_gflops = 2 * l * bs * d * d / 1e9;
  const double attn_mb = d * d * bytes / 1e6;
  const double ffn_gflops = 2 * l * bs * d * dff / 1e9;
  const double ffn_mb = d * dff * bytes / 1e6;
  const ModuleCatalog table;
  const double e[] = {rel_err(table.attn_projection.gflops, attn_gflops), rel_err(table.attn_projection.memory_mb, attn_mb),
                      rel_err(table.ffn_projection.gflops, ffn_gflops), rel_err(table.ffn_projection.memory_mb, ffn_mb)};
  double worst = 0.0;
  for (double x : e) worst = std::max(worst, x);
  // The library's own geometry estimate must agree with the arithmetic above.
  ModelSpec m;
  const auto est = estimate_from_geometry(m, 1, 256);
  const bool est_ok = rel_err(est.attn_projection.gflops, attn_gflops) < 1e-3 &&
                      rel_err(est.ffn_projection.gflops, ffn_gflops) < 1e-3 &&
                      rel_err(est.attn_projection.memory_mb, d * d * bytes / kBytesPerMB) < 1e-9 &&
                      rel_err(est.ffn_projection.memory_mb, d * dff * bytes / kBytesPerMB) < 1e-9;
  return {worst < kTableTol && est_ok,
          fmt::format("attn {:.2f} GFLOPs {:.1f} MB, ffn {:.2f} GFLOPs {:.1f} MB; worst table deviation {:.1f}%",
                      attn_gflops, attn_mb, ffn_gflops, ffn_mb, 100 * worst)};
}

Outcome ac4() {
  std::mt19937_64 rng(4);
  const ControllerConfig cfg;
  int ops = 0, bad_steps = 0, infeasible = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto k = 2 + static_cast<std::size_t>(rng() % 4);
    auto c = gpus(k, 0);
    ModelSpec m;
    m.n_layers = 1 + static_cast<int>(rng() % 40);
    for (auto& dev : c.devices) {
      dev.memory_mb = 605.0 * m.n_layers + cfg.replica_size_mb * static_cast<double>(rng() % 30);
      dev.compute_gflops = 1e5 * (1 + static_cast<double>(rng() % 4));
    }
    std::vector<InstanceView> insts;
    const auto n_inst = 1 + rng() % 2;
    for (std::size_t j = 0; j < n_inst; ++j) {
      const auto home = static_cast<DeviceId>(rng() % k);
      auto v = view(static_cast<int>(j), PlacementState::on_device(m.n_layers, home), k);
      for (auto& u : v.device_util) u = static_cast<double>(rng() % 100) / 100.0;
      v.mark_observed();
      insts.push_back(std::move(v));
    }
    auto st = state_of(c, insts, 0.01 + 0.4 * static_cast<double>(rng() % 100) / 100.0);
    st.model = m;
    if (!memory_feasible(st, cfg)) continue;
    const auto inst = rng() % n_inst;
    const auto up = scale_up(st, inst, cfg);
    double prev = up.speedup_before;
    for (double sp : up.speedup_trace) {
      bad_steps += sp > prev ? 0 : 1;
      prev = sp;
    }
    ops += static_cast<int>(up.ops.size());
    infeasible += memory_feasible(up.state, cfg) ? 0 : 1;
  }
  return {bad_steps == 0 && infeasible == 0 && ops > 0,
          fmt::format("200 clusters, {} replications, {} non-increasing, {} infeasible", ops, bad_steps, infeasible)};
}

Outcome ac5() {
  std::mt19937_64 rng(5);
  const ControllerConfig cfg;
  int cases = 0, out_of_range = 0, infeasible = 0;
  double max_gap = 0.0, sum_gap = 0.0;
  std::size_t evaluated = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 4);
    const auto k = 2 + static_cast<std::size_t>(rng() % 2);
    auto c = gpus(k, 1e5);
    for (std::size_t g = 1; g < k; ++g) {
      // At most three replicas fit on each spare device.
      c.devices[g].memory_mb = cfg.replica_size_mb * (0.5 + static_cast<double>(rng() % 4));
      c.devices[g].compute_gflops = 1e5 * (1 + static_cast<double>(rng() % 4));
    }
    ModelSpec m;
    m.n_layers = n;
    auto st = state_of(c, {view(0, PlacementState::on_device(n, 0), k)},
                       0.02 + 0.5 * static_cast<double>(rng() % 100) / 100.0);
    st.model = m;
    const auto up = scale_up(st, 0, cfg);
    const auto best = oracle_best_strategy(st.instances[0].placement, c, m, st.speedup, cfg.replica_size_mb,
                                           std::numeric_limits<int>::max(), replica_budget_mb(st, cfg));
    ++cases;
    evaluated += best.evaluated;
    const double gap = best.speedup - up.speedup_after;
    out_of_range += up.speedup_after >= 1.0 - kExactTol && gap >= -kExactTol ? 0 : 1;
    infeasible += memory_feasible(up.state, cfg) ? 0 : 1;
    max_gap = std::max(max_gap, gap);
    sum_gap += gap;
  }
  return {out_of_range == 0 && infeasible == 0,
          fmt::format("{} instances ({} oracle evaluations), {} outside [1, oracle], {} infeasible, gap mean {:.4f} "
                      "max {:.4f}",
                      cases, evaluated, out_of_range, infeasible, sum_gap / cases, max_gap)};
}

bool phases_ordered(const std::vector<PhasedOp>& ops) {
  for (std::size_t i = 1; i < ops.size(); ++i) {
    if (ops[i].phase < ops[i - 1].phase) return false;
  }
  return true;
}

Outcome ac6() {
  const ControllerConfig cfg;
  // Phase 1: the instance's own KV cache overflows its device.
  auto s1 = state_of(gpus(2, 40000), {view(0, PlacementState::on_device(40, 0), 2)}, 0.1);
  s1.instances[0].kv = {19500, 1, 0.0};
  // Phase 2: another instance's replicas crowd the device.
  auto guest = PlacementState::on_device(40, 1);
  guest.layer(1).replicas.push_back({0, false});
  guest.layer(2).replicas.push_back({0, false});
  auto s2 = state_of(gpus(2, 40000), {view(0, PlacementState::on_device(40, 0), 2), view(1, guest, 2)}, 0.1);
  s2.background_mb = {40900 - 24200 - 1210, 40000 - 24200};
  // Phase 3: a single saturated device with nowhere to move anything.
  auto s3 = state_of(gpus(1, 40000), {view(0, PlacementState::on_device(40, 0), 1)}, 0.1);
  auto& v = s3.instances[0];
  v.violation_rate = 0.5;
  v.device_util = {1.0};
  v.kv = {1000, 32, 0.0};
  v.max_batch = v.batch_limit = 32;
  v.mark_observed();

  const auto r1 = scale_down(s1, 0, 0, cfg);
  const auto r2 = scale_down(s2, 0, 0, cfg);
  const auto r3 = scale_down(s3, 0, 0, cfg);
  // Phase 3 must stop at batch 1 even when it cannot resolve the overload.
  auto s4 = state_of(gpus(1, 40000), {view(0, PlacementState::on_device(40, 0), 1)}, 0.1);
  s4.background_mb = {20000};
  const auto r4 = scale_down(s4, 0, 0, cfg);

  bool ok = r1.resolved && r1.final_phase == 1 && r2.resolved && r2.final_phase == 2 && r3.resolved &&
            r3.final_phase == 3 && r4.final_phase == 3;
  for (const auto* r : {&r1, &r2, &r3, &r4}) {
    ok = ok && phases_ordered(r->ops);
    for (const auto& red : r->reductions) ok = ok && red.batch_limit >= 1;
    for (const auto& inst : r->state.instances) ok = ok && inst.batch_limit >= 1;
  }
  return {ok, fmt::format("phases {}/{}/{} (ops {}/{}/{}), batch {} -> {}; stuck case ends at batch {}", r1.final_phase,
                          r2.final_phase, r3.final_phase, r1.ops.size(), r2.ops.size(), r3.ops.size(),
                          s3.instances[0].batch_limit, r3.state.instances[0].batch_limit,
                          r4.state.instances[0].batch_limit)};
}

Outcome ac7() {
  nlohmann::json base = {
      {"seed", 42},
      {"cluster",
       {{"uniform",
         {{"count", 2},
          {"compute_gflops", 312000},
          {"memory_mb", 80000},
          {"inter_bandwidth_mb_s", 32000},
          {"intra_bandwidth_mb_s", 1.6e6}}}}},
      {"instances", {{{"id", 0}, {"max_batch", 128}, {"placement", {{"original", 0}}}}}},
      {"workload", {{"duration_s", 60}}},
      {"controller", {{"enabled", false}}}};
  const std::vector<int> layers = {0, 15, 20, 25, 30};
  const auto spec = cli::parse_sweep({{"base", base},
                                      {"axes", {{"rps", {10, 30, 50}}, {"replicated_layers", layers}, {"dop", {2}}}},
                                      {"repetitions", 3}});
  const auto runs = cli::execute_sweep(spec, {}, 1);
  // Cells: replicated_layers (slowest), rps; mean over repetitions.
  auto mean_of = [&](int l, double rps, double Summary::*field) {
    double sum = 0.0;
    int n = 0;
    for (const auto& r : runs) {
      const auto v = spec.cell(r.cell);
      if (!r.summary || v[1].get<int>() != l || v[2].get<double>() != rps) continue;
      sum += (*r.summary).*field;
      ++n;
    }
    return n ? sum / n : std::nan("");
  };
  std::vector<double> thr;
  bool increasing = true;
  std::string row;
  for (int l : layers) {
    thr.push_back(mean_of(l, 50, &Summary::throughput_req_s));
    if (thr.size() > 1) increasing = increasing && thr.back() > thr[thr.size() - 2];
    row += fmt::format("{}{}:{:.2f}", row.empty() ? "" : " ", l, thr.back());
  }
  const double p95_base = mean_of(0, 50, &Summary::p95_latency_s);
  const double p95_30 = mean_of(30, 50, &Summary::p95_latency_s);
  const double ratio = p95_base / p95_30;
  return {increasing && ratio >= kLatencyGap,
          fmt::format("rps 50 req/s by replicated layers [{}]; p95 {:.2f} s vs {:.2f} s, ratio {:.2f}", row, p95_base,
                      p95_30, ratio)};
}

Scenario migration_cliff() {
  Scenario s;
  s.cluster = gpus(2, 31700);
  s.instances.push_back({0, PlacementState::on_device(40, 0), 128});
  // Arrival rate ramps linearly to 4 req/s over a minute, then holds.
  for (int i = 0; i < 360; ++i) {
    const double t = i < 120 ? std::sqrt(2.0 * i * 60.0 / 4.0) : 60.0 + (i - 120) / 4.0;
    s.workload.trace.push_back({t, 32, 1024});
  }
  s.workload.duration_s = 120;
  s.controller.t_up = 1.0;
  s.controller.kv_candidates = 0;
  s.controller.max_migration_candidates = 1;
  return s;
}

Outcome ac8() {
  auto on = migration_cliff();
  auto off = on;
  off.controller.enabled = false;
  const auto a = run(off).summary;
  const auto r_on = run(on);
  const auto& b = r_on.summary;
  std::size_t layer_moves = 0;
  for (const auto& op : r_on.op_log) layer_moves += op.op == "migrate_layer" ? 1 : 0;
  const double reduction = 1.0 - b.p95_latency_s / a.p95_latency_s;
  return {reduction >= kMigrationGain && layer_moves >= 1,
          fmt::format("p95 off {:.2f} s ({} OOM) on {:.2f} s ({} OOM), reduction {:.0f}%, {} layer migrations of {} ops",
                      a.p95_latency_s, a.oom_events, b.p95_latency_s, b.oom_events, 100 * reduction, layer_moves,
                      r_on.op_log.size())};
}

Outcome ac9() {
  Scenario s;
  s.cluster = gpus(2, 40000);
  s.instances.push_back({0, PlacementState::on_device(40, 0), 32});
  const int prompt = 32, batch = 8;
  for (int i = 0; i < batch; ++i) s.workload.trace.push_back({0.0, prompt, 4000});
  s.workload.duration_s = 60;
  s.controller.t_up = 1.0;
  auto off = s;
  off.controller.enabled = false;

  // Step k reserves batch * (prompt + k + 1) tokens next to the 40 weight layers.
  const double kv_tok = s.model.n_layers * s.catalog.kv_mb_per_token_per_layer();
  const double free_mb = s.cluster.devices[0].memory_mb - s.model.n_layers * s.catalog.decoder_layer.memory_mb;
  const auto k = static_cast<std::int64_t>(std::floor(free_mb / (batch * kv_tok))) - prompt;
  const auto& p = s.instances[0].placement;
  const auto prefill = step_batch(p, {0, batch, double(batch * prompt), 0, 1}, s.cluster, s.model, s.catalog,
                                  s.speedup, s.calibration);
  const auto decode = step_batch(p, {batch, 0, 0, 0, 1}, s.cluster, s.model, s.catalog, s.speedup, s.calibration);
  const std::int64_t predicted = to_ticks(prefill.total_s()) + (k - 1) * to_ticks(decode.total_s());

  const auto r_off = run(off);
  const auto r_on = run(s);
  const std::int64_t first = r_off.oom_events.empty() ? -1 : r_off.oom_events.front().tick;
  return {!r_off.oom_events.empty() && first == predicted && r_on.oom_events.empty(),
          fmt::format("predicted crossing at tick {}; off: {} OOM (first at tick {}); on: {} OOM, {} ops, {}/{} "
                      "completed",
                      predicted, r_off.oom_events.size(), first, r_on.oom_events.size(), r_on.op_log.size(),
                      r_on.summary.completed, r_on.summary.arrived)};
}

Outcome ac10() {
  const OpCostModel m;
  const double rows[5][4] = {{1, 0.2987, 0.2492, 1107},
                             {10, 0.3581, 0.3181, 6579},
                             {20, 0.3826, 0.3426, 12659},
                             {30, 0.4947, 0.3947, 18739},
                             {40, 0.8938, 0.8138, 24819}};
  bool exact = true;
  for (const auto& r : rows) {
    exact = exact && m.replicate_time(r[0]) == r[1] && m.migrate_time(r[0]) == r[2] && m.memory(r[0]) == r[3];
  }
  const double ratio = m.replicate_time(40) / m.replicate_time(1);
  const double slope = (m.memory(40) - m.memory(1)) / 39.0;
  return {exact && rel_err(ratio, kRatioTarget) <= kCostTol && rel_err(slope, kSlopeTarget) <= kCostTol,
          fmt::format("anchors {}, ratio {:.4f}, slope {:.1f} MB/layer", exact ? "exact" : "MISMATCH", ratio, slope)};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

Outcome ac11() {
  Scenario s;
  s.cluster = gpus(3, 40000);
  s.instances.push_back({0, PlacementState::on_device(40, 0), 32});
  s.instances.push_back({1, PlacementState::on_device(40, 1), 32});
  s.workload.rps = 20;
  s.workload.duration_s = 20;
  s.seed = 2026;
  const auto root = std::filesystem::temp_directory_path() / "modscale_acceptance_determinism";
  std::filesystem::remove_all(root);
  write_outputs(root / "a", run(s), s);
  write_outputs(root / "b", run(s), s);
  bool same = true;
  std::size_t bytes = 0;
  for (const auto& f : output_files()) {
    const auto x = slurp(root / "a" / f);
    same = same && x == slurp(root / "b" / f);
    bytes += x.size();
  }
  std::filesystem::remove_all(root);
  return {same && bytes > 0, fmt::format("{} output files, {} bytes, identical: {}", output_files().size(), bytes,
                                         same ? "yes" : "no")};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"AC1 homogeneous speedup exactness", 1, ac1},
      {"AC2 general and homogeneous speedup agree", 10, ac2},
      {"AC3 module catalog matches layer geometry", 1, ac3},
      {"AC4 greedy scale-up is monotone and feasible", 30, ac4},
      {"AC5 greedy scale-up bounded by exhaustive oracle", 60, ac5},
      {"AC6 scale-down phase discipline", 10, ac6},
      {"AC7 throughput grows with replicated layers", 300, ac7},
      {"AC8 layer migration prevents latency cliff", 120, ac8},
      {"AC9 OOM avoidance", 60, ac9},
      {"AC10 transition cost model", 1, ac10},
      {"AC11 deterministic traces", 30, ac11},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = o.pass && secs < c.budget_s;
    failed += pass ? 0 : 1;
    std::cout << fmt::format("{} {}: {} [{:.2f} s of {:.0f} s]", pass ? "PASS" : "FAIL", c.name, o.detail, secs,
                             c.budget_s)
              << std::endl;
  }
  std::cout << fmt::format("{} of {} criteria passed", criteria.size() - failed, criteria.size()) << std::endl;
  return failed == 0 ? 0 : 1;
}
