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

// Analytic speedup model for layer replication.
//
//   W(P) = sum_i max_j d^2 * bs_ij * l / C_ij              (compute)
//   T(P) = delta * sum_i sum_{non-original j} d * bs_ij * l / B_ij
//   S(P) = W(P0) / (W(P) + T(P))
//
// On a homogeneous cluster with even splits this collapses to
//
//   S_homo(P) = 1 / (gamma + (1 - gamma) / n * sum_i 1 / p_i),
//   gamma = delta * C / (d * B).
//
// W and T are abstract work units, not seconds.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "modscale/domain.hpp"
#include "modscale/error.hpp"
#include "modscale/ops.hpp"

namespace modscale {

struct SpeedupParams {
  double delta = 1.0;
  /// Homogeneous-cluster constant; derived from delta, C, d and B when unset.
  std::optional<double> gamma;
  double seq_len = 256.0;
  std::int64_t base_batch = 15;

  bool operator==(const SpeedupParams&) const = default;

  void validate() const {
    if (!(delta > 0.0)) throw InvalidArgument("delta must be > 0");
    if (gamma && *gamma < 0.0) throw InvalidArgument("gamma must be >= 0");
    if (seq_len < 0.0 || base_batch < 0) throw InvalidArgument("seq_len and base_batch must be >= 0");
  }
};

/// delta * C / (d * B) using the first device and the first inter-device
/// link (or the intra-device link on a single-device cluster).
inline double derive_gamma(double delta, const ClusterSpec& cluster, const ModelSpec& model) {
  const double c = cluster.devices.front().compute_gflops;
  const double b = cluster.size() > 1 ? cluster.bandwidth[0][1] : cluster.bandwidth[0][0];
  return delta * c / (static_cast<double>(model.d_model) * b);
}

inline double effective_gamma(const SpeedupParams& params, const ClusterSpec& cluster, const ModelSpec& model) {
  return params.gamma ? *params.gamma : derive_gamma(params.delta, cluster, model);
}

/// Every layer's batch split evenly over its replicas.
inline BatchAssignment even_assignment(const PlacementState& placement, std::int64_t batch, double seq_len) {
  BatchAssignment a;
  a.seq_len = seq_len;
  a.per_layer.reserve(static_cast<std::size_t>(placement.n_layers()));
  for (const auto& lp : placement.layers()) {
    a.per_layer.push_back(split_batch(batch, static_cast<int>(lp.replicas.size())));
  }
  return a;
}

namespace detail {

inline double compute_term(double d, double bs, double l, double capacity) noexcept {
  return d * d * bs * l / capacity;
}

}  // namespace detail

inline double compute_W(const PlacementState& placement, const BatchAssignment& assignment,
                        const ClusterSpec& cluster, const ModelSpec& model) {
  assignment.validate_against(placement);
  const double d = model.d_model;
  double w = 0.0;
  for (int i = 1; i <= placement.n_layers(); ++i) {
    const auto& reps = placement.layer(i).replicas;
    const auto& bs = assignment.per_layer[static_cast<std::size_t>(i - 1)];
    double worst = 0.0;
    for (std::size_t j = 0; j < reps.size(); ++j) {
      worst = std::max(worst, detail::compute_term(d, static_cast<double>(bs[j]), assignment.seq_len,
                                                   cluster.device(reps[j].device).compute_gflops));
    }
    w += worst;
  }
  return w;
}

inline double compute_T(const PlacementState& placement, const BatchAssignment& assignment,
                        const ClusterSpec& cluster, const ModelSpec& model, const SpeedupParams& params) {
  assignment.validate_against(placement);
  const double d = model.d_model;
  double t = 0.0;
  for (int i = 1; i <= placement.n_layers(); ++i) {
    const auto& reps = placement.layer(i).replicas;
    const auto& bs = assignment.per_layer[static_cast<std::size_t>(i - 1)];
    const DeviceId origin = placement.original_device(i);
    for (std::size_t j = 0; j < reps.size(); ++j) {
      if (reps[j].is_original) continue;
      t += d * static_cast<double>(bs[j]) * assignment.seq_len / cluster.bandwidth_between(origin, reps[j].device);
    }
  }
  return params.delta * t;
}

/// W(P0): every layer's full inbound batch on its original device.
inline double compute_W_baseline(const PlacementState& placement, const BatchAssignment& assignment,
                                 const ClusterSpec& cluster, const ModelSpec& model) {
  assignment.validate_against(placement);
  const double d = model.d_model;
  double w = 0.0;
  for (int i = 1; i <= placement.n_layers(); ++i) {
    w += detail::compute_term(d, static_cast<double>(assignment.layer_batch(i)), assignment.seq_len,
                              cluster.device(placement.original_device(i)).compute_gflops);
  }
  return w;
}

inline double speedup(const PlacementState& placement, const BatchAssignment& assignment,
                      const ClusterSpec& cluster, const ModelSpec& model, const SpeedupParams& params) {
  const double denom = compute_W(placement, assignment, cluster, model) +
                       compute_T(placement, assignment, cluster, model, params);
  if (!(denom > 0.0)) throw InvalidArgument("speedup undefined for a zero workload");
  return compute_W_baseline(placement, assignment, cluster, model) / denom;
}

inline double reciprocal_l1(const std::vector<int>& p) {
  double s = 0.0;
  for (int x : p) {
    if (x < 1) throw InvalidArgument("parallelism entries must be >= 1");
    s += 1.0 / x;
  }
  return s;
}

inline double speedup_homo(const std::vector<int>& p, double gamma) {
  if (p.empty()) throw InvalidArgument("parallelism vector must not be empty");
  const double n = static_cast<double>(p.size());
  return 1.0 / (gamma + (1.0 - gamma) / n * reciprocal_l1(p));
}

/// Speedup used to rank replication strategies: S_homo on homogeneous
/// clusters, S(P) with even splits of `params.base_batch` otherwise.
inline double strategy_speedup(const PlacementState& placement, const ClusterSpec& cluster,
                               const ModelSpec& model, const SpeedupParams& params) {
  if (cluster.is_homogeneous()) {
    return speedup_homo(derive_parallelism_vector(placement), effective_gamma(params, cluster, model));
  }
  const std::int64_t bs = std::max<std::int64_t>(params.base_batch, 1);
  const double l = params.seq_len > 0.0 ? params.seq_len : 1.0;
  return speedup(placement, even_assignment(placement, bs, l), cluster, model, params);
}

struct OracleResult {
  PlacementState placement;
  std::vector<int> parallelism;
  double speedup = 1.0;
  std::size_t evaluated = 0;
};

namespace detail {

inline double binomial(int n, int k) {
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

}  // namespace detail

/// Exhaustive search over replica placements on top of `base`.
///
/// Device g can take floor(free_mb[g] / replica_size_mb) new replicas, at
/// most one per layer and never on a device that already hosts that layer.
/// Returns the speedup maximiser; ties go to fewer replicas, then to the
/// lexicographically smaller P. Throws SearchSpaceTooLarge beyond
/// `max_assignments`.
inline OracleResult oracle_best_strategy(const PlacementState& base, const ClusterSpec& cluster,
                                         const ModelSpec& model, const SpeedupParams& params,
                                         double replica_size_mb, int max_total_replicas,
                                         const std::vector<double>& free_mb,
                                         double max_assignments = 1e6) {
  if (!(replica_size_mb > 0.0)) throw InvalidArgument("replica size must be > 0");
  const std::size_t k = cluster.size();
  std::vector<int> cap(k, 0);
  std::vector<std::vector<LayerId>> cands(k);
  double space = 1.0;
  for (std::size_t g = 0; g < k; ++g) {
    const double free = g < free_mb.size() ? free_mb[g] : 0.0;
    cap[g] = free > 0.0 ? static_cast<int>(std::floor(free / replica_size_mb)) : 0;
    for (int i = 1; i <= base.n_layers(); ++i) {
      if (!base.hosts(i, cluster.devices[g].id) && base.layer(i).overrides.empty()) cands[g].push_back(i);
    }
    cap[g] = std::min({cap[g], static_cast<int>(cands[g].size()), std::max(max_total_replicas, 0)});
    double options = 0.0;
    for (int c = 0; c <= cap[g]; ++c) options += detail::binomial(static_cast<int>(cands[g].size()), c);
    space *= options;
    if (space > max_assignments) {
      throw SearchSpaceTooLarge("oracle search space exceeds " + std::to_string(max_assignments) +
                                " assignments; shrink the cluster, the model or the free memory");
    }
  }

  OracleResult best{base, derive_parallelism_vector(base), strategy_speedup(base, cluster, model, params), 0};
  int best_total = 0;
  PlacementState current = base;
  int total = 0;

  auto consider = [&]() {
    ++best.evaluated;
    const double sp = strategy_speedup(current, cluster, model, params);
    const double eps = 1e-12 * std::max(1.0, std::abs(best.speedup));
    auto p = derive_parallelism_vector(current);
    bool better = sp > best.speedup + eps;
    if (!better && std::abs(sp - best.speedup) <= eps) {
      better = total < best_total || (total == best_total && p < best.parallelism);
    }
    if (better) {
      best.placement = current;
      best.parallelism = std::move(p);
      best.speedup = sp;
      best_total = total;
    }
  };

  // Device by device, choose a subset of its candidates (size <= cap).
  std::function<void(std::size_t, std::size_t, int)> walk = [&](std::size_t g, std::size_t from, int used) {
    if (g == k) {
      consider();
      return;
    }
    // Stop adding on this device; move on.
    walk(g + 1, 0, 0);
    if (used >= cap[g] || total >= max_total_replicas) return;
    const DeviceId dev = cluster.devices[g].id;
    for (std::size_t c = from; c < cands[g].size(); ++c) {
      const LayerId layer = cands[g][c];
      current.layer(layer).replicas.push_back({dev, false});
      ++total;
      walk(g, c + 1, used + 1);
      --total;
      current.layer(layer).replicas.pop_back();
    }
  };
  walk(0, 0, 0);
  return best;
}

}  // namespace modscale
