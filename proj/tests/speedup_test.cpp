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


#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "modscale/speedup.hpp"

namespace modscale {
namespace {

ModelSpec tiny_model(int n, int d) {
  ModelSpec m;
  m.n_layers = n;
  m.d_model = d;
  m.n_heads = 1;
  return m;
}

PlacementState with_replicas(const std::vector<int>& p, DeviceId home = 0) {
  auto s = PlacementState::on_device(static_cast<int>(p.size()), home);
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (int j = 1; j < p[i]; ++j) s.layer(static_cast<LayerId>(i + 1)).replicas.push_back({home + j, false});
  }
  return s;
}

TEST(ComputeW, SingleLayer) {
  const auto c = ClusterSpec::uniform(1, 1, 100, 1, 1);
  const auto p = PlacementState::on_device(1, 0);
  EXPECT_DOUBLE_EQ(compute_W(p, even_assignment(p, 8, 3), c, tiny_model(1, 2)), 96.0);
}

TEST(ComputeW, ReplicatedLayerTakesSlowestShard) {
  const auto c = ClusterSpec::uniform(2, 1, 100, 1, 1);
  const auto p = with_replicas({2, 1});
  const auto a = even_assignment(p, 8, 3);
  EXPECT_EQ(a.per_layer[0], (std::vector<std::int64_t>{4, 4}));
  EXPECT_DOUBLE_EQ(compute_W(p, a, c, tiny_model(2, 2)), 144.0);
}

TEST(ComputeW, ZeroBatch) {
  const auto c = ClusterSpec::uniform(2, 1, 100, 1, 1);
  const auto p = with_replicas({2, 1});
  EXPECT_EQ(compute_W(p, even_assignment(p, 0, 3), c, tiny_model(2, 2)), 0.0);
}

TEST(ComputeT, BaselineHasNoCommunication) {
  const auto c = ClusterSpec::uniform(2, 1, 100, 1, 1);
  const auto p = PlacementState::on_device(3, 0);
  EXPECT_EQ(compute_T(p, even_assignment(p, 8, 3), c, tiny_model(3, 2), {}), 0.0);
}

TEST(ComputeT, OneReplica) {
  const auto c = ClusterSpec::uniform(2, 1, 100, 1, 1);
  const auto p = with_replicas({2});
  BatchAssignment a{{{4, 4}}, 3};
  EXPECT_DOUBLE_EQ(compute_T(p, a, c, tiny_model(1, 2), {}), 24.0);
}

TEST(ComputeT, LinearInDelta) {
  std::mt19937_64 rng(3);
  const auto c = ClusterSpec::uniform(3, 5, 100, 2, 4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> pv;
    for (int i = 0; i < 5; ++i) pv.push_back(1 + static_cast<int>(rng() % 3));
    const auto p = with_replicas(pv);
    const auto a = even_assignment(p, 1 + static_cast<std::int64_t>(rng() % 20), 7);
    SpeedupParams one;
    SpeedupParams two;
    two.delta = 2.0;
    EXPECT_NEAR(compute_T(p, a, c, tiny_model(5, 8), two), 2.0 * compute_T(p, a, c, tiny_model(5, 8), one), 1e-9);
  }
}

TEST(Speedup, BaselineIsOne) {
  const auto c = ClusterSpec::uniform(2, 3, 100, 1, 1);
  const auto p = PlacementState::on_device(4, 0);
  EXPECT_DOUBLE_EQ(speedup(p, even_assignment(p, 8, 3), c, tiny_model(4, 2), {}), 1.0);
}

TEST(Speedup, InfiniteBandwidthIsPureParallelism) {
  const auto c = ClusterSpec::uniform(2, 1, 100, 1e30, 1e30);
  const auto p = with_replicas({2, 2});
  EXPECT_NEAR(speedup(p, even_assignment(p, 8, 3), c, tiny_model(2, 2), {}), 2.0, 1e-9);
}

// Direct evaluation of the three sums, independent of the library loops.
double oracle_speedup(const std::vector<std::vector<std::pair<DeviceId, std::int64_t>>>& layers,
                      const std::vector<DeviceId>& origin, const ClusterSpec& c, double d, double l, double delta) {
  double w = 0, t = 0, w0 = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    double worst = 0;
    std::int64_t total = 0;
    for (const auto& [dev, bs] : layers[i]) {
      worst = std::max(worst, d * d * bs * l / c.device(dev).compute_gflops);
      if (dev != origin[i]) t += d * bs * l / c.bandwidth_between(origin[i], dev);
      total += bs;
    }
    w += worst;
    w0 += d * d * total * l / c.device(origin[i]).compute_gflops;
  }
  return w0 / (w + delta * t);
}

TEST(Speedup, MatchesDirectSumsOnHeterogeneousClusters) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.5, 4.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 2 + static_cast<int>(rng() % 3);
    ClusterSpec c = ClusterSpec::uniform(static_cast<std::size_t>(k), 1, 100, 1, 1);
    for (auto& dev : c.devices) dev.compute_gflops = u(rng);
    double max_off = 0;
    for (int i = 0; i < k; ++i) {
      for (int j = i + 1; j < k; ++j) {
        c.bandwidth[i][j] = c.bandwidth[j][i] = u(rng);
        max_off = std::max(max_off, c.bandwidth[i][j]);
      }
    }
    for (int i = 0; i < k; ++i) c.bandwidth[i][i] = max_off;
    const int n = 1 + static_cast<int>(rng() % 6);
    std::vector<DeviceId> origin;
    for (int i = 0; i < n; ++i) origin.push_back(static_cast<DeviceId>(rng() % k));
    auto p = PlacementState::from_devices(origin);
    for (int i = 1; i <= n; ++i) {
      for (int g = 0; g < k; ++g) {
        if (!p.hosts(i, g) && rng() % 2) p.layer(i).replicas.push_back({g, false});
      }
    }
    BatchAssignment a;
    a.seq_len = 1 + static_cast<double>(rng() % 16);
    std::vector<std::vector<std::pair<DeviceId, std::int64_t>>> layers;
    for (int i = 1; i <= n; ++i) {
      std::vector<std::int64_t> row;
      std::vector<std::pair<DeviceId, std::int64_t>> lay;
      for (const auto& r : p.layer(i).replicas) {
        row.push_back(1 + static_cast<std::int64_t>(rng() % 9));
        lay.emplace_back(r.device, row.back());
      }
      a.per_layer.push_back(row);
      layers.push_back(lay);
    }
    SpeedupParams sp;
    sp.delta = u(rng);
    const double d = 8;
    EXPECT_NEAR(speedup(p, a, c, tiny_model(n, 8), sp), oracle_speedup(layers, origin, c, d, a.seq_len, sp.delta),
                1e-9);
  }
}

TEST(Speedup, HomogeneousMatchesClosedForm) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.5, 4.0);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 16);
    const double C = u(rng) * 100, B = u(rng) * 1000, delta = u(rng);
    const int d = 2 * (1 + static_cast<int>(rng() % 32));
    std::vector<int> pv;
    for (int i = 0; i < n; ++i) pv.push_back(1 + static_cast<int>(rng() % 4));
    const auto c = ClusterSpec::uniform(4, C, 1e9, B, B);
    const auto p = with_replicas(pv);
    // Every p_i divides 12, so each split is exactly even.
    const std::int64_t bs = 12 * (1 + static_cast<std::int64_t>(rng() % 3));
    SpeedupParams sp;
    sp.delta = delta;
    const double gamma = delta * C / (d * B);
    EXPECT_NEAR(speedup(p, even_assignment(p, bs, 5), c, tiny_model(n, d), sp), speedup_homo(pv, gamma), 1e-9);
  }
}

TEST(SpeedupHomo, AllOnes) {
  for (double g : {0.0, 0.2, 0.5, 0.99}) EXPECT_NEAR(speedup_homo({1, 1, 1, 1}, g), 1.0, 1e-12);
}

TEST(SpeedupHomo, HandValue) { EXPECT_NEAR(speedup_homo({2, 2, 1, 1}, 0.2), 1.25, 1e-12); }

TEST(SpeedupHomo, AmdahlLimit) {
  for (int p = 1; p <= 16; ++p) EXPECT_NEAR(speedup_homo(std::vector<int>(5, p), 0.0), p, 1e-12);
}

TEST(SpeedupHomo, BoundedByInverseGamma) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const double g = 0.01 + (rng() % 1000) / 1010.0;  // stays below 1
    std::vector<int> pv(1 + rng() % 10);
    for (int& x : pv) x = 1 + static_cast<int>(rng() % 50);
    const double s = speedup_homo(pv, g);
    EXPECT_LE(s, 1.0 / g + 1e-12);
    EXPECT_GE(s, 1.0 - 1e-12);
  }
}

TEST(SpeedupHomo, RejectsBadInput) {
  EXPECT_THROW(speedup_homo({}, 0.1), InvalidArgument);
  EXPECT_THROW(speedup_homo({1, 0}, 0.1), InvalidArgument);
}

TEST(Gamma, DerivedFromCluster) {
  const auto c = ClusterSpec::uniform(2, 312000, 80000, 32000, 1.6e6);
  EXPECT_NEAR(derive_gamma(1.0, c, ModelSpec{}), 312000.0 / (5120.0 * 32000.0), 1e-15);
}

TEST(Oracle, NothingFits) {
  const auto c = ClusterSpec::uniform(2, 1, 1000, 1, 1);
  SpeedupParams sp;
  sp.gamma = 0.1;
  const auto r = oracle_best_strategy(PlacementState::on_device(2, 0), c, tiny_model(2, 2), sp, 605, 10, {0, 100});
  EXPECT_TRUE(r.placement.is_baseline());
  EXPECT_DOUBLE_EQ(r.speedup, 1.0);
}

TEST(Oracle, EnumeratesAllOutcomes) {
  const auto c = ClusterSpec::uniform(2, 1, 1000, 1, 1);
  SpeedupParams sp;
  sp.gamma = 0.1;
  const auto r = oracle_best_strategy(PlacementState::on_device(2, 0), c, tiny_model(2, 2), sp, 605, 10, {0, 1300});
  double best = 0;
  for (const auto& pv : std::vector<std::vector<int>>{{1, 1}, {2, 1}, {1, 2}, {2, 2}}) {
    best = std::max(best, speedup_homo(pv, 0.1));
  }
  EXPECT_NEAR(r.speedup, best, 1e-12);
  EXPECT_EQ(r.parallelism, (std::vector<int>{2, 2}));
  EXPECT_EQ(r.evaluated, 4u);
}

TEST(Oracle, SkipsLayersWithSplitModules) {
  const auto c = ClusterSpec::uniform(2, 1, 1000, 1, 1);
  SpeedupParams sp;
  sp.gamma = 0.1;
  auto base = PlacementState::on_device(2, 0);
  base.layer(2).overrides[ModuleKind::KvCache] = 1;
  const auto r = oracle_best_strategy(base, c, tiny_model(2, 2), sp, 605, 10, {0, 1300});
  EXPECT_EQ(r.parallelism, (std::vector<int>{2, 1}));
  EXPECT_EQ(r.evaluated, 2u);
}

TEST(Oracle, MonotoneInReplicaBudget) {
  const auto c = ClusterSpec::uniform(3, 1, 1e5, 1, 1);
  SpeedupParams sp;
  sp.gamma = 0.05;
  double prev = 0.0;
  for (int m = 0; m <= 6; ++m) {
    const auto r = oracle_best_strategy(PlacementState::on_device(3, 0), c, tiny_model(3, 2), sp, 605, m,
                                        {0, 1300, 1900});
    EXPECT_GE(r.speedup, prev - 1e-12);
    prev = r.speedup;
  }
}

TEST(Oracle, RefusesHugeSearch) {
  const auto c = ClusterSpec::uniform(3, 1, 1e6, 1, 1);
  SpeedupParams sp;
  sp.gamma = 0.1;
  EXPECT_THROW(oracle_best_strategy(PlacementState::on_device(40, 0), c, ModelSpec{}, sp, 605, 100,
                                    {0, 1e6, 1e6}, 1e4),
               SearchSpaceTooLarge);
}

TEST(StrategySpeedup, HeterogeneousUsesFullModel) {
  auto c = ClusterSpec::uniform(2, 2, 1e5, 1, 10);
  c.devices[1].compute_gflops = 1;
  SpeedupParams sp;
  sp.base_batch = 4;
  sp.seq_len = 3;
  const auto p = with_replicas({2, 1});
  EXPECT_DOUBLE_EQ(strategy_speedup(p, c, tiny_model(2, 2), sp), speedup(p, even_assignment(p, 4, 3), c,
                                                                           tiny_model(2, 2), sp));
}

}  // namespace
}  // namespace modscale
