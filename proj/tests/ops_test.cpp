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

#include <numeric>
#include <random>

#include "modscale/ops.hpp"

namespace modscale {
namespace {

ClusterSpec gpus(std::size_t n = 2, double mem = 40000) { return ClusterSpec::uniform(n, 312000, mem, 32000, 1.6e6); }

TEST(SplitBatch, Examples) {
  EXPECT_EQ(split_batch(15, 2), (std::vector<std::int64_t>{7, 8}));
  EXPECT_EQ(split_batch(8, 1), (std::vector<std::int64_t>{8}));
  EXPECT_EQ(split_batch(10, 4), (std::vector<std::int64_t>{2, 2, 3, 3}));
  EXPECT_THROW(split_batch(-1, 2), InvalidArgument);
  EXPECT_THROW(split_batch(3, 0), InvalidArgument);
}

TEST(SplitBatch, ConservesAndBalances) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    const auto bs = static_cast<std::int64_t>(rng() % 1000);
    const int p = 1 + static_cast<int>(rng() % 16);
    const auto s = split_batch(bs, p);
    EXPECT_EQ(std::accumulate(s.begin(), s.end(), std::int64_t{0}), bs);
    EXPECT_LE(*std::max_element(s.begin(), s.end()) - *std::min_element(s.begin(), s.end()), 1);
    EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
  }
}

TEST(CostModel, AnchorsAreExact) {
  OpCostModel m;
  const double rows[5][4] = {{1, 0.2987, 0.2492, 1107},
                             {10, 0.3581, 0.3181, 6579},
                             {20, 0.3826, 0.3426, 12659},
                             {30, 0.4947, 0.3947, 18739},
                             {40, 0.8938, 0.8138, 24819}};
  for (const auto& r : rows) {
    EXPECT_DOUBLE_EQ(m.replicate_time(r[0]), r[1]);
    EXPECT_DOUBLE_EQ(m.migrate_time(r[0]), r[2]);
    EXPECT_DOUBLE_EQ(m.memory(r[0]), r[3]);
  }
  EXPECT_DOUBLE_EQ(m.coordination_s, 0.0391);
}

TEST(CostModel, InterpolatesBetweenAnchors) {
  OpCostModel m;
  EXPECT_NEAR(m.replicate_time(15), (0.3581 + 0.3826) / 2, 1e-12);
  EXPECT_NEAR(m.memory(5.5), (1107 + 6579) / 2.0, 1e-9);
  EXPECT_NEAR(m.migrate_time(50), 0.8138 + (0.8138 - 0.3947), 1e-12);
}

TEST(CostModel, MemorySlopeMatchesLayerSize) {
  OpCostModel m;
  const double slope = (m.memory(40) - m.memory(1)) / 39.0;
  EXPECT_NEAR(slope, 608.0, 1.0);
  EXPECT_NEAR(slope / ModuleCatalog{}.decoder_layer.memory_mb, 1.0, 0.01);
}

TEST(CostModel, RejectsNonMonotoneAnchors) {
  OpCostModel m;
  m.anchors[2].replicate_s = 0.1;
  EXPECT_THROW(m.validate(), InvalidArgument);
}

TEST(Apply, ReplicateCostsOneLayer) {
  const auto r = apply(PlacementState::on_device(40, 0), ReplicateLayer{1, 1}, ModuleCatalog{}, gpus());
  EXPECT_NEAR(r.cost.time_s, 0.2987, 1e-12);
  EXPECT_NEAR(r.cost.transient_mb, 1107, 1e-9);
  EXPECT_NEAR(r.cost.coordination_s, 0.0391, 1e-12);
  EXPECT_EQ(derive_parallelism_vector(r.placement)[0], 2);
  ASSERT_EQ(r.log.size(), 1u);
  EXPECT_EQ(r.log[0].op, "replicate_layer");
  EXPECT_EQ(r.log[0].src, 0);
  EXPECT_EQ(r.log[0].dst, 1);
}

TEST(Apply, EvictUndoesReplicate) {
  const auto base = PlacementState::on_device(4, 0);
  const ModuleCatalog cat;
  const auto c = gpus();
  const auto up = apply(base, ReplicateLayer{3, 1}, cat, c).placement;
  EXPECT_EQ(apply(up, EvictReplica{3, 1}, cat, c).placement, base);
  EXPECT_EQ(apply(apply(up, EvictReplica{3, 1}, cat, c).placement, ReplicateLayer{3, 1}, cat, c).placement, up);
}

TEST(Apply, TenLayerMigrationBatches) {
  std::vector<ScalingOp> ops;
  for (LayerId i = 31; i <= 40; ++i) ops.push_back(MigrateLayer{i, 1, true});
  const auto r = batch_apply(PlacementState::on_device(40, 0), ops, ModuleCatalog{}, gpus());
  EXPECT_NEAR(r.cost.time_s, 0.3181, 1e-12);
  EXPECT_EQ(r.cost.coordination_s, 0.0);  // migration keeps P
  for (LayerId i = 31; i <= 40; ++i) EXPECT_EQ(r.placement.original_device(i), 1);
}

TEST(Apply, UnbatchedPaysPerOp) {
  ApplyOptions opts;
  opts.costs.batched = false;
  std::vector<ScalingOp> ops{MigrateLayer{39, 1, true}, MigrateLayer{40, 1, true}};
  const auto r = batch_apply(PlacementState::on_device(40, 0), ops, ModuleCatalog{}, gpus(), opts);
  EXPECT_NEAR(r.cost.time_s, 2 * 0.2492, 1e-12);
}

TEST(BatchApply, EmptyIsIdentity) {
  const auto base = PlacementState::on_device(4, 0);
  const auto r = batch_apply(base, {}, ModuleCatalog{}, gpus());
  EXPECT_EQ(r.placement, base);
  EXPECT_EQ(r.cost.total_s(), 0.0);
  EXPECT_TRUE(r.log.empty());
}

TEST(BatchApply, TwoReplicationsIncrementP) {
  const auto r = batch_apply(PlacementState::on_device(4, 0), {ReplicateLayer{1, 1}, ReplicateLayer{4, 1}},
                             ModuleCatalog{}, gpus());
  EXPECT_EQ(derive_parallelism_vector(r.placement), (std::vector<int>{2, 1, 1, 2}));
}

TEST(BatchApply, InfeasibleSecondOpLeavesInputUntouched) {
  const auto base = PlacementState::on_device(4, 0);
  const auto copy = base;
  const auto c = gpus(2, 1000);  // room for one 605 MB replica on device 1
  EXPECT_THROW(batch_apply(base, {ReplicateLayer{1, 1}, ReplicateLayer{2, 1}}, ModuleCatalog{}, c), InfeasibleOp);
  EXPECT_EQ(base, copy);
}

TEST(Apply, RejectsInvalidOps) {
  const auto base = PlacementState::on_device(2, 0);
  const ModuleCatalog cat;
  EXPECT_THROW(apply(base, ReplicateLayer{1, 0}, cat, gpus()), InvalidArgument);
  EXPECT_THROW(apply(base, EvictReplica{1, 0}, cat, gpus()), InvalidArgument);
  EXPECT_THROW(apply(base, EvictReplica{1, 1}, cat, gpus()), InvalidArgument);
  EXPECT_THROW(apply(base, ReplicateLayer{1, 9}, cat, gpus()), InvalidArgument);
  EXPECT_THROW(apply(base, MigrateSubModule{1, ModuleKind::DecoderLayer, 1}, cat, gpus()), InvalidArgument);
  auto replicated = base;
  replicated.layer(1).replicas.push_back({1, false});
  EXPECT_THROW(apply(replicated, MigrateLayer{1, 2, false}, cat, gpus(3)), InvalidArgument);
  EXPECT_NO_THROW(apply(replicated, MigrateLayer{1, 2, true}, cat, gpus(3)));
}

TEST(Apply, KvMigrationNeedsRoomForCache) {
  const ModuleCatalog cat;
  const auto c = ClusterSpec::uniform(2, 1, 2000, 1, 1);
  const auto base = PlacementState::on_device(2, 0);
  ApplyOptions opts;
  opts.layer_kv_mb[2] = 500;
  opts.extra_mb = {0, 1600};  // 400 MB left on device 1
  EXPECT_THROW(apply(base, MigrateSubModule{2, ModuleKind::KvCache, 1}, cat, c, opts), InfeasibleOp);
  opts.extra_mb = {0, 1400};
  const auto r = apply(base, MigrateSubModule{2, ModuleKind::KvCache, 1}, cat, c, opts);
  EXPECT_EQ(r.placement.kv_device(2), 1);
  EXPECT_EQ(r.log[0].module, "kv_cache");
}

TEST(Apply, LayerMigrationWithoutKvLeavesCacheBehind) {
  const auto r = apply(PlacementState::on_device(2, 0), MigrateLayer{2, 1, false}, ModuleCatalog{}, gpus());
  EXPECT_EQ(r.placement.original_device(2), 1);
  EXPECT_EQ(r.placement.kv_device(2), 0);
  // Moving it back folds the cache into the layer again.
  const auto back = apply(r.placement, MigrateLayer{2, 0, false}, ModuleCatalog{}, gpus());
  EXPECT_TRUE(back.placement.layer(2).overrides.empty());
}

TEST(MemoryFootprint, KvSharedAcrossReplicas) {
  ModuleCatalog cat;
  auto p = PlacementState::on_device(1, 0);
  p.layer(1).replicas.push_back({1, false});
  const KvLoad kv{1000.0, 4, 0.0};
  const auto mem = memory_footprint(p, cat, gpus(), kv);
  const double kv_total = 1000.0 * cat.kv_mb_per_token_per_layer();
  EXPECT_NEAR(mem[0], 605 + kv_total / 2, 1e-9);
  EXPECT_NEAR(mem[1], 605 + kv_total / 2, 1e-9);
  EXPECT_NEAR(layer_kv_mb(p, 1, cat, kv), kv_total / 2, 1e-9);
}

TEST(MemoryFootprint, OffloadShrinksKv) {
  ModuleCatalog cat;
  const auto p = PlacementState::on_device(2, 0);
  const auto full = memory_footprint(p, cat, gpus(), {1000.0, 2, 0.0});
  const auto half = memory_footprint(p, cat, gpus(), {1000.0, 2, 0.5});
  EXPECT_NEAR(full[0] - 2 * 605, 2 * (half[0] - 2 * 605), 1e-9);
}

TEST(MemoryFootprint, ReserveFloorsReplicas) {
  auto p = PlacementState::on_device(1, 0);
  p.layer(1).replicas.push_back({1, false});
  EXPECT_NEAR(memory_footprint(p, ModuleCatalog{}, gpus(), {}, 861)[1], 861, 1e-9);
}

TEST(ReplicaRuns, Examples) {
  auto p = PlacementState::on_device(8, 0);
  EXPECT_TRUE(replica_runs(p, 1).empty());
  for (LayerId i : {3, 4, 7}) p.layer(i).replicas.push_back({1, false});
  EXPECT_EQ(replica_runs(p, 1), (std::vector<std::vector<LayerId>>{{3, 4}, {7}}));
  auto q = PlacementState::on_device(3, 0);
  for (LayerId i : {1, 2, 3}) q.layer(i).replicas.push_back({1, false});
  EXPECT_EQ(replica_runs(q, 1), (std::vector<std::vector<LayerId>>{{1, 2, 3}}));
  EXPECT_TRUE(replica_runs(q, 0).empty());  // originals are not runs
}

TEST(BatchApply, RandomOpSequencesKeepPlacementValid) {
  std::mt19937_64 rng(17);
  const ModuleCatalog cat;
  const auto c = gpus(3, 1e6);
  for (int trial = 0; trial < 200; ++trial) {
    PlacementState p = PlacementState::on_device(6, 0);
    for (int k = 0; k < 10; ++k) {
      const LayerId l = 1 + static_cast<int>(rng() % 6);
      const DeviceId d = static_cast<DeviceId>(rng() % 3);
      ScalingOp op;
      switch (rng() % 4) {
        case 0: op = ReplicateLayer{l, d}; break;
        case 1: op = MigrateLayer{l, d, rng() % 2 == 0}; break;
        case 2: op = MigrateSubModule{l, ModuleKind::GateProj, d}; break;
        default: op = EvictReplica{l, d}; break;
      }
      const auto before = p;
      try {
        const auto r = apply(p, op, cat, c);
        p = r.placement;
        if (std::holds_alternative<ReplicateLayer>(op)) {
          EXPECT_EQ(p.replica_count(l), before.replica_count(l) + 1);
        }
      } catch (const Error&) {
        EXPECT_EQ(p, before);
      }
      EXPECT_NO_THROW(p.validate_against(c));
    }
  }
}

}  // namespace
}  // namespace modscale
