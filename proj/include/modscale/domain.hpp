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

// Core data model: devices, clusters, transformer geometry, the per-module
// cost catalog and the placement of layers (and their replicas) on devices.
//
// Layer ids are 1-based throughout the public API, device ids are whatever
// the cluster declares.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "modscale/error.hpp"

namespace modscale {

inline constexpr double kBytesPerMB = 1e6;

using DeviceId = int;
using LayerId = int;

struct DeviceSpec {
  DeviceId id = 0;
  double compute_gflops = 0.0;  // GFLOP/s
  double memory_mb = 0.0;

  bool operator==(const DeviceSpec&) const = default;
};

/// Devices plus a symmetric bandwidth matrix (MB/s) indexed by device
/// position in `devices`. Diagonal entries are intra-device copies.
struct ClusterSpec {
  std::vector<DeviceSpec> devices;
  std::vector<std::vector<double>> bandwidth;

  bool operator==(const ClusterSpec&) const = default;

  std::size_t size() const noexcept { return devices.size(); }

  std::size_t index_of(DeviceId id) const {
    for (std::size_t i = 0; i < devices.size(); ++i) {
      if (devices[i].id == id) return i;
    }
    throw InvalidArgument("unknown device id " + std::to_string(id));
  }

  bool contains(DeviceId id) const noexcept {
    return std::any_of(devices.begin(), devices.end(),
                       [id](const DeviceSpec& d) { return d.id == id; });
  }

  const DeviceSpec& device(DeviceId id) const { return devices[index_of(id)]; }

  double bandwidth_between(DeviceId a, DeviceId b) const {
    return bandwidth[index_of(a)][index_of(b)];
  }

  /// Uniform compute capacity and a single off-diagonal bandwidth value.
  bool is_homogeneous() const noexcept {
    if (devices.empty()) return true;
    const double c = devices.front().compute_gflops;
    for (const auto& d : devices) {
      if (d.compute_gflops != c) return false;
    }
    std::optional<double> off;
    for (std::size_t i = 0; i < bandwidth.size(); ++i) {
      for (std::size_t j = 0; j < bandwidth[i].size(); ++j) {
        if (i == j) continue;
        if (!off) off = bandwidth[i][j];
        if (bandwidth[i][j] != *off) return false;
      }
    }
    return true;
  }

  void validate() const {
    if (devices.empty()) throw InvalidArgument("cluster has no devices");
    std::set<DeviceId> ids;
    for (const auto& d : devices) {
      if (!(d.compute_gflops > 0.0)) {
        throw InvalidArgument("device " + std::to_string(d.id) + ": compute capacity must be > 0");
      }
      if (!(d.memory_mb > 0.0)) {
        throw InvalidArgument("device " + std::to_string(d.id) + ": memory capacity must be > 0");
      }
      if (!ids.insert(d.id).second) {
        throw InvalidArgument("duplicate device id " + std::to_string(d.id));
      }
    }
    const std::size_t k = devices.size();
    if (bandwidth.size() != k) throw InvalidArgument("bandwidth matrix must be square over all devices");
    double max_off = 0.0;
    double min_diag = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i) {
      if (bandwidth[i].size() != k) throw InvalidArgument("bandwidth matrix must be square over all devices");
      for (std::size_t j = 0; j < k; ++j) {
        if (!(bandwidth[i][j] > 0.0)) throw InvalidArgument("bandwidth entries must be > 0");
        if (bandwidth[i][j] != bandwidth[j][i]) throw InvalidArgument("bandwidth matrix must be symmetric");
        if (i == j) {
          min_diag = std::min(min_diag, bandwidth[i][j]);
        } else {
          max_off = std::max(max_off, bandwidth[i][j]);
        }
      }
    }
    if (min_diag < max_off) {
      throw InvalidArgument("intra-device bandwidth must be >= every inter-device bandwidth");
    }
  }

  static ClusterSpec uniform(std::size_t count, double compute_gflops, double memory_mb,
                             double inter_bandwidth, double intra_bandwidth) {
    ClusterSpec c;
    for (std::size_t i = 0; i < count; ++i) {
      c.devices.push_back({static_cast<DeviceId>(i), compute_gflops, memory_mb});
    }
    c.bandwidth.assign(count, std::vector<double>(count, inter_bandwidth));
    for (std::size_t i = 0; i < count; ++i) c.bandwidth[i][i] = intra_bandwidth;
    return c;
  }
};

/// Transformer geometry. Defaults describe a 13B-class decoder.
struct ModelSpec {
  int n_layers = 40;
  int d_model = 5120;
  int d_ff = 13824;
  int n_heads = 40;
  int dtype_bytes = 2;

  bool operator==(const ModelSpec&) const = default;

  void validate() const {
    if (n_layers < 1) throw InvalidArgument("model needs at least one layer");
    if (d_model < 1 || d_ff < 1 || n_heads < 1 || dtype_bytes < 1) {
      throw InvalidArgument("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) throw InvalidArgument("d_model must be divisible by n_heads");
  }

  int head_dim() const noexcept { return d_model / n_heads; }

  /// K and V for every head of one layer.
  double kv_bytes_per_token_per_layer() const noexcept {
    return 2.0 * static_cast<double>(n_heads) * head_dim() * dtype_bytes;
  }
};

enum class ModuleKind {
  QProj,
  KProj,
  VProj,
  OProj,
  SelfAttention,
  GateProj,
  UpProj,
  DownProj,
  DecoderLayer,
  KvCache,
};

inline constexpr std::array<ModuleKind, 10> kAllModuleKinds = {
    ModuleKind::QProj,    ModuleKind::KProj,  ModuleKind::VProj,    ModuleKind::OProj,
    ModuleKind::SelfAttention, ModuleKind::GateProj, ModuleKind::UpProj, ModuleKind::DownProj,
    ModuleKind::DecoderLayer,  ModuleKind::KvCache};

constexpr bool is_attn_projection(ModuleKind k) noexcept {
  return k == ModuleKind::QProj || k == ModuleKind::KProj || k == ModuleKind::VProj ||
         k == ModuleKind::OProj;
}

constexpr bool is_ffn_projection(ModuleKind k) noexcept {
  return k == ModuleKind::GateProj || k == ModuleKind::UpProj || k == ModuleKind::DownProj;
}

/// True if `inner` is a part of `outer` (a projection inside self-attention).
constexpr bool is_part_of(ModuleKind inner, ModuleKind outer) noexcept {
  return outer == ModuleKind::SelfAttention && is_attn_projection(inner);
}

inline std::string_view to_string(ModuleKind k) noexcept {
  switch (k) {
    case ModuleKind::QProj: return "q_proj";
    case ModuleKind::KProj: return "k_proj";
    case ModuleKind::VProj: return "v_proj";
    case ModuleKind::OProj: return "o_proj";
    case ModuleKind::SelfAttention: return "self_attn";
    case ModuleKind::GateProj: return "gate_proj";
    case ModuleKind::UpProj: return "up_proj";
    case ModuleKind::DownProj: return "down_proj";
    case ModuleKind::DecoderLayer: return "decoder_layer";
    case ModuleKind::KvCache: return "kv_cache";
  }
  return "unknown";
}

inline ModuleKind parse_module_kind(std::string_view s) {
  for (ModuleKind k : kAllModuleKinds) {
    if (to_string(k) == s) return k;
  }
  throw InvalidArgument("unknown module kind '" + std::string(s) + "'");
}

struct ModuleCost {
  double memory_mb = 0.0;
  double gflops = 0.0;  // at the catalog's reference batch and sequence length

  bool operator==(const ModuleCost&) const = default;
};

/// Per-module static memory and reference compute. Compute is quoted at
/// (ref_batch, ref_seq_len) and scales linearly in both.
struct ModuleCatalog {
  ModuleCost attn_projection{50.0, 13.42};
  ModuleCost self_attention{200.0, 55.02};
  ModuleCost ffn_projection{135.0, 36.24};
  ModuleCost decoder_layer{605.0, 127.5};
  double kv_bytes_per_token_per_layer = 2.0 * 5120 * 2;
  int ref_batch = 1;
  int ref_seq_len = 256;

  bool operator==(const ModuleCatalog&) const = default;

  static ModuleCatalog for_model(const ModelSpec& model) {
    ModuleCatalog c;
    c.kv_bytes_per_token_per_layer = model.kv_bytes_per_token_per_layer();
    return c;
  }

  ModuleCost cost(ModuleKind k) const noexcept {
    if (is_attn_projection(k)) return attn_projection;
    if (is_ffn_projection(k)) return ffn_projection;
    switch (k) {
      case ModuleKind::SelfAttention: return self_attention;
      case ModuleKind::DecoderLayer: return decoder_layer;
      default: return {};  // KV cache has no static footprint
    }
  }

  double kv_mb_per_token_per_layer() const noexcept {
    return kv_bytes_per_token_per_layer / kBytesPerMB;
  }

  /// GFLOPs of `k` for `batch` requests of `seq_len` tokens.
  double gflops(ModuleKind k, double batch, double seq_len) const noexcept {
    return cost(k).gflops * (batch / ref_batch) * (seq_len / ref_seq_len);
  }

  /// GFLOPs per MB of weights.
  double compute_density(ModuleKind k) const noexcept {
    const ModuleCost c = cost(k);
    return c.memory_mb > 0.0 ? c.gflops / c.memory_mb : 0.0;
  }

  void validate() const {
    for (const ModuleCost* c : {&attn_projection, &self_attention, &ffn_projection, &decoder_layer}) {
      if (!(c->memory_mb > 0.0) || c->gflops < 0.0) {
        throw InvalidArgument("catalog module costs must have positive memory and non-negative compute");
      }
    }
    if (std::abs(self_attention.memory_mb - 4.0 * attn_projection.memory_mb) > 1e-9) {
      throw InvalidArgument("self_attn memory must equal 4 x attention projection memory");
    }
    if (decoder_layer.memory_mb + 1e-9 < self_attention.memory_mb + 3.0 * ffn_projection.memory_mb) {
      throw InvalidArgument("decoder layer memory must cover self_attn + 3 x ffn projection");
    }
    if (kv_bytes_per_token_per_layer < 0.0) throw InvalidArgument("kv bytes per token must be >= 0");
    if (ref_batch < 1 || ref_seq_len < 1) throw InvalidArgument("catalog reference config must be positive");
  }
};

/// Projection costs derived from geometry alone: weights are d x d (attention)
/// and d x d_ff (FFN), a GEMM costs 2 FLOPs per weight per token.
struct GeometricEstimate {
  ModuleCost attn_projection;
  ModuleCost ffn_projection;
};

inline GeometricEstimate estimate_from_geometry(const ModelSpec& m, double batch, double seq_len) {
  const double d = m.d_model;
  const double ff = m.d_ff;
  GeometricEstimate e;
  e.attn_projection.memory_mb = d * d * m.dtype_bytes / kBytesPerMB;
  e.attn_projection.gflops = 2.0 * batch * seq_len * d * d / 1e9;
  e.ffn_projection.memory_mb = d * ff * m.dtype_bytes / kBytesPerMB;
  e.ffn_projection.gflops = 2.0 * batch * seq_len * d * ff / 1e9;
  return e;
}

struct Replica {
  DeviceId device = 0;
  bool is_original = false;

  bool operator==(const Replica&) const = default;
};

struct LayerPlacement {
  std::vector<Replica> replicas;
  /// Sub-modules moved off the original replica's device.
  std::map<ModuleKind, DeviceId> overrides;

  bool operator==(const LayerPlacement&) const = default;

  const Replica& original() const {
    for (const auto& r : replicas) {
      if (r.is_original) return r;
    }
    throw InvalidArgument("layer has no original replica");
  }
};

/// Where every layer (and every replica of it) lives.
class PlacementState {
 public:
  PlacementState() = default;

  static PlacementState on_device(int n_layers, DeviceId device) {
    return from_devices(std::vector<DeviceId>(static_cast<std::size_t>(n_layers), device));
  }

  /// One original replica per layer, layer i on devices[i - 1].
  static PlacementState from_devices(const std::vector<DeviceId>& devices) {
    PlacementState p;
    p.layers_.reserve(devices.size());
    for (DeviceId d : devices) {
      LayerPlacement lp;
      lp.replicas.push_back({d, true});
      p.layers_.push_back(std::move(lp));
    }
    return p;
  }

  bool operator==(const PlacementState&) const = default;

  int n_layers() const noexcept { return static_cast<int>(layers_.size()); }

  const LayerPlacement& layer(LayerId id) const { return layers_.at(checked(id)); }
  LayerPlacement& layer(LayerId id) { return layers_.at(checked(id)); }

  const std::vector<LayerPlacement>& layers() const noexcept { return layers_; }

  DeviceId original_device(LayerId id) const { return layer(id).original().device; }

  int replica_count(LayerId id) const { return static_cast<int>(layer(id).replicas.size()); }

  /// Any copy (original or replica) of the layer sits on `device`.
  bool hosts(LayerId id, DeviceId device) const {
    const auto& r = layer(id).replicas;
    return std::any_of(r.begin(), r.end(), [device](const Replica& x) { return x.device == device; });
  }

  bool has_replica_on(LayerId id, DeviceId device) const {
    const auto& r = layer(id).replicas;
    return std::any_of(r.begin(), r.end(),
                       [device](const Replica& x) { return !x.is_original && x.device == device; });
  }

  /// Device holding the original replica's KV cache.
  DeviceId kv_device(LayerId id) const {
    const auto& lp = layer(id);
    if (auto it = lp.overrides.find(ModuleKind::KvCache); it != lp.overrides.end()) return it->second;
    return lp.original().device;
  }

  bool is_baseline() const noexcept {
    return std::all_of(layers_.begin(), layers_.end(), [](const LayerPlacement& lp) {
      return lp.replicas.size() == 1 && lp.overrides.empty();
    });
  }

  std::set<DeviceId> devices() const {
    std::set<DeviceId> out;
    for (const auto& lp : layers_) {
      for (const auto& r : lp.replicas) out.insert(r.device);
      for (const auto& [k, d] : lp.overrides) out.insert(d);
    }
    return out;
  }

  /// Number of non-original replicas hosted on `device`.
  int replicas_on(DeviceId device) const {
    int n = 0;
    for (const auto& lp : layers_) {
      for (const auto& r : lp.replicas) n += (!r.is_original && r.device == device) ? 1 : 0;
    }
    return n;
  }

  void validate() const {
    if (layers_.empty()) throw InvalidArgument("placement has no layers");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& lp = layers_[i];
      const std::string where = "layer " + std::to_string(i + 1);
      if (lp.replicas.empty()) throw InvalidArgument(where + " has no replicas");
      const auto originals = std::count_if(lp.replicas.begin(), lp.replicas.end(),
                                           [](const Replica& r) { return r.is_original; });
      if (originals != 1) throw InvalidArgument(where + " must have exactly one original replica");
      std::set<DeviceId> seen;
      for (const auto& r : lp.replicas) {
        if (!seen.insert(r.device).second) {
          throw InvalidArgument(where + " has two copies on device " + std::to_string(r.device));
        }
      }
      if (!lp.overrides.empty() && lp.replicas.size() > 1) {
        throw InvalidArgument(where + " is replicated and cannot carry sub-module overrides");
      }
      for (const auto& [k, d] : lp.overrides) {
        if (k == ModuleKind::DecoderLayer) throw InvalidArgument(where + ": decoder_layer cannot be an override");
        for (const auto& [k2, d2] : lp.overrides) {
          if (is_part_of(k, k2)) {
            throw InvalidArgument(where + ": override of " + std::string(to_string(k)) +
                                  " overlaps " + std::string(to_string(k2)));
          }
        }
      }
    }
  }

  void validate_against(const ClusterSpec& cluster) const {
    validate();
    for (DeviceId d : devices()) {
      if (!cluster.contains(d)) throw InvalidArgument("placement references unknown device " + std::to_string(d));
    }
  }

 private:
  std::size_t checked(LayerId id) const {
    if (id < 1 || id > n_layers()) {
      throw InvalidArgument("layer id " + std::to_string(id) + " out of range [1," +
                            std::to_string(n_layers()) + "]");
    }
    return static_cast<std::size_t>(id - 1);
  }

  std::vector<LayerPlacement> layers_;
};

/// P = [p_1 ... p_n].
inline std::vector<int> derive_parallelism_vector(const PlacementState& placement) {
  std::vector<int> p;
  p.reserve(static_cast<std::size_t>(placement.n_layers()));
  for (const auto& lp : placement.layers()) p.push_back(static_cast<int>(lp.replicas.size()));
  return p;
}

/// Requests given to each replica of each layer; `per_layer[i][j]` follows
/// the replica order of layer i + 1.
struct BatchAssignment {
  std::vector<std::vector<std::int64_t>> per_layer;
  double seq_len = 0.0;

  std::int64_t layer_batch(LayerId id) const {
    std::int64_t s = 0;
    for (auto b : per_layer.at(static_cast<std::size_t>(id - 1))) s += b;
    return s;
  }

  void validate_against(const PlacementState& placement) const {
    if (static_cast<int>(per_layer.size()) != placement.n_layers()) {
      throw InvalidArgument("batch assignment does not cover every layer");
    }
    for (int i = 1; i <= placement.n_layers(); ++i) {
      const auto& row = per_layer[static_cast<std::size_t>(i - 1)];
      if (static_cast<int>(row.size()) != placement.replica_count(i)) {
        throw InvalidArgument("batch assignment missing a replica entry for layer " + std::to_string(i));
      }
      for (auto b : row) {
        if (b < 0) throw InvalidArgument("batch sizes must be >= 0");
      }
    }
    if (seq_len < 0.0) throw InvalidArgument("sequence length must be >= 0");
  }
};

struct DeviceUsage {
  double memory_used_mb = 0.0;
  double compute_load_gflops = 0.0;

  DeviceUsage& operator+=(const DeviceUsage& o) noexcept {
    memory_used_mb += o.memory_used_mb;
    compute_load_gflops += o.compute_load_gflops;
    return *this;
  }
};

namespace detail {

// Static memory and reference compute of one layer's original replica that
// stays on its device once overrides are taken out.
inline ModuleCost resident_layer_cost(const LayerPlacement& lp, const ModuleCatalog& catalog) {
  ModuleCost c = catalog.decoder_layer;
  for (const auto& [k, d] : lp.overrides) {
    const ModuleCost m = catalog.cost(k);
    c.memory_mb -= m.memory_mb;
    c.gflops -= m.gflops;
  }
  c.memory_mb = std::max(c.memory_mb, 0.0);
  c.gflops = std::max(c.gflops, 0.0);
  return c;
}

/// Share of an unreplicated layer's compute run by its original device and
/// by each overridden sub-module's device. Shares sum to 1.
inline std::vector<std::pair<DeviceId, double>> layer_compute_split(const LayerPlacement& lp,
                                                                    const ModuleCatalog& catalog) {
  const DeviceId home = lp.original().device;
  std::vector<std::pair<DeviceId, double>> parts{{home, resident_layer_cost(lp, catalog).gflops}};
  double total = parts.front().second;
  for (const auto& [k, d] : lp.overrides) {
    parts.emplace_back(d, catalog.cost(k).gflops);
    total += catalog.cost(k).gflops;
  }
  if (!(total > 0.0)) return {{home, 1.0}};
  for (auto& part : parts) part.second /= total;
  return parts;
}

}  // namespace detail

/// Aggregate static memory, KV memory and reference compute per device.
///
/// `kv_tokens[d]` is the number of resident tokens per KV-holding layer on
/// device d; it is multiplied by how many layer KV caches live there.
/// Every cluster device appears in the result.
inline std::map<DeviceId, DeviceUsage> device_usage(const PlacementState& placement,
                                                    const ModuleCatalog& catalog,
                                                    const ClusterSpec& cluster,
                                                    const std::map<DeviceId, double>& kv_tokens = {}) {
  std::map<DeviceId, DeviceUsage> usage;
  std::map<DeviceId, int> kv_layers;
  for (const auto& d : cluster.devices) usage[d.id] = {};

  auto at = [&](DeviceId id) -> DeviceUsage& {
    auto it = usage.find(id);
    if (it == usage.end()) throw InvalidArgument("unknown device id " + std::to_string(id));
    return it->second;
  };

  for (int i = 1; i <= placement.n_layers(); ++i) {
    const auto& lp = placement.layer(i);
    for (const auto& r : lp.replicas) {
      const ModuleCost c = r.is_original ? detail::resident_layer_cost(lp, catalog) : catalog.decoder_layer;
      auto& u = at(r.device);
      u.memory_used_mb += c.memory_mb;
      u.compute_load_gflops += c.gflops;
      if (!r.is_original) ++kv_layers[r.device];
    }
    for (const auto& [k, d] : lp.overrides) {
      const ModuleCost c = catalog.cost(k);
      auto& u = at(d);
      u.memory_used_mb += c.memory_mb;
      u.compute_load_gflops += c.gflops;
    }
    ++kv_layers[placement.kv_device(i)];
  }
  for (const auto& [d, tokens] : kv_tokens) {
    auto& u = at(d);
    u.memory_used_mb += tokens * catalog.kv_mb_per_token_per_layer() * kv_layers[d];
  }
  return usage;
}

/// Free fraction of the scarcer resource: min over memory and compute of
/// (capacity - used) / capacity, clamped to [0, 1].
inline double vacancy_rate(double memory_used_mb, double compute_util, const DeviceSpec& spec) noexcept {
  const double mem_free = (spec.memory_mb - memory_used_mb) / spec.memory_mb;
  const double cpu_free = 1.0 - compute_util;
  return std::clamp(std::min(mem_free, cpu_free), 0.0, 1.0);
}

/// `usage.compute_load_gflops` is read as a sustained GFLOP/s demand.
inline double vacancy_rate(const DeviceUsage& usage, const DeviceSpec& spec) noexcept {
  return vacancy_rate(usage.memory_used_mb, usage.compute_load_gflops / spec.compute_gflops, spec);
}

}  // namespace modscale
