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

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "modscale/error.hpp"

namespace modscale {

/// mt19937_64 with distribution helpers that do not depend on the
/// standard library's (implementation-defined) distribution algorithms, so
/// seeded traces are identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (hi <= lo) return lo;
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(engine_() % span);
  }

  double exponential(double rate) { return -std::log1p(-uniform()) / rate; }

 private:
  std::mt19937_64 engine_;
};

struct LengthRange {
  int min = 1;
  int max = 1;
  bool operator==(const LengthRange&) const = default;
};

struct TraceEntry {
  double t = 0.0;
  int prompt_len = 1;
  int gen_len = 1;
  bool operator==(const TraceEntry&) const = default;
};

struct WorkloadSpec {
  double rps = 10.0;
  double duration_s = 60.0;
  LengthRange prompt_len{16, 128};
  /// Tokens to generate per request; `gen_len.max` is the generation cap.
  LengthRange gen_len{64, 256};
  /// Replayed verbatim (timestamps relative to start) when non-empty.
  std::vector<TraceEntry> trace;
  std::uint64_t seed = 42;

  bool operator==(const WorkloadSpec&) const = default;

  void validate() const {
    if (rps < 0.0) throw InvalidArgument("workload rps must be >= 0");
    if (duration_s < 0.0) throw InvalidArgument("workload duration must be >= 0");
    if (prompt_len.min < 1 || prompt_len.max < prompt_len.min) throw InvalidArgument("prompt_len range is invalid");
    if (gen_len.min < 1 || gen_len.max < gen_len.min) throw InvalidArgument("gen_len range is invalid");
    double prev = 0.0;
    for (const auto& e : trace) {
      if (e.t < prev) throw InvalidArgument("trace timestamps must be non-decreasing and >= 0");
      if (e.prompt_len < 1 || e.gen_len < 1) throw InvalidArgument("trace lengths must be >= 1");
      prev = e.t;
    }
  }
};

struct ArrivalEvent {
  std::int64_t id = 0;
  double t = 0.0;
  int prompt_len = 1;
  int gen_len = 1;
  bool operator==(const ArrivalEvent&) const = default;
};

/// Poisson arrivals over [0, duration), or the replayed trace.
inline std::vector<ArrivalEvent> generate_arrivals(const WorkloadSpec& spec) {
  spec.validate();
  std::vector<ArrivalEvent> out;
  if (!spec.trace.empty()) {
    for (const auto& e : spec.trace) {
      out.push_back({static_cast<std::int64_t>(out.size()), e.t, e.prompt_len, e.gen_len});
    }
    return out;
  }
  if (spec.rps <= 0.0 || spec.duration_s <= 0.0) return out;
  Rng rng(spec.seed);
  double t = 0.0;
  while (true) {
    t += rng.exponential(spec.rps);
    if (t >= spec.duration_s) break;
    const int prompt = static_cast<int>(rng.uniform_int(spec.prompt_len.min, spec.prompt_len.max));
    const int gen = static_cast<int>(rng.uniform_int(spec.gen_len.min, spec.gen_len.max));
    out.push_back({static_cast<std::int64_t>(out.size()), t, prompt, gen});
  }
  return out;
}

struct Request {
  std::int64_t id = 0;
  double arrival_t = 0.0;
  int prompt_len = 1;
  int gen_len = 1;
  int instance = -1;
  int generated = 0;
  int requeues = 0;
  bool failed = false;
  std::optional<double> completion_t;

  bool done() const noexcept { return completion_t.has_value(); }
  double latency() const noexcept { return completion_t ? *completion_t - arrival_t : 0.0; }
  int context_len() const noexcept { return prompt_len + generated; }
};

}  // namespace modscale
