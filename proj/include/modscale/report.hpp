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

// Run outputs.
//
//   trace.csv        one row per monitor interval
//   requests.csv     one row per request
//   ops.csv          one row per applied scaling op
//   decisions.jsonl  one object per controller decision
//   summary.json     aggregate numbers, recomputable from the four above
//
// CSV files open with a "# modscale-<kind> schema=MAJOR.MINOR key=value..."
// line and decisions.jsonl with {"schema_version": "MAJOR.MINOR"}. Readers
// reject a major version they do not know.

#pragma once

#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "modscale/error.hpp"
#include "modscale/sim.hpp"

namespace modscale {

inline constexpr int kSchemaMajor = 1;
inline constexpr int kSchemaMinor = 0;

namespace detail {

inline std::string num(double v) { return fmt::format("{}", v); }

inline std::string schema_string() { return fmt::format("{}.{}", kSchemaMajor, kSchemaMinor); }

inline void check_schema(const std::string& version, const std::string& what) {
  const auto dot = version.find('.');
  int major = -1;
  try {
    major = std::stoi(version.substr(0, dot));
  } catch (const std::exception&) {
    throw ConfigError(what, "malformed schema version '" + version + "'");
  }
  if (major != kSchemaMajor) {
    throw ConfigError(what, "unsupported schema major version " + std::to_string(major));
  }
}

inline std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

/// Parses "# modscale-<kind> schema=1.0 k=v ..." and checks kind and version.
inline std::map<std::string, std::string> read_header(std::istream& in, const std::string& kind) {
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(kind, "empty file");
  const auto parts = split(line, ' ');
  if (parts.size() < 2 || parts[0] != "#" || parts[1] != "modscale-" + kind) {
    throw ConfigError(kind, "missing modscale-" + kind + " header");
  }
  std::map<std::string, std::string> meta;
  for (std::size_t i = 2; i < parts.size(); ++i) {
    const auto eq = parts[i].find('=');
    if (eq != std::string::npos) meta[parts[i].substr(0, eq)] = parts[i].substr(eq + 1);
  }
  if (!meta.count("schema")) throw ConfigError(kind, "header has no schema version");
  check_schema(meta["schema"], kind);
  return meta;
}

/// Column name -> index, from the line after the header.
inline std::map<std::string, std::size_t> read_columns(std::istream& in, const std::string& kind) {
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(kind, "missing column row");
  std::map<std::string, std::size_t> cols;
  const auto names = split(line);
  for (std::size_t i = 0; i < names.size(); ++i) cols[names[i]] = i;
  return cols;
}

inline const std::string& cell(const std::vector<std::string>& row, const std::map<std::string, std::size_t>& cols,
                               const std::string& name) {
  auto it = cols.find(name);
  if (it == cols.end() || it->second >= row.size()) throw ConfigError(name, "missing column");
  return row[it->second];
}

}  // namespace detail

inline void write_trace_csv(std::ostream& out, const std::vector<SimMetrics>& trace, const ClusterSpec& cluster,
                            double duration_s) {
  out << "# modscale-trace schema=" << detail::schema_string() << " duration_s=" << detail::num(duration_s)
      << " devices=" << cluster.size() << "\n";
  out << "tick,time_s,rps_in,throughput_tok_s,throughput_req_s,p50_latency_s,p95_latency_s,p99_latency_s,"
         "violation_rate,arrivals,completed,failed,violations,tokens,latency_sum_s,oom_events,in_flight,queued,"
         "arrived_total,completed_total,failed_total";
  for (const auto& d : cluster.devices) out << ",mem_util_" << d.id << ",compute_util_" << d.id;
  out << "\n";
  for (const auto& m : trace) {
    out << m.tick << ',' << detail::num(m.time_s) << ',' << detail::num(m.rps_in) << ','
        << detail::num(m.throughput_tok_s) << ',' << detail::num(m.throughput_req_s) << ','
        << detail::num(m.p50_latency_s) << ',' << detail::num(m.p95_latency_s) << ',' << detail::num(m.p99_latency_s)
        << ',' << detail::num(m.violation_rate) << ',' << m.arrivals << ',' << m.completed << ',' << m.failed << ','
        << m.violations << ',' << m.tokens << ',' << detail::num(m.latency_sum_s) << ',' << m.oom_events << ','
        << m.in_flight << ',' << m.queued << ',' << m.arrived_total << ',' << m.completed_total << ','
        << m.failed_total;
    for (std::size_t g = 0; g < cluster.size(); ++g) {
      out << ',' << detail::num(m.mem_util.at(g)) << ',' << detail::num(m.compute_util.at(g));
    }
    out << "\n";
  }
}

struct TraceFile {
  double duration_s = 0.0;
  std::vector<SimMetrics> rows;
};

inline TraceFile read_trace_csv(std::istream& in) {
  TraceFile f;
  const auto meta = detail::read_header(in, "trace");
  f.duration_s = meta.count("duration_s") ? std::stod(meta.at("duration_s")) : 0.0;
  const std::size_t devices = meta.count("devices") ? std::stoul(meta.at("devices")) : 0;
  const auto cols = detail::read_columns(in, "trace");
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto row = detail::split(line);
    auto i64 = [&](const char* c) { return std::stoll(detail::cell(row, cols, c)); };
    auto dbl = [&](const char* c) { return std::stod(detail::cell(row, cols, c)); };
    SimMetrics m;
    m.tick = i64("tick");
    m.time_s = dbl("time_s");
    m.rps_in = dbl("rps_in");
    m.throughput_tok_s = dbl("throughput_tok_s");
    m.throughput_req_s = dbl("throughput_req_s");
    m.p50_latency_s = dbl("p50_latency_s");
    m.p95_latency_s = dbl("p95_latency_s");
    m.p99_latency_s = dbl("p99_latency_s");
    m.violation_rate = dbl("violation_rate");
    m.arrivals = i64("arrivals");
    m.completed = i64("completed");
    m.failed = i64("failed");
    m.violations = i64("violations");
    m.tokens = i64("tokens");
    m.latency_sum_s = dbl("latency_sum_s");
    m.oom_events = i64("oom_events");
    m.in_flight = i64("in_flight");
    m.queued = i64("queued");
    m.arrived_total = i64("arrived_total");
    m.completed_total = i64("completed_total");
    m.failed_total = i64("failed_total");
    // Device columns follow the fixed ones in pairs.
    const std::size_t first = cols.at("failed_total") + 1;
    for (std::size_t g = 0; g < devices; ++g) {
      m.mem_util.push_back(std::stod(row.at(first + 2 * g)));
      m.compute_util.push_back(std::stod(row.at(first + 2 * g + 1)));
    }
    f.rows.push_back(std::move(m));
  }
  return f;
}

inline void write_requests_csv(std::ostream& out, const std::vector<Request>& requests, double slo_latency_s) {
  out << "# modscale-requests schema=" << detail::schema_string() << " slo_latency_s=" << detail::num(slo_latency_s)
      << "\n";
  out << "id,instance,arrival_t,prompt_len,gen_len,generated,requeues,failed,completion_t\n";
  for (const auto& r : requests) {
    out << r.id << ',' << r.instance << ',' << detail::num(r.arrival_t) << ',' << r.prompt_len << ',' << r.gen_len
        << ',' << r.generated << ',' << r.requeues << ',' << (r.failed ? 1 : 0) << ','
        << (r.completion_t ? detail::num(*r.completion_t) : std::string()) << "\n";
  }
}

struct RequestsFile {
  double slo_latency_s = 0.0;
  std::vector<Request> rows;
};

inline RequestsFile read_requests_csv(std::istream& in) {
  RequestsFile f;
  const auto meta = detail::read_header(in, "requests");
  f.slo_latency_s = meta.count("slo_latency_s") ? std::stod(meta.at("slo_latency_s")) : 0.0;
  const auto cols = detail::read_columns(in, "requests");
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto row = detail::split(line);
    Request r;
    r.id = std::stoll(detail::cell(row, cols, "id"));
    r.instance = std::stoi(detail::cell(row, cols, "instance"));
    r.arrival_t = std::stod(detail::cell(row, cols, "arrival_t"));
    r.prompt_len = std::stoi(detail::cell(row, cols, "prompt_len"));
    r.gen_len = std::stoi(detail::cell(row, cols, "gen_len"));
    r.generated = std::stoi(detail::cell(row, cols, "generated"));
    r.requeues = std::stoi(detail::cell(row, cols, "requeues"));
    r.failed = detail::cell(row, cols, "failed") == "1";
    const auto& c = detail::cell(row, cols, "completion_t");
    if (!c.empty()) r.completion_t = std::stod(c);
    f.rows.push_back(r);
  }
  return f;
}

inline void write_ops_csv(std::ostream& out, const std::vector<OpLogRecord>& log) {
  out << "# modscale-ops schema=" << detail::schema_string() << "\n";
  out << "tick,op,layer,module,src,dst,time_s,transient_mb\n";
  for (const auto& r : log) {
    out << r.tick << ',' << r.op << ',' << r.layer << ',' << r.module << ',' << r.src << ',' << r.dst << ','
        << detail::num(r.time_s) << ',' << detail::num(r.transient_mb) << "\n";
  }
}

inline std::vector<OpLogRecord> read_ops_csv(std::istream& in) {
  detail::read_header(in, "ops");
  const auto cols = detail::read_columns(in, "ops");
  std::vector<OpLogRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto row = detail::split(line);
    OpLogRecord r;
    r.tick = std::stoll(detail::cell(row, cols, "tick"));
    r.op = detail::cell(row, cols, "op");
    r.layer = std::stoi(detail::cell(row, cols, "layer"));
    r.module = detail::cell(row, cols, "module");
    r.src = std::stoi(detail::cell(row, cols, "src"));
    r.dst = std::stoi(detail::cell(row, cols, "dst"));
    r.time_s = std::stod(detail::cell(row, cols, "time_s"));
    r.transient_mb = std::stod(detail::cell(row, cols, "transient_mb"));
    out.push_back(std::move(r));
  }
  return out;
}

inline nlohmann::json decision_to_json(const DecisionRecord& d) {
  return {{"tick", d.tick},
          {"instance", d.instance},
          {"trigger", d.trigger},
          {"device", d.device ? nlohmann::json(*d.device) : nlohmann::json(nullptr)},
          {"ops", d.ops},
          {"final_phase", d.final_phase},
          {"speedup_before", d.speedup_before},
          {"speedup_after", d.speedup_after},
          {"batch_before", d.batch_before},
          {"batch_after", d.batch_after},
          {"offload_before", d.offload_before},
          {"offload_after", d.offload_after},
          {"cost_s", d.cost_s}};
}

inline void write_decisions_jsonl(std::ostream& out, const std::vector<DecisionRecord>& decisions) {
  out << nlohmann::json{{"schema_version", detail::schema_string()}}.dump() << "\n";
  for (const auto& d : decisions) out << decision_to_json(d).dump() << "\n";
}

inline std::vector<DecisionRecord> read_decisions_jsonl(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("decisions", "empty file");
  const auto head = nlohmann::json::parse(line, nullptr, false);
  if (!head.is_object() || !head.contains("schema_version") || !head["schema_version"].is_string()) {
    throw ConfigError("decisions", "missing schema_version line");
  }
  detail::check_schema(head["schema_version"].get<std::string>(), "decisions");
  std::vector<DecisionRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    DecisionRecord d;
    d.tick = j.at("tick").get<std::int64_t>();
    d.instance = j.at("instance").get<int>();
    d.trigger = j.at("trigger").get<std::string>();
    if (!j.at("device").is_null()) d.device = j.at("device").get<int>();
    d.ops = j.at("ops").get<std::vector<std::string>>();
    d.final_phase = j.at("final_phase").get<int>();
    d.speedup_before = j.at("speedup_before").get<double>();
    d.speedup_after = j.at("speedup_after").get<double>();
    d.batch_before = j.at("batch_before").get<std::int64_t>();
    d.batch_after = j.at("batch_after").get<std::int64_t>();
    d.offload_before = j.at("offload_before").get<double>();
    d.offload_after = j.at("offload_after").get<double>();
    d.cost_s = j.at("cost_s").get<double>();
    out.push_back(std::move(d));
  }
  return out;
}

inline nlohmann::json summary_to_json(const Summary& s) {
  return {{"schema_version", detail::schema_string()},
          {"duration_s", s.duration_s},
          {"end_time_s", s.end_time_s},
          {"arrived", s.arrived},
          {"completed", s.completed},
          {"failed", s.failed},
          {"unfinished", s.unfinished},
          {"mean_latency_s", s.mean_latency_s},
          {"p50_latency_s", s.p50_latency_s},
          {"p95_latency_s", s.p95_latency_s},
          {"p99_latency_s", s.p99_latency_s},
          {"throughput_tok_s", s.throughput_tok_s},
          {"throughput_req_s", s.throughput_req_s},
          {"violation_rate", s.violation_rate},
          {"oom_events", s.oom_events},
          {"ops_executed", s.ops_executed},
          {"total_scaling_cost_s", s.total_scaling_cost_s}};
}

inline Summary summary_from_json(const nlohmann::json& j) {
  if (!j.contains("schema_version") || !j["schema_version"].is_string()) {
    throw ConfigError("summary", "missing schema_version");
  }
  detail::check_schema(j["schema_version"].get<std::string>(), "summary");
  Summary s;
  s.duration_s = j.at("duration_s").get<double>();
  s.end_time_s = j.at("end_time_s").get<double>();
  s.arrived = j.at("arrived").get<std::int64_t>();
  s.completed = j.at("completed").get<std::int64_t>();
  s.failed = j.at("failed").get<std::int64_t>();
  s.unfinished = j.at("unfinished").get<std::int64_t>();
  s.mean_latency_s = j.at("mean_latency_s").get<double>();
  s.p50_latency_s = j.at("p50_latency_s").get<double>();
  s.p95_latency_s = j.at("p95_latency_s").get<double>();
  s.p99_latency_s = j.at("p99_latency_s").get<double>();
  s.throughput_tok_s = j.at("throughput_tok_s").get<double>();
  s.throughput_req_s = j.at("throughput_req_s").get<double>();
  s.violation_rate = j.at("violation_rate").get<double>();
  s.oom_events = j.at("oom_events").get<std::int64_t>();
  s.ops_executed = j.at("ops_executed").get<std::int64_t>();
  s.total_scaling_cost_s = j.at("total_scaling_cost_s").get<double>();
  return s;
}

/// Rebuilds the summary from the raw output files.
inline Summary recompute_summary(const TraceFile& trace, const RequestsFile& requests,
                                 const std::vector<OpLogRecord>& ops, const std::vector<DecisionRecord>& decisions) {
  Summary s;
  s.duration_s = trace.duration_s;
  s.end_time_s = trace.rows.empty() ? 0.0 : trace.rows.back().time_s;
  std::vector<double> lat;
  std::int64_t violated = 0;
  for (const auto& r : requests.rows) {
    ++s.arrived;
    if (!r.done()) continue;
    ++(r.failed ? s.failed : s.completed);
    lat.push_back(r.latency());
    violated += r.failed || r.latency() > requests.slo_latency_s ? 1 : 0;
  }
  s.unfinished = s.arrived - s.completed - s.failed;
  double sum = 0.0;
  for (double l : lat) sum += l;
  s.mean_latency_s = lat.empty() ? 0.0 : sum / static_cast<double>(lat.size());
  s.p50_latency_s = percentile(lat, 50);
  s.p95_latency_s = percentile(lat, 95);
  s.p99_latency_s = percentile(lat, 99);
  const std::int64_t window_end = to_ticks(trace.duration_s);
  std::int64_t tokens = 0;
  std::int64_t done = 0;
  for (const auto& m : trace.rows) {
    s.oom_events += m.oom_events;
    if (m.tick <= window_end) {
      tokens += m.tokens;
      done += m.completed;
    }
  }
  if (trace.duration_s > 0.0) {
    s.throughput_tok_s = static_cast<double>(tokens) / to_seconds(window_end);
    s.throughput_req_s = static_cast<double>(done) / to_seconds(window_end);
  }
  const std::int64_t outcomes = s.completed + s.failed;
  s.violation_rate = outcomes > 0 ? static_cast<double>(violated) / static_cast<double>(outcomes) : 0.0;
  s.ops_executed = static_cast<std::int64_t>(ops.size());
  for (const auto& d : decisions) s.total_scaling_cost_s += d.cost_s;
  return s;
}

inline const std::vector<std::string>& output_files() {
  static const std::vector<std::string> files = {"trace.csv", "requests.csv", "ops.csv", "decisions.jsonl",
                                                 "summary.json"};
  return files;
}

inline void write_outputs(const std::filesystem::path& dir, const SimResult& result, const Scenario& scenario) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("trace.csv");
    write_trace_csv(f, result.trace, scenario.cluster, result.summary.duration_s);
  }
  {
    auto f = open("requests.csv");
    write_requests_csv(f, result.requests, scenario.controller.slo_latency_s);
  }
  {
    auto f = open("ops.csv");
    write_ops_csv(f, result.op_log);
  }
  {
    auto f = open("decisions.jsonl");
    write_decisions_jsonl(f, result.decisions);
  }
  {
    auto f = open("summary.json");
    f << summary_to_json(result.summary).dump(2) << "\n";
  }
}

inline Summary recompute_summary(const std::filesystem::path& dir) {
  auto open = [&](const char* name) {
    std::ifstream f(dir / name, std::ios::binary);
    if (!f) throw ConfigError((dir / name).string(), "cannot open file");
    return f;
  };
  auto t = open("trace.csv");
  auto r = open("requests.csv");
  auto o = open("ops.csv");
  auto d = open("decisions.jsonl");
  return recompute_summary(read_trace_csv(t), read_requests_csv(r), read_ops_csv(o), read_decisions_jsonl(d));
}

}  // namespace modscale
