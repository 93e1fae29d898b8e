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

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "modscale/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Module-level autoscaling simulator for LLM serving"};
  app.require_subcommand(1);

  std::string config;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  auto* run = app.add_subcommand("run", "Simulate one scenario and write its traces");
  run->add_option("config", config, "Scenario JSON")->required();
  run->add_option("--out", out_dir, "Output directory")->required();
  run->add_option("--seed", seed, "Override the scenario seed");

  std::string sweep_spec;
  std::string sweep_out;
  int jobs = 1;
  auto* sweep = app.add_subcommand("sweep", "Run a parameter sweep");
  sweep->add_option("spec", sweep_spec, "Sweep JSON")->required();
  sweep->add_option("--out", sweep_out, "Output directory")->required();
  sweep->add_option("--jobs", jobs, "Cells run in parallel")->check(CLI::PositiveNumber);

  std::string oracle_config;
  auto* verify = app.add_subcommand("verify-oracle", "Compare greedy scale-up with exhaustive search");
  verify->add_option("config", oracle_config, "Scenario JSON")->required();

  std::string p_text;
  double gamma = 0.0;
  auto* explain = app.add_subcommand("explain-speedup", "Break down the homogeneous speedup formula");
  explain->add_option("--p", p_text, "Parallelism vector, e.g. 2,2,1,1")->required();
  explain->add_option("--gamma", gamma, "Communication constant")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : modscale::cli::kInvalid;
  }

  if (*run) return modscale::cli::run_scenario(config, out_dir, seed, std::cout, std::cerr);
  if (*sweep) return modscale::cli::run_sweep(sweep_spec, sweep_out, jobs, std::cout, std::cerr);
  if (*verify) return modscale::cli::verify_oracle(oracle_config, std::cout, std::cerr);
  if (*explain) return modscale::cli::explain_speedup(p_text, gamma, std::cout, std::cerr);
  return modscale::cli::kInvalid;
}
