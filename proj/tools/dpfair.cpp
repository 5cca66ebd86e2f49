// Copyright 2026 The dpfair Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// dpfair: run, sweep and report private-training fairness experiments.
//
//   dpfair run <cfg.json>    [--out DIR] [--seed N] [--jobs N] [--decompose off|full|mc:M]
//   dpfair sweep <cfg.json>  [same flags]
//   dpfair report <dir>...   [--out DIR]
//
// Exit codes: 0 success, 1 runtime failure, 2 config or usage error.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dpfair/experiment.hpp"

namespace {

namespace fs = std::filesystem;

struct Overrides {
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  unsigned jobs = 0;
  std::optional<std::string> decompose;
};

void add_run_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--seed", o.seed, "Base seed (overrides mc.seed)");
  cmd->add_option("--jobs", o.jobs, "Worker threads (0 = all cores)");
  cmd->add_option("--decompose", o.decompose, "Decomposition mode: off, full or mc:M");
}

std::string env_root() {
  const char* root = std::getenv("DPFAIR_OUT");
  return root ? std::string(root) : std::string();
}

// --out wins; otherwise the config's output (under $DPFAIR_OUT when
// relative), otherwise $DPFAIR_OUT/<config name>, otherwise runs/<config name>.
std::string resolve_output(const Overrides& o, const nlohmann::json& j, const fs::path& cfg_path) {
  if (o.out) return *o.out;
  const std::string root = env_root();
  if (j.contains("output") && j.at("output").is_string() &&
      !j.at("output").get<std::string>().empty()) {
    fs::path p = j.at("output").get<std::string>();
    if (p.is_relative() && !root.empty()) p = fs::path(root) / p;
    return p.string();
  }
  return (fs::path(root.empty() ? "runs" : root) / cfg_path.stem()).string();
}

dpfair::ExperimentConfig load(const std::string& path, const Overrides& o) {
  nlohmann::json j = dpfair::read_config_json(path);
  if (!j.is_object()) throw dpfair::ConfigError("<root>", "expected an object");
  if (o.seed) j["mc"]["seed"] = *o.seed;
  if (o.decompose) j["train"]["decomposition"] = *o.decompose;
  j["output"] = resolve_output(o, j, path);
  return dpfair::parse_config(j, fs::path(path).parent_path());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentially private training fairness laboratory"};
  app.require_subcommand(1);

  Overrides run_flags;
  std::string run_cfg;
  auto* run = app.add_subcommand("run", "Run one experiment");
  run->add_option("config", run_cfg, "Experiment config (JSON)")->required();
  add_run_flags(run, run_flags);

  Overrides sweep_flags;
  std::string sweep_cfg;
  auto* sweep = app.add_subcommand("sweep", "Run every point of the config's sweep block");
  sweep->add_option("config", sweep_cfg, "Experiment config (JSON)")->required();
  add_run_flags(sweep, sweep_flags);

  std::vector<std::string> report_dirs;
  std::optional<std::string> report_out;
  auto* report = app.add_subcommand("report", "Join run directories into long-format tables");
  report->add_option("dirs", report_dirs, "Run or sweep directories");
  report->add_option("--out", report_out, "Output directory for the joined tables");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*run) {
      const auto cfg = load(run_cfg, run_flags);
      const auto outcome = dpfair::run_experiment(cfg, run_flags.jobs);
      std::cout << "wrote " << cfg.output << " (max xi " << dpfair::fmt(outcome.risk.max_xi())
                << ")\n";
      return 0;
    }
    if (*sweep) {
      const auto cfg = load(sweep_cfg, sweep_flags);
      const auto outcome = dpfair::run_sweep(cfg, sweep_flags.jobs);
      for (const auto& p : outcome.points) {
        if (!p.ok) std::cerr << "point " << p.point << " failed: " << p.message << '\n';
      }
      std::cout << "wrote " << cfg.output << " (" << outcome.succeeded() << "/"
                << outcome.points.size() << " points ok)\n";
      return outcome.succeeded() == 0 ? 1 : 0;
    }
    if (*report) {
      std::string out = report_out.value_or("");
      if (out.empty()) {
        const std::string root = env_root();
        out = (fs::path(root.empty() ? "." : root) / "report").string();
      }
      dpfair::write_report(report_dirs, out);
      std::cout << "wrote " << out << '\n';
      return 0;
    }
  } catch (const dpfair::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
