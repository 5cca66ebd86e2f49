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

// DP-SGD on a two-group synthetic task with the per-iteration decomposition
// of each group's expected loss printed every 50 steps.

#include <cstdio>

#include "dpfair/risk.hpp"
#include "dpfair/train.hpp"

int main() {
  using namespace dpfair;
  const auto ds = synth_two_group({200, 800, 10, 3.0, 1.0, 11});
  TrainConfig cfg;
  cfg.family = Family::kSoftmaxLinear;
  cfg.batch_scheme = BatchScheme::kFixed;
  cfg.learning_rate = 0.05;
  cfg.iterations = 300;

  DecompositionParams params;
  params.eta = cfg.learning_rate;
  params.clip_bound = cfg.clip_bound;
  params.sigma = cfg.sigma;
  params.mode = DecompositionMode::minibatch_mc(16);
  params.scheme = cfg.batch_scheme;
  params.batch_size = cfg.batch_size;
  Rng rng(99);

  std::printf("%-6s %-6s %-12s %-12s %-12s %-10s %-10s\n", "iter", "group", "nonprivate", "clip",
              "noise", "|g_a|", "trace");
  TrainOptions opts;
  opts.on_step = [&](Index t, const Model& m, const IndexList&) {
    if (t % 50 != 0) return;
    for (const auto& row : decompose_step(m, ds, params, rng)) {
      std::printf("%-6zu %-6s %-12.5g %-12.3g %-12.3g %-10.4g %-10.4g\n",
                  static_cast<std::size_t>(t), row.group_name.c_str(), row.nonprivate, row.clip,
                  row.noise, row.g_norm_group, row.trace);
    }
  };
  const auto result = train(cfg, ds, opts);
  std::printf("epsilon spent after %zu steps: %.3f (delta %.0e)\n",
              static_cast<std::size_t>(cfg.iterations), result.accountant_log.back().epsilon,
              cfg.delta);
  return 0;
}
