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

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dpfair/data.hpp"
#include "dpfair/errors.hpp"
#include "dpfair/model.hpp"
#include "dpfair/privacy.hpp"
#include "dpfair/train.hpp"

namespace dpfair {

enum class Surrogate { kTrace, kBoundaryScore };

inline const char* to_string(Surrogate s) {
  return s == Surrogate::kTrace ? "trace" : "boundary_score";
}

inline Surrogate parse_surrogate(const std::string& s) {
  if (s == "trace") return Surrogate::kTrace;
  if (s == "boundary_score") return Surrogate::kBoundaryScore;
  throw ConfigError("mitigation.surrogate", "unknown surrogate '" + s + "'");
}

struct MitigationConfig {
  double gamma1 = 1.0;  // clip alignment
  double gamma2 = 1.0;  // boundary score or trace
  Surrogate surrogate = Surrogate::kBoundaryScore;

  bool active() const { return gamma1 != 0.0 || gamma2 != 0.0; }

  void validate() const {
    if (!(gamma1 >= 0.0)) throw ConfigError("mitigation.gamma1", "must be >= 0");
    if (!(gamma2 >= 0.0)) throw ConfigError("mitigation.gamma2", "must be >= 0");
  }
};

struct PenaltyValue {
  double total = 0.0;
  double clip_part = 0.0;   // sum of the gamma1 terms
  double noise_part = 0.0;  // sum of the gamma2 terms
  std::vector<double> group_clip;
  std::vector<double> group_noise;
  bool single_group = false;
};

namespace detail {

struct PenaltyStats {
  Eigen::VectorXd g_pop;
  Eigen::VectorXd clip_gap;  // c = g_D - gbar_D
  std::vector<IndexList> members;
};

inline PenaltyStats penalty_stats(const Model& m, const GroupedDataset& ds, double bound) {
  PenaltyStats st;
  const auto all = ds.all_indices();
  const auto grads = per_sample_grad(m, ds, all);
  st.g_pop = grads.per_sample.colwise().mean().transpose();
  Eigen::VectorXd gbar = Eigen::VectorXd::Zero(st.g_pop.size());
  for (Eigen::Index i = 0; i < grads.per_sample.rows(); ++i) {
    gbar += clip(grads.per_sample.row(i).transpose(), bound);
  }
  gbar /= static_cast<double>(ds.size());
  st.clip_gap = st.g_pop - gbar;
  for (int a = 0; a < ds.num_groups(); ++a) st.members.push_back(ds.group_indices(a));
  return st;
}

// Subset mean of the second surrogate statistic: boundary score or trace.
inline double surrogate_stat(const Model& m, const GroupedDataset& ds, const IndexList& subset,
                             Surrogate s) {
  if (s == Surrogate::kTrace) return hessian_trace(m, ds, subset);
  return boundary_score(m, ds, subset).mean;
}

inline Eigen::VectorXd trace_grad(const Model& m, const GroupedDataset& ds,
                                  const IndexList& subset) {
  const auto p = static_cast<Eigen::Index>(m.num_params());
  switch (m.family) {
    case Family::kLinearL2:
      return Eigen::VectorXd::Zero(p);
    case Family::kSoftmaxLinear: {
      // Tr = ||x||^2 s(x); reuse the boundary score chain rule per sample.
      Eigen::VectorXd g = Eigen::VectorXd::Zero(p);
      for (Index i : subset) {
        const Eigen::VectorXd x = row(ds, i);
        const auto pass = run(m, x);
        const double sq = pass.probs.squaredNorm();
        const Eigen::VectorXd dz =
            (-2.0 * x.squaredNorm() * pass.probs.array() * (pass.probs.array() - sq)).matrix();
        g += backprop(m, x, pass, dz);
      }
      return g / static_cast<double>(subset.size());
    }
    case Family::kMlp1: {
      Eigen::VectorXd g(p);
      const double h = 1e-5 * std::max(1.0, m.params.norm());
      Model probe = m;
      for (Eigen::Index k = 0; k < p; ++k) {
        probe.params[k] = m.params[k] + h;
        const double up = hessian_trace(probe, ds, subset);
        probe.params[k] = m.params[k] - h;
        const double down = hessian_trace(probe, ds, subset);
        probe.params[k] = m.params[k];
        g[k] = (up - down) / (2.0 * h);
      }
      return g;
    }
  }
  return Eigen::VectorXd::Zero(p);
}

inline Eigen::VectorXd surrogate_grad(const Model& m, const GroupedDataset& ds,
                                      const IndexList& subset, Surrogate s) {
  if (s == Surrogate::kTrace) return trace_grad(m, ds, subset);
  return boundary_score_grad(m, ds, subset);
}

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline void check_penalty_args(const Model& m, double bound, const MitigationConfig& cfg) {
  cfg.validate();
  if (!(bound > 0.0)) throw DomainError("clip bound must be positive");
  if (cfg.gamma2 != 0.0 && cfg.surrogate == Surrogate::kBoundaryScore && !m.is_classifier()) {
    throw UnsupportedError("boundary score surrogate needs a classifier family");
  }
}

}  // namespace detail

// sum_a gamma1 |<g_a - g_D, g_D - gbar_D>| + gamma2 |s_a - s_D|, with s the
// mean boundary score (or the Hessian trace under the trace surrogate).
inline PenaltyValue penalty_value(const Model& m, const GroupedDataset& ds, double bound,
                                  const MitigationConfig& cfg) {
  detail::check_penalty_args(m, bound, cfg);
  PenaltyValue out;
  if (ds.num_groups() < 2) {
    out.single_group = true;
    return out;
  }
  if (!cfg.active()) {
    out.group_clip.assign(static_cast<std::size_t>(ds.num_groups()), 0.0);
    out.group_noise = out.group_clip;
    return out;
  }
  const auto st = detail::penalty_stats(m, ds, bound);
  const double s_pop =
      cfg.gamma2 != 0.0 ? detail::surrogate_stat(m, ds, ds.all_indices(), cfg.surrogate) : 0.0;
  for (const auto& members : st.members) {
    double clip_term = 0.0;
    double noise_term = 0.0;
    if (cfg.gamma1 != 0.0) {
      const Eigen::VectorXd g_a = mean_grad(m, ds, members);
      clip_term = cfg.gamma1 * std::abs((g_a - st.g_pop).dot(st.clip_gap));
    }
    if (cfg.gamma2 != 0.0) {
      noise_term =
          cfg.gamma2 * std::abs(detail::surrogate_stat(m, ds, members, cfg.surrogate) - s_pop);
    }
    out.group_clip.push_back(clip_term);
    out.group_noise.push_back(noise_term);
    out.clip_part += clip_term;
    out.noise_part += noise_term;
  }
  out.total = out.clip_part + out.noise_part;
  return out;
}

// Subgradient of penalty_value. The clipped average inside c = g_D - gbar_D
// is held fixed, so the gamma1 term contributes sign(.) (H_a - H) c.
inline Eigen::VectorXd penalty_grad(const Model& m, const GroupedDataset& ds, double bound,
                                    const MitigationConfig& cfg) {
  detail::check_penalty_args(m, bound, cfg);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.num_params()));
  if (ds.num_groups() < 2 || !cfg.active()) return grad;
  const auto st = detail::penalty_stats(m, ds, bound);
  const auto all = ds.all_indices();

  if (cfg.gamma1 != 0.0) {
    const Eigen::VectorXd h_pop_c = hvp(m, ds, all, st.clip_gap);
    for (const auto& members : st.members) {
      const double inner = (mean_grad(m, ds, members) - st.g_pop).dot(st.clip_gap);
      const double sg = detail::sign(inner);
      if (sg == 0.0) continue;
      grad += cfg.gamma1 * sg * (hvp(m, ds, members, st.clip_gap) - h_pop_c);
    }
  }
  if (cfg.gamma2 != 0.0) {
    const double s_pop = detail::surrogate_stat(m, ds, all, cfg.surrogate);
    const Eigen::VectorXd ds_pop = detail::surrogate_grad(m, ds, all, cfg.surrogate);
    for (const auto& members : st.members) {
      const double sg =
          detail::sign(detail::surrogate_stat(m, ds, members, cfg.surrogate) - s_pop);
      if (sg == 0.0) continue;
      grad += cfg.gamma2 * sg * (detail::surrogate_grad(m, ds, members, cfg.surrogate) - ds_pop);
    }
  }
  return grad;
}

// DP-SGD step on the penalized objective: the private batch gradient plus
// the (non-private, full-data) penalty gradient. With both multipliers at
// zero this is dpsgd_step.
inline Model mitigated_dpsgd_step(const Model& m, const GroupedDataset& ds,
                                  const IndexList& batch, double eta, double bound, double sigma,
                                  const MitigationConfig& cfg, Rng& rng) {
  cfg.validate();
  if (!cfg.active()) return dpsgd_step(m, ds, batch, eta, bound, sigma, rng);
  if (batch.empty()) return m;
  if (!(sigma >= 0.0)) throw DomainError("sigma must be non-negative");
  Eigen::VectorXd g = detail::private_batch_grad(m, ds, batch, bound, sigma, rng);
  g += penalty_grad(m, ds, bound, cfg);
  Model out = m;
  out.params -= eta * g;
  return out;
}

// Hook for train(): empty when the penalty is inactive, so the run takes
// the plain DP-SGD path.
inline ExtraGradient penalty_extra_gradient(const GroupedDataset& ds, double bound,
                                            const MitigationConfig& cfg) {
  cfg.validate();
  if (!cfg.active()) return {};
  return [&ds, bound, cfg](const Model& current) { return penalty_grad(current, ds, bound, cfg); };
}

}  // namespace dpfair
