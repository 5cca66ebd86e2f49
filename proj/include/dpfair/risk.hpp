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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dpfair/data.hpp"
#include "dpfair/errors.hpp"
#include "dpfair/model.hpp"
#include "dpfair/parallel.hpp"
#include "dpfair/privacy.hpp"
#include "dpfair/train.hpp"

namespace dpfair {

// ---------------------------------------------------------------------------
// Excessive risk

inline constexpr int kPopulation = -1;

struct GroupRisk {
  int group = kPopulation;
  std::string name = "population";
  double risk = 0.0;               // R_a = E[L(private; D_a)] - L(reference; D_a)
  double xi = 0.0;                 // |R_a - R|
  double loss_private_mean = 0.0;
  double loss_nonprivate = 0.0;
  Index mc_runs = 0;
  double mc_std_error = 0.0;       // sample std / sqrt(runs) of the private loss
  bool std_error_defined = false;  // false when mc_runs == 1
};

struct RiskReport {
  GroupRisk population;
  std::vector<GroupRisk> groups;
  Index excluded_runs = 0;

  double max_xi() const {
    double m = 0.0;
    for (const auto& g : groups) m = std::max(m, g.xi);
    return m;
  }
};

inline constexpr const char* kRiskCsvHeader = "group,R,xi,mc_runs,stderr";

// Produces the private parameters for one repetition from its seed.
using PrivateMechanism = std::function<Model(std::uint64_t seed)>;

// Monte-Carlo estimate of the population and per-group excessive risk over
// `reps` runs with seeds seed, seed+1, ... Runs whose private loss is not
// finite are excluded; more than 20% exclusions is an error.
inline RiskReport excessive_risk_mc(const GroupedDataset& ds, const Model& reference,
                                    const PrivateMechanism& mechanism, Index reps,
                                    std::uint64_t seed, unsigned jobs = 1) {
  if (reps < 1) throw DomainError("reps must be >= 1");
  const int groups = ds.num_groups();
  std::vector<IndexList> subsets;
  subsets.push_back(ds.all_indices());
  for (int g = 0; g < groups; ++g) subsets.push_back(ds.group_indices(g));

  // losses[r][s]: private loss of run r on subset s (0 = population).
  std::vector<std::vector<double>> losses(reps);
  parallel_for(reps, jobs, [&](std::size_t r) {
    std::vector<double> row(subsets.size(), std::numeric_limits<double>::quiet_NaN());
    try {
      const Model priv = mechanism(seed + r);
      for (std::size_t s = 0; s < subsets.size(); ++s) {
        row[s] = loss_mean(priv, ds, subsets[s]);
      }
    } catch (const NumericalError&) {
      // counted as an excluded run below
    }
    losses[r] = std::move(row);
  });

  std::vector<std::size_t> kept;
  for (std::size_t r = 0; r < reps; ++r) {
    const auto& row = losses[r];
    if (std::all_of(row.begin(), row.end(), [](double v) { return std::isfinite(v); })) {
      kept.push_back(r);
    }
  }
  RiskReport report;
  report.excluded_runs = reps - kept.size();
  if (kept.empty() || 5 * report.excluded_runs > reps) {
    throw NumericalError(std::to_string(report.excluded_runs) + " of " +
                         std::to_string(reps) + " runs produced non-finite losses");
  }

  auto summarize = [&](std::size_t s) {
    GroupRisk gr;
    // Shifted by the first run so identical runs reproduce their loss exactly.
    const double first = losses[kept.front()][s];
    double shift = 0.0;
    for (auto r : kept) shift += losses[r][s] - first;
    const double mean = first + shift / static_cast<double>(kept.size());
    double ss = 0.0;
    for (auto r : kept) ss += (losses[r][s] - mean) * (losses[r][s] - mean);
    gr.mc_runs = kept.size();
    gr.std_error_defined = kept.size() > 1;
    gr.mc_std_error = gr.std_error_defined
                          ? std::sqrt(ss / static_cast<double>(kept.size() - 1)) /
                                std::sqrt(static_cast<double>(kept.size()))
                          : 0.0;
    gr.loss_private_mean = mean;
    gr.loss_nonprivate = loss_mean(reference, ds, subsets[s]);
    gr.risk = gr.loss_private_mean - gr.loss_nonprivate;
    return gr;
  };
  report.population = summarize(0);
  for (int g = 0; g < groups; ++g) {
    auto gr = summarize(static_cast<std::size_t>(g) + 1);
    gr.group = g;
    gr.name = ds.group_names[static_cast<std::size_t>(g)];
    gr.xi = std::abs(gr.risk - report.population.risk);
    report.groups.push_back(gr);
  }
  return report;
}

// ---------------------------------------------------------------------------
// One-step decomposition of the expected group loss under DP-SGD

struct DecompositionParams {
  double eta = 1e-4;
  double clip_bound = 0.1;
  double sigma = 5.0;
  DecompositionMode mode = DecompositionMode::full_batch();
  BatchScheme scheme = BatchScheme::kPoisson;
  double q = 0.01;
  Index batch_size = 32;
};

// Per-group terms for one iteration. The three terms sum to the second-order
// prediction of E[L(theta_{t+1}; D_a)]:
//
//   nonprivate = L(theta_t; D_a) - eta <g_a, g_D> + eta^2/2 E[g_B^T H_a g_B]
//   clip       = eta (<g_a, g_D> - <g_a, gbar_D>)
//              + eta^2/2 (E[gbar_B^T H_a gbar_B] - E[g_B^T H_a g_B])
//   noise      = eta^2/2 Tr(H_a) C^2 sigma_effective^2
//
// sigma_effective^2 = sigma^2 E[1/|B|^2]: the update divides the noisy sum by
// the realized batch size, so the per-coordinate noise on the averaged
// gradient has std C sigma / |B|.
struct DecompositionRow {
  Index iter = 0;
  int group = 0;
  std::string group_name;
  double nonprivate = 0.0;
  double clip = 0.0;
  double noise = 0.0;
  double loss_group = 0.0;
  double g_norm_group = 0.0;
  double g_norm_pop = 0.0;
  double gbar_norm_pop = 0.0;
  double trace = 0.0;
  double boundary_mean = std::numeric_limits<double>::quiet_NaN();
  double inner_g_gD = 0.0;     // <g_{D_a}, g_D>
  double inner_g_gbarD = 0.0;  // <g_{D_a}, gbar_D>
  double quad_g = 0.0;         // E[g_B^T H_a g_B]
  double quad_gbar = 0.0;      // E[gbar_B^T H_a gbar_B]
  double eta = 0.0;
  double clip_bound = 0.0;
  double sigma_effective = 0.0;
  bool skipped = false;

  double predicted_loss() const { return nonprivate + clip + noise; }
};

inline constexpr const char* kDecompositionCsvHeader =
    "iter,group,nonprivate,clip,noise,g_norm_group,g_norm_pop,trace,boundary_mean,eps_so_far";

inline std::vector<DecompositionRow> decompose_step(const Model& m, const GroupedDataset& ds,
                                                    const DecompositionParams& params,
                                                    Rng& rng) {
  if (!params.mode.enabled()) throw DomainError("decomposition mode is off");
  if (!(params.clip_bound > 0.0)) throw DomainError("clip bound must be positive");
  const auto all = ds.all_indices();
  const auto grads = per_sample_grad(m, ds, all);
  Eigen::MatrixXd clipped = grads.per_sample;
  for (Eigen::Index i = 0; i < clipped.rows(); ++i) {
    const double norm = clipped.row(i).norm();
    if (norm > params.clip_bound) clipped.row(i) *= params.clip_bound / norm;
  }
  const Eigen::VectorXd g_pop = grads.per_sample.colwise().mean().transpose();
  const Eigen::VectorXd gbar_pop = clipped.colwise().mean().transpose();

  // Batch means whose quadratic forms are averaged.
  std::vector<Eigen::VectorXd> batch_g;
  std::vector<Eigen::VectorXd> batch_gbar;
  double inv_batch_sq = 0.0;
  if (params.mode.kind == DecompositionMode::Kind::kFullBatch) {
    batch_g.push_back(g_pop);
    batch_gbar.push_back(gbar_pop);
    inv_batch_sq = 1.0 / (static_cast<double>(ds.size()) * static_cast<double>(ds.size()));
  } else {
    if (params.mode.batches < 1) throw DomainError("minibatch_mc needs M >= 1");
    int drawn = 0;
    for (int attempt = 0; drawn < params.mode.batches && attempt < 100 * params.mode.batches;
         ++attempt) {
      const IndexList b = params.scheme == BatchScheme::kPoisson
                              ? poisson_batch(ds.size(), params.q, rng)
                              : fixed_batch(ds.size(), params.batch_size, rng);
      if (b.empty()) continue;
      Eigen::VectorXd g = Eigen::VectorXd::Zero(g_pop.size());
      Eigen::VectorXd gb = Eigen::VectorXd::Zero(g_pop.size());
      for (Index i : b) {
        g += grads.per_sample.row(static_cast<Eigen::Index>(i)).transpose();
        gb += clipped.row(static_cast<Eigen::Index>(i)).transpose();
      }
      const double size = static_cast<double>(b.size());
      batch_g.push_back(g / size);
      batch_gbar.push_back(gb / size);
      inv_batch_sq += 1.0 / (size * size);
      ++drawn;
    }
    if (drawn == 0) throw NumericalError("minibatch_mc drew only empty batches");
    inv_batch_sq /= drawn;
  }
  const double sigma_eff = params.sigma * std::sqrt(inv_batch_sq);
  const double eta = params.eta;

  std::vector<DecompositionRow> rows;
  for (int a = 0; a < ds.num_groups(); ++a) {
    DecompositionRow row;
    row.group = a;
    row.group_name = ds.group_names[static_cast<std::size_t>(a)];
    row.eta = eta;
    row.clip_bound = params.clip_bound;
    row.sigma_effective = sigma_eff;
    row.g_norm_pop = g_pop.norm();
    row.gbar_norm_pop = gbar_pop.norm();
    const auto members = ds.group_indices(a);
    if (members.empty()) {
      row.skipped = true;
      rows.push_back(row);
      continue;
    }
    Eigen::VectorXd g_a = Eigen::VectorXd::Zero(g_pop.size());
    for (Index i : members) g_a += grads.per_sample.row(static_cast<Eigen::Index>(i)).transpose();
    g_a /= static_cast<double>(members.size());

    row.loss_group = loss_mean(m, ds, members);
    row.g_norm_group = g_a.norm();
    row.trace = hessian_trace(m, ds, members);
    if (m.is_classifier()) row.boundary_mean = boundary_score(m, ds, members).mean;
    row.inner_g_gD = g_a.dot(g_pop);
    row.inner_g_gbarD = g_a.dot(gbar_pop);
    for (std::size_t b = 0; b < batch_g.size(); ++b) {
      row.quad_g += batch_g[b].dot(hvp(m, ds, members, batch_g[b]));
      row.quad_gbar += batch_gbar[b].dot(hvp(m, ds, members, batch_gbar[b]));
    }
    row.quad_g /= static_cast<double>(batch_g.size());
    row.quad_gbar /= static_cast<double>(batch_g.size());

    row.nonprivate = row.loss_group - eta * row.inner_g_gD + 0.5 * eta * eta * row.quad_g;
    row.clip = eta * (row.inner_g_gD - row.inner_g_gbarD) +
               0.5 * eta * eta * (row.quad_gbar - row.quad_g);
    row.noise = 0.5 * eta * eta * row.trace * params.clip_bound * params.clip_bound *
                sigma_eff * sigma_eff;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Sufficient conditions for group orderings

struct Thm3Check {
  bool holds = false;
  double margin = 0.0;  // LHS - RHS
};

// Clipping ordering condition: group a has the larger clipping term when
//   ||g_a|| (p_a - p_a^2/2) >= 5/2 C + ||g_b|| (1 + p_b + p_b^2/2).
inline Thm3Check check_clip_condition(double g_norm_a, double g_norm_b, double p_a,
                                      double p_b, double clip_bound) {
  if (std::abs(p_a + p_b - 1.0) > 1e-9) throw DomainError("p_a + p_b must equal 1");
  if (g_norm_a < 0.0 || g_norm_b < 0.0) throw DomainError("norms must be non-negative");
  if (clip_bound < 0.0) throw DomainError("clip bound must be non-negative");
  const double lhs = g_norm_a * (p_a - 0.5 * p_a * p_a);
  const double rhs = 2.5 * clip_bound + g_norm_b * (1.0 + p_b + 0.5 * p_b * p_b);
  return {lhs >= rhs, lhs - rhs};
}

enum class Ordering { kLess = -1, kEqual = 0, kGreater = 1 };

// The noise term is eta^2/2 Tr(H_a) C^2 sigma^2, so its group ordering is
// the trace ordering.
inline Ordering check_noise_ordering(double trace_a, double trace_b) {
  if (!std::isfinite(trace_a) || !std::isfinite(trace_b)) {
    throw DomainError("traces must be finite");
  }
  if (trace_a > trace_b) return Ordering::kGreater;
  if (trace_a < trace_b) return Ordering::kLess;
  return Ordering::kEqual;
}

// ---------------------------------------------------------------------------
// Output perturbation gap prediction

struct GapPrediction {
  double population_risk = 0.0;
  std::vector<double> group_risk;
  std::vector<double> xi;
  std::vector<double> group_trace;
  double population_trace = 0.0;
  double objective_grad_norm = 0.0;
  bool optimality_warning = false;
};

// xi_a ~= 1/2 Delta^2 sigma^2 |Tr(H_a) - Tr(H)| at the (regularized) optimum.
// `lambda` is the regularization the optimum was computed with; the warning
// flag is raised when ||grad L + lambda theta|| > 1e-6.
inline GapPrediction predict_output_pert_gap(const GroupedDataset& ds, const Model& optimum,
                                             double sensitivity, double sigma,
                                             double lambda = 0.0) {
  GapPrediction out;
  const auto all = ds.all_indices();
  out.objective_grad_norm = (mean_grad(optimum, ds, all) + lambda * optimum.params).norm();
  out.optimality_warning = out.objective_grad_norm > 1e-6;
  const double scale = 0.5 * sensitivity * sensitivity * sigma * sigma;
  out.population_trace = hessian_trace(optimum, ds, all);
  out.population_risk = scale * out.population_trace;
  for (int g = 0; g < ds.num_groups(); ++g) {
    const double tr = hessian_trace(optimum, ds, ds.group_indices(g));
    out.group_trace.push_back(tr);
    out.group_risk.push_back(scale * tr);
    out.xi.push_back(scale * std::abs(tr - out.population_trace));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Correlation analytics

inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ShapeError("series lengths differ");
  const auto n = static_cast<double>(x.size());
  if (x.size() < 2) return std::nullopt;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

// Average ranks, ties share the mean rank.
inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(ranks(x), ranks(y));
}

enum class Series { kInputNorm, kGradNorm, kTrace, kBoundary, kExcessRisk };

inline const char* to_string(Series s) {
  switch (s) {
    case Series::kInputNorm: return "input_norm";
    case Series::kGradNorm: return "grad_norm";
    case Series::kTrace: return "trace";
    case Series::kBoundary: return "boundary";
    case Series::kExcessRisk: return "excess_risk";
  }
  return "?";
}

struct CorrelationRow {
  Series x = Series::kInputNorm;
  Series y = Series::kGradNorm;
  std::string scope;  // group name or "pooled"
  Index n = 0;
  std::optional<double> pearson;
  std::optional<double> spearman;
};

// Per-sample series for `m` on every row of `ds`. kExcessRisk needs
// `excess_risk` (one value per row, e.g. private minus reference loss).
inline std::vector<double> sample_series(const GroupedDataset& ds, const Model& m, Series s,
                                         const std::vector<double>* excess_risk = nullptr) {
  std::vector<double> out(ds.size());
  for (Index i = 0; i < ds.size(); ++i) {
    const Eigen::VectorXd x = detail::row(ds, i);
    const double y = detail::label(ds, i);
    switch (s) {
      case Series::kInputNorm: out[i] = x.norm(); break;
      case Series::kGradNorm: out[i] = sample_grad(m, x, y).norm(); break;
      case Series::kTrace: out[i] = sample_hessian_trace(m, x, y); break;
      case Series::kBoundary: out[i] = boundary_score(forward(m, x)); break;
      case Series::kExcessRisk:
        if (!excess_risk || excess_risk->size() != ds.size()) {
          throw ShapeError("excess_risk series needs one value per sample");
        }
        out[i] = (*excess_risk)[i];
        break;
    }
  }
  return out;
}

inline std::vector<CorrelationRow> correlations(
    const GroupedDataset& ds, const Model& m, const std::vector<std::pair<Series, Series>>& pairs,
    const std::vector<double>* excess_risk = nullptr) {
  for (int g = 0; g < ds.num_groups(); ++g) {
    if (ds.group_indices(g).size() < 3) {
      throw DomainError("correlations need >= 3 samples per group");
    }
  }
  std::vector<CorrelationRow> out;
  for (const auto& [sx, sy] : pairs) {
    const auto xs = sample_series(ds, m, sx, excess_risk);
    const auto ys = sample_series(ds, m, sy, excess_risk);
    auto emit = [&](const std::string& scope, const IndexList& rows) {
      std::vector<double> a, b;
      for (Index i : rows) {
        a.push_back(xs[i]);
        b.push_back(ys[i]);
      }
      out.push_back({sx, sy, scope, rows.size(), pearson(a, b), spearman(a, b)});
    };
    for (int g = 0; g < ds.num_groups(); ++g) {
      emit(ds.group_names[static_cast<std::size_t>(g)], ds.group_indices(g));
    }
    emit("pooled", ds.all_indices());
  }
  return out;
}

}  // namespace dpfair
