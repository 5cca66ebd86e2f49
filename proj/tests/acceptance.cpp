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

// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "dpfair/mitigate.hpp"
#include "dpfair/privacy.hpp"
#include "dpfair/risk.hpp"
#include "dpfair/train.hpp"
#include "test_util.hpp"

namespace {

using namespace dpfair;

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string format(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string format(const char* f, ...) {
  char buf[1024];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double std_error(const std::vector<double>& v) {
  const double mu = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - mu) * (x - mu);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

// 1. Output perturbation on a quadratic loss: the Monte-Carlo group risk
//    equals 1/2 Delta^2 sigma^2 Tr(H_a).
Verdict quadratic_output_perturbation() {
  const auto start = std::chrono::steady_clock::now();
  const auto ds = synth_two_group({1000, 1000, 10, 3.0, 1.0, 101});
  const double lambda = 0.01;
  OutputPerturbation mech(ds, Family::kLinearL2, 1, lambda, 1.0, 1e-5);
  const auto pred = predict_output_pert_gap(ds, mech.optimum(), mech.sensitivity(), mech.sigma(),
                                            lambda);
  const auto report = excessive_risk_mc(
      ds, mech.optimum(), [&](std::uint64_t s) { return mech.sample(s); }, 1000, 1);
  bool ok = !pred.optimality_warning;
  std::string detail;
  for (std::size_t g = 0; g < 2; ++g) {
    const double mc = report.groups[g].risk;
    const double want = pred.group_risk[g];
    const double tol = std::max(0.05 * std::abs(want), 3.0 * report.groups[g].mc_std_error);
    ok = ok && std::abs(mc - want) <= tol;
    detail += format("group %s: MC %.5g vs %.5g (|diff| %.3g, tol %.3g); ",
                     report.groups[g].name.c_str(), mc, want, std::abs(mc - want), tol);
  }
  const double t = seconds_since(start);
  ok = ok && t < 30.0;
  return {ok, detail + format("%.1f s", t)};
}

// 2. Per-group standardization equalizes input norms, which removes the gap
//    for output perturbation on the L2 loss.
Verdict group_normalization() {
  const auto start = std::chrono::steady_clock::now();
  const auto raw = synth_two_group({1000, 1000, 10, 3.0, 1.0, 102});
  auto max_gap = [](const GroupedDataset& ds) {
    OutputPerturbation mech(ds, Family::kLinearL2, 1, 0.01, 1.0, 1e-5);
    return excessive_risk_mc(ds, mech.optimum(),
                             [&](std::uint64_t s) { return mech.sample(s); }, 200, 2)
        .max_xi();
  };
  const double before = max_gap(raw);
  const double after = max_gap(standardize(raw, StandardizeScope::kPerGroup));
  const double t = seconds_since(start);
  const double ratio = before / after;
  return {ratio >= 5.0 && t < 60.0,
          format("max xi %.5g unnormalized, %.5g per-group standardized, ratio %.1f; %.1f s",
                 before, after, ratio, t)};
}

// Worst residual of the one-step decomposition against the mean group loss
// after `draws` real full-batch DP-SGD steps, over `iterations` iterations.
struct ResidualStats {
  double worst_in_se = 0.0;   // |residual| / MC standard error
  double worst_rel = 0.0;     // |residual| / |L(theta_t; D_a)|
};

ResidualStats decomposition_residuals(Model m, const GroupedDataset& ds,
                                      const DecompositionParams& p, int iterations, int draws,
                                      std::uint64_t seed) {
  Rng rng(seed);
  ResidualStats out;
  const auto all = ds.all_indices();
  for (int t = 0; t < iterations; ++t) {
    const auto rows = decompose_step(m, ds, p, rng);
    std::vector<std::vector<double>> after(rows.size());
    for (int d = 0; d < draws; ++d) {
      const Model next = dpsgd_step(m, ds, all, p.eta, p.clip_bound, p.sigma, rng);
      for (std::size_t g = 0; g < rows.size(); ++g) {
        after[g].push_back(loss_mean(next, ds, ds.group_indices(static_cast<int>(g))));
      }
    }
    for (std::size_t g = 0; g < rows.size(); ++g) {
      const double residual = std::abs(rows[g].predicted_loss() - mean_of(after[g]));
      out.worst_in_se = std::max(out.worst_in_se, residual / std_error(after[g]));
      out.worst_rel = std::max(out.worst_rel, residual / std::abs(rows[g].loss_group));
    }
    m = dpsgd_step(m, ds, all, p.eta, p.clip_bound, p.sigma, rng);
  }
  return out;
}

// 3. Nonprivate + clip + noise terms predict the expected group loss.
Verdict decomposition_residual() {
  const auto start = std::chrono::steady_clock::now();
  DecompositionParams lin;
  lin.eta = 0.01;
  lin.clip_bound = 0.5;
  lin.sigma = 5.0;
  const auto lin_ds = synth_two_group({100, 100, 10, 3.0, 1.0, 103});
  const auto a = decomposition_residuals(Model::zeros(Family::kLinearL2, 10), lin_ds, lin, 20,
                                         1000, 3);
  DecompositionParams soft;
  soft.eta = 1e-3;
  soft.clip_bound = 0.1;
  soft.sigma = 5.0;
  const auto soft_ds = synth_two_group({100, 100, 10, 3.0, 1.0, 104});
  const auto b = decomposition_residuals(Model::zeros(Family::kSoftmaxLinear, 10, 2), soft_ds,
                                         soft, 10, 1000, 4);
  const double t = seconds_since(start);
  return {a.worst_in_se <= 3.0 && b.worst_rel <= 0.01 && t < 120.0,
          format("linear_l2 worst residual %.2f SE over 20 iterations; softmax_linear worst "
                 "residual %.3g%% of loss over 10 iterations; %.1f s",
                 a.worst_in_se, 100.0 * b.worst_rel, t)};
}

// 4. Closed-form Hessian traces against finite-difference diagonals.
Verdict hessian_oracles() {
  struct Case {
    Family family;
    Activation act;
    double tol;
    const char* name;
  };
  const Case cases[] = {{Family::kLinearL2, Activation::kTanh, 1e-6, "linear_l2"},
                        {Family::kSoftmaxLinear, Activation::kTanh, 1e-4, "softmax_linear"},
                        {Family::kMlp1, Activation::kSigmoid, 1e-3, "mlp1/sigmoid"}};
  Rng rng(105);
  bool ok = true;
  std::string detail;
  for (const auto& c : cases) {
    double worst = 0.0;
    for (int state = 0; state < 50; ++state) {
      const auto m = testing::random_model(c.family, 4, 3, 5, rng, 0.5, c.act);
      const Eigen::VectorXd x = testing::gaussian_vector(4, rng);
      const double y = testing::random_label(m, rng);
      const double exact = sample_hessian_trace(m, x, y);
      const double fd = testing::fd_trace(m, x, y, 1e-2);
      worst = std::max(worst, std::abs(exact - fd) / std::max(std::abs(fd), 1e-8));
    }
    ok = ok && worst <= c.tol;
    detail += format("%s max rel err %.2g (tol %.0e); ", c.name, worst, c.tol);
  }
  return {ok, detail};
}

// 5. When the clipping condition holds with a positive margin, group a has
//    the larger clipping term.
Verdict clipping_direction() {
  int satisfied = 0;
  int agree = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(1000 + seed);
    GroupedDataset ds;
    const Index n = 60;
    ds.features.resize(n, 3);
    ds.labels.resize(n);
    for (Index i = 0; i < n; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const bool in_a = i % 2 == 0;
      ds.features.row(r) = testing::gaussian_vector(3, rng, 0.3).transpose();
      ds.features(r, 0) += 1.0;
      ds.labels[r] = in_a ? 5.0 + testing::gaussian_vector(1, rng, 0.5)[0] : 0.0;
      ds.groups.push_back(in_a ? 0 : 1);
    }
    ds.group_names = {"a", "b"};
    ds.num_classes = 0;
    DecompositionParams p;
    p.eta = 1e-3;
    p.clip_bound = 0.1;
    const auto rows = decompose_step(Model::zeros(Family::kLinearL2, 3), ds, p, rng);
    const auto check = check_clip_condition(rows[0].g_norm_group, rows[1].g_norm_group,
                                            ds.group_fraction(0), ds.group_fraction(1),
                                            p.clip_bound);
    if (!check.holds || !(check.margin > 0.0)) continue;
    ++satisfied;
    if (rows[0].clip > rows[1].clip) ++agree;
  }
  return {satisfied == 100 && agree >= 95,
          format("%d/100 constructions satisfy the condition, clip_a > clip_b in %d", satisfied,
                 agree)};
}

// 6. Noise-term ordering is the trace ordering; boundary score extremes on
//    the simplex.
Verdict noise_ordering_and_boundary() {
  Rng rng(106);
  int mismatches = 0;
  int states = 0;
  for (auto family : {Family::kLinearL2, Family::kSoftmaxLinear, Family::kMlp1}) {
    for (int t = 0; t < 100; ++t) {
      const auto m = testing::random_model(family, 4, 3, 5, rng);
      auto ds = testing::random_dataset(m, 20, rng);
      if (t % 10 == 0) {
        // Identical groups: equal traces must give equal noise terms.
        for (Index i = 10; i < 20; ++i) {
          ds.features.row(static_cast<Eigen::Index>(i)) =
              ds.features.row(static_cast<Eigen::Index>(i - 10));
          ds.labels[static_cast<Eigen::Index>(i)] = ds.labels[static_cast<Eigen::Index>(i - 10)];
        }
        for (Index i = 0; i < 20; ++i) ds.groups[i] = i < 10 ? 0 : 1;
      }
      const auto rows = decompose_step(m, ds, DecompositionParams{}, rng);
      const auto predicted = check_noise_ordering(rows[0].trace, rows[1].trace);
      const auto measured = rows[0].noise > rows[1].noise   ? Ordering::kGreater
                            : rows[0].noise < rows[1].noise ? Ordering::kLess
                                                            : Ordering::kEqual;
      ++states;
      if (predicted != measured) ++mismatches;
    }
  }
  bool grid_ok = true;
  std::string grid_detail;
  for (int k : {2, 3, 4}) {
    const double top = 1.0 - 1.0 / k;
    const double at_uniform = boundary_score(Eigen::VectorXd::Constant(k, 1.0 / k));
    double grid_max = -1.0;
    int zeros = 0;
    int zero_non_vertex = 0;
    const auto grid = testing::simplex_grid(k, 20);
    for (const auto& p : grid) {
      const double s = boundary_score(p);
      grid_max = std::max(grid_max, s);
      if (s < 0.0 || s > top + 1e-15) grid_ok = false;
      const bool vertex = p.maxCoeff() == 1.0;
      if (s == 0.0) {
        ++zeros;
        if (!vertex) ++zero_non_vertex;
      }
    }
    grid_ok = grid_ok && std::abs(at_uniform - top) <= 1e-15 && at_uniform >= grid_max &&
              zeros == k && zero_non_vertex == 0;
    grid_detail += format("K=%d: %zu points, max %.4f <= %.4f at uniform, %d zeros at vertices; ",
                          k, grid.size(), grid_max, at_uniform, zeros);
  }
  return {mismatches == 0 && grid_ok,
          format("%d/%d trace orderings match noise orderings; ", states - mismatches, states) +
              grid_detail};
}

// 7. Input norms drive gradient norms at initialization; the correlation
//    falls during training.
Verdict gradient_norm_correlation() {
  const auto ds = synth_two_group({300, 700, 10, 3.0, 1.0, 107});
  TrainConfig cfg;
  cfg.family = Family::kSoftmaxLinear;
  cfg.mechanism = Mechanism::kDpSgd;
  cfg.batch_scheme = BatchScheme::kFixed;
  cfg.batch_size = 32;
  cfg.learning_rate = 0.1;
  cfg.clip_bound = 0.1;
  cfg.sigma = 1.0;
  cfg.iterations = 2000;
  cfg.seed = 7;
  const auto norms = sample_series(ds, Model::zeros(Family::kSoftmaxLinear, 10, 2),
                                   Series::kInputNorm);
  std::vector<double> iters;
  std::vector<double> corr;
  auto record = [&](Index iter, const Model& m) {
    const auto r = pearson(norms, sample_series(ds, m, Series::kGradNorm));
    iters.push_back(static_cast<double>(iter));
    corr.push_back(r.value_or(std::nan("")));
  };
  record(0, initial_model(cfg, ds.dim()));
  TrainOptions opts;
  opts.on_step = [&](Index t, const Model& m, const IndexList&) {
    if ((t + 1) % 100 == 0) record(t + 1, m);
  };
  train(cfg, ds, opts);
  const auto trend = spearman(iters, corr);
  const bool ok = corr.front() >= 0.5 && trend.has_value() && *trend <= 0.0;
  return {ok, format("Pearson at theta_0 %.4f, at T=%zu %.4f; Spearman(iteration, corr) %.3f "
                     "over %zu checkpoints",
                     corr.front(), static_cast<std::size_t>(cfg.iterations), corr.back(),
                     trend.value_or(std::nan("")), corr.size())};
}

// 8. The penalty reduces the largest group gap under DP-SGD.
Verdict mitigation_direction() {
  const auto start = std::chrono::steady_clock::now();
  const auto ds = synth_two_group({100, 900, 10, 3.0, 1.0, 108});
  TrainConfig cfg;
  cfg.family = Family::kSoftmaxLinear;
  cfg.mechanism = Mechanism::kDpSgd;
  cfg.batch_scheme = BatchScheme::kFixed;
  cfg.batch_size = 32;
  cfg.learning_rate = 0.1;
  cfg.clip_bound = 0.1;
  cfg.sigma = 5.0;
  cfg.iterations = 500;
  const Index reps = 10;
  std::vector<double> plain;
  std::vector<double> mitigated;
  for (std::uint64_t s = 0; s < 20; ++s) {
    TrainConfig ref_cfg = cfg;
    ref_cfg.mechanism = Mechanism::kSgd;
    ref_cfg.seed = 5000 + s;
    const Model reference = train(ref_cfg, ds).model;
    auto gap = [&](const MitigationConfig& mc) {
      TrainOptions opts;
      opts.extra_gradient = penalty_extra_gradient(ds, cfg.clip_bound, mc);
      return excessive_risk_mc(
                 ds, reference,
                 [&](std::uint64_t seed) {
                   TrainConfig run = cfg;
                   run.seed = seed;
                   return train(run, ds, opts).model;
                 },
                 reps, 100000 + 100 * s)
          .max_xi();
    };
    MitigationConfig off;
    off.gamma1 = off.gamma2 = 0.0;
    plain.push_back(gap(off));
    mitigated.push_back(gap(MitigationConfig{}));
  }
  std::vector<double> diff;
  int improved = 0;
  for (std::size_t i = 0; i < plain.size(); ++i) {
    diff.push_back(plain[i] - mitigated[i]);
    if (mitigated[i] < plain[i]) ++improved;
  }
  const double m0 = median(plain);
  const double m1 = median(mitigated);
  const double mu = mean_of(diff);
  double ss = 0.0;
  for (double d : diff) ss += (d - mu) * (d - mu);
  const double sd = std::sqrt(ss / static_cast<double>(diff.size() - 1));
  const double t = seconds_since(start);
  return {m1 < m0 && t < 600.0,
          format("median max xi %.5g (gamma=0) vs %.5g (gamma=1), relative change %+.1f%%; "
                 "median paired reduction %.3g, paired Cohen's d %.2f, %d/20 seeds improved; "
                 "%.1f s",
                 m0, m1, 100.0 * (m1 - m0) / m0, median(diff), sd > 0.0 ? mu / sd : 0.0,
                 improved, t)};
}

// 9. Clipping, calibration, accounting and the DP-SGD/SGD reduction.
Verdict privacy_plumbing() {
  Rng rng(109);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  int clip_violations = 0;
  for (int i = 0; i < 10000; ++i) {
    const double bound = std::pow(10.0, -3.0 + 4.0 * unit(rng));
    const Eigen::VectorXd v =
        testing::gaussian_vector(1 + i % 20, rng, std::pow(10.0, -3.0 + 6.0 * unit(rng)));
    if (clip(v, bound).norm() > bound) ++clip_violations;
  }
  int calib_violations = 0;
  for (int i = 0; i < 20; ++i) {
    const double eps = 0.02 + 0.049 * i;
    const double delta = std::pow(10.0, -8.0 + 5.0 * (i % 5) / 4.0);
    if (calibrate_sigma(eps, delta, 1.0) > classical_sigma(eps, delta)) ++calib_violations;
  }
  const std::vector<double> sigmas{0.7, 1.0, 2.0, 4.0, 8.0};
  const std::vector<std::uint64_t> steps{10, 100, 1000, 5000, 20000};
  int order_violations = 0;
  const auto orders = default_rdp_orders();
  std::vector<std::vector<double>> eps(sigmas.size(), std::vector<double>(steps.size()));
  for (std::size_t a = 0; a < sigmas.size(); ++a) {
    const auto rdp = rdp_subsampled_gaussian(0.01, sigmas[a], orders);
    for (std::size_t b = 0; b < steps.size(); ++b) {
      eps[a][b] = rdp_to_eps(orders, rdp, 1e-5, steps[b]).epsilon;
    }
  }
  for (std::size_t a = 0; a < sigmas.size(); ++a) {
    for (std::size_t b = 0; b < steps.size(); ++b) {
      if (b > 0 && !(eps[a][b] >= eps[a][b - 1])) ++order_violations;
      if (a > 0 && !(eps[a][b] <= eps[a - 1][b])) ++order_violations;
    }
  }
  const auto ds = synth_two_group({200, 200, 6, 2.0, 1.0, 110});
  bool identical = true;
  for (auto family : {Family::kLinearL2, Family::kSoftmaxLinear, Family::kMlp1}) {
    TrainConfig priv;
    priv.family = family;
    priv.learning_rate = 0.01;
    priv.iterations = 200;
    priv.q = 0.05;
    priv.sigma = 0.0;
    priv.clip_bound = 1e9;
    TrainConfig plain = priv;
    plain.mechanism = Mechanism::kSgd;
    identical = identical && train(priv, ds).model.params == train(plain, ds).model.params;
  }
  return {clip_violations == 0 && calib_violations == 0 && order_violations == 0 && identical,
          format("clip norm violations %d/10000; analytic sigma above classical bound in %d/20; "
                 "accountant monotonicity violations %d on 5x5 grid; DP-SGD(sigma=0, C=1e9) "
                 "bit-identical to SGD: %s",
                 clip_violations, calib_violations, order_violations, identical ? "yes" : "no")};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"quadratic output perturbation risk", quadratic_output_perturbation},
      {"group normalization removes the gap", group_normalization},
      {"one-step decomposition residual", decomposition_residual},
      {"Hessian trace oracles", hessian_oracles},
      {"clipping condition direction", clipping_direction},
      {"noise ordering and boundary extremes", noise_ordering_and_boundary},
      {"input/gradient norm correlation", gradient_norm_correlation},
      {"mitigation reduces the gap", mitigation_direction},
      {"privacy plumbing", privacy_plumbing},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    if (!v.pass) ++failed;
    std::printf("[%s] %zu. %s: %s\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first,
                v.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed;
}
