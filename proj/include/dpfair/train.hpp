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
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dpfair/data.hpp"
#include "dpfair/errors.hpp"
#include "dpfair/model.hpp"
#include "dpfair/privacy.hpp"

namespace dpfair {

enum class Mechanism { kSgd, kDpSgd, kOutputPerturbation };
enum class BatchScheme { kPoisson, kFixed };

// How the batch expectations of the step decomposition are estimated.
struct DecompositionMode {
  enum class Kind { kOff, kFullBatch, kMinibatchMc } kind = Kind::kOff;
  int batches = 16;  // M, for kMinibatchMc

  static DecompositionMode off() { return {}; }
  static DecompositionMode full_batch() { return {Kind::kFullBatch, 0}; }
  static DecompositionMode minibatch_mc(int m) { return {Kind::kMinibatchMc, m}; }
  bool enabled() const { return kind != Kind::kOff; }
};

struct TrainConfig {
  Family family = Family::kSoftmaxLinear;
  Index classes = 2;
  Index hidden = 16;
  Activation activation = Activation::kTanh;
  double init_scale = 0.1;  // mlp1 only; other families start at zero

  Mechanism mechanism = Mechanism::kDpSgd;
  double learning_rate = 1e-4;
  Index iterations = 100;
  BatchScheme batch_scheme = BatchScheme::kPoisson;
  double q = 0.01;
  Index batch_size = 32;
  std::uint64_t seed = 0;

  double clip_bound = 0.1;
  double sigma = 5.0;
  double delta = 1e-5;

  double lambda = 1.0;  // output perturbation only
  DecompositionMode decomposition;
  Index trace_every = 1;

  void validate() const {
    if (!(learning_rate > 0.0)) throw DomainError("learning rate must be positive");
    if (iterations < 1) throw DomainError("iterations must be >= 1");
    if (mechanism == Mechanism::kOutputPerturbation && !(lambda > 0.0)) {
      throw DomainError("output perturbation needs lambda > 0");
    }
    if (mechanism == Mechanism::kDpSgd) {
      if (!(clip_bound > 0.0)) throw DomainError("clip bound must be positive");
      if (!(sigma >= 0.0)) throw DomainError("sigma must be non-negative");
    }
    if (batch_scheme == BatchScheme::kPoisson && !(q >= 0.0 && q <= 1.0)) {
      throw DomainError("q must lie in [0, 1]");
    }
    if (batch_scheme == BatchScheme::kFixed && batch_size < 1) {
      throw DomainError("batch size must be >= 1");
    }
    if (trace_every < 1) throw DomainError("trace_every must be >= 1");
  }

  // Sampling probability used by the accountant; q = |B| / n under the
  // fixed-size scheme (an approximation).
  double sampling_probability(Index n) const {
    if (batch_scheme == BatchScheme::kPoisson) return q;
    return std::min(1.0, static_cast<double>(batch_size) / static_cast<double>(n));
  }
};

struct TraceRecord {
  Index iter = 0;
  Index batch_size = 0;
  bool skipped = false;
  double loss_population = std::numeric_limits<double>::quiet_NaN();
  double epsilon_so_far = 0.0;
};

inline constexpr const char* kTraceCsvHeader = "iter,batch_size,loss_population,epsilon_so_far";

struct TrainTrace {
  std::vector<TraceRecord> records;
  std::vector<IndexList> batches;
};

struct TrainResult {
  Model model;
  TrainTrace trace;
  std::vector<AccountantRow> accountant_log;
};

// Called before each update with the iteration index, the current
// parameters and the realized batch.
using StepHook = std::function<void(Index iter, const Model& current, const IndexList& batch)>;

// Extra full-data gradient added to the (private) batch gradient, e.g. a
// fairness penalty. Returns a parameter-shaped vector.
using ExtraGradient = std::function<Eigen::VectorXd(const Model& current)>;

namespace detail {

// theta <- theta - eta * (sum / |B|); shared by SGD and DP-SGD so that the
// degenerate DP-SGD reproduces SGD bit for bit.
inline Model apply_update(const Model& m, const Eigen::VectorXd& sum, Index batch,
                          double eta) {
  Model out = m;
  out.params -= eta * (sum / static_cast<double>(batch));
  return out;
}

inline Eigen::VectorXd grad_sum(const Model& m, const GroupedDataset& ds,
                                const IndexList& batch) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.num_params()));
  for (Index i : batch) sum += sample_grad(m, row(ds, i), label(ds, i));
  return sum;
}

inline Eigen::VectorXd clipped_grad_sum(const Model& m, const GroupedDataset& ds,
                                        const IndexList& batch, double bound) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.num_params()));
  for (Index i : batch) sum += clip(sample_grad(m, row(ds, i), label(ds, i)), bound);
  return sum;
}

// Noisy average clipped gradient (sum pi_C(g_i) + N(0, C^2 sigma^2 I)) / |B|.
inline Eigen::VectorXd private_batch_grad(const Model& m, const GroupedDataset& ds,
                                          const IndexList& batch, double bound,
                                          double sigma, Rng& rng) {
  Eigen::VectorXd sum = clipped_grad_sum(m, ds, batch, bound);
  if (sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, bound * sigma);
    for (Eigen::Index p = 0; p < sum.size(); ++p) sum[p] += noise(rng);
  }
  return sum / static_cast<double>(batch.size());
}

}  // namespace detail

inline Model sgd_step(const Model& m, const GroupedDataset& ds, const IndexList& batch,
                      double eta) {
  if (batch.empty()) return m;
  return detail::apply_update(m, detail::grad_sum(m, ds, batch), batch.size(), eta);
}

// One step of DP-SGD: clip each per-sample gradient to `bound`, add a single
// N(0, bound^2 sigma^2 I) draw to the sum, divide by the realized |B|.
// An empty batch leaves the model unchanged and consumes no randomness.
inline Model dpsgd_step(const Model& m, const GroupedDataset& ds, const IndexList& batch,
                        double eta, double bound, double sigma, Rng& rng) {
  if (batch.empty()) return m;
  if (!(sigma >= 0.0)) throw DomainError("sigma must be non-negative");
  Eigen::VectorXd sum = detail::clipped_grad_sum(m, ds, batch, bound);
  if (sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, bound * sigma);
    for (Eigen::Index p = 0; p < sum.size(); ++p) sum[p] += noise(rng);
  }
  return detail::apply_update(m, sum, batch.size(), eta);
}

inline Model initial_model(const TrainConfig& cfg, Index dim) {
  Model m = Model::zeros(cfg.family, dim, cfg.classes, cfg.hidden, cfg.activation);
  if (cfg.family == Family::kMlp1) {
    // A zero-initialized network has identical hidden units and never
    // separates them; draw a small seeded Gaussian instead.
    Rng rng(cfg.seed ^ 0x5eed1417c0ffeeULL);
    std::normal_distribution<double> normal(0.0, cfg.init_scale);
    for (Eigen::Index p = 0; p < m.params.size(); ++p) m.params[p] = normal(rng);
  }
  return m;
}

inline IndexList draw_batch(const TrainConfig& cfg, Index n, Rng& rng) {
  if (cfg.batch_scheme == BatchScheme::kPoisson) return poisson_batch(n, cfg.q, rng);
  return fixed_batch(n, cfg.batch_size, rng);
}

struct TrainOptions {
  StepHook on_step;
  ExtraGradient extra_gradient;
  std::optional<Model> initial;
};

// Runs `cfg.iterations` steps of SGD or DP-SGD. Batches and noise use
// separate generators derived from cfg.seed, so a private run and its
// non-private twin see the same batch stream.
inline TrainResult train(const TrainConfig& cfg, const GroupedDataset& ds,
                         const TrainOptions& options = {}) {
  cfg.validate();
  if (cfg.mechanism == Mechanism::kOutputPerturbation) {
    throw UnsupportedError("train() runs SGD/DP-SGD; use OutputPerturbation");
  }
  const bool priv = cfg.mechanism == Mechanism::kDpSgd;
  TrainResult result;
  result.model = options.initial ? *options.initial : initial_model(cfg, ds.dim());
  result.model.check_shape();
  Rng batch_rng(cfg.seed);
  Rng noise_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::optional<RdpAccountant> accountant;
  if (priv && cfg.sigma > 0.0) {
    accountant.emplace(cfg.sampling_probability(ds.size()), cfg.sigma, cfg.delta);
  }
  const auto all = ds.all_indices();

  for (Index t = 0; t < cfg.iterations; ++t) {
    IndexList batch = draw_batch(cfg, ds.size(), batch_rng);
    if (options.on_step) options.on_step(t, result.model, batch);

    TraceRecord rec;
    rec.iter = t;
    rec.batch_size = batch.size();
    rec.skipped = batch.empty();
    if (!batch.empty()) {
      if (options.extra_gradient) {
        Eigen::VectorXd g = priv ? detail::private_batch_grad(result.model, ds, batch,
                                                              cfg.clip_bound, cfg.sigma,
                                                              noise_rng)
                                 : mean_grad(result.model, ds, batch);
        g += options.extra_gradient(result.model);
        result.model.params -= cfg.learning_rate * g;
      } else if (priv) {
        result.model = dpsgd_step(result.model, ds, batch, cfg.learning_rate,
                                  cfg.clip_bound, cfg.sigma, noise_rng);
      } else {
        result.model = sgd_step(result.model, ds, batch, cfg.learning_rate);
      }
    }
    if (accountant) {
      accountant->step();
      result.accountant_log.push_back(accountant->row());
      rec.epsilon_so_far = result.accountant_log.back().epsilon;
    } else if (priv) {
      rec.epsilon_so_far = std::numeric_limits<double>::infinity();
    }
    if (!result.model.params.allFinite()) {
      throw NumericalError("training diverged at iteration " + std::to_string(t) +
                           ": non-finite parameters");
    }
    if (t % cfg.trace_every == 0 || t + 1 == cfg.iterations) {
      rec.loss_population = loss_mean(result.model, ds, all);
      if (!std::isfinite(rec.loss_population)) {
        throw NumericalError("training diverged at iteration " + std::to_string(t) +
                             ": non-finite loss");
      }
    }
    result.trace.records.push_back(rec);
    result.trace.batches.push_back(std::move(batch));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Output perturbation

struct FitReport {
  Model model;
  double grad_norm = 0.0;
  Index iterations = 0;
};

// argmin_theta L(theta; D) + lambda/2 ||theta||^2 by gradient descent with
// backtracking line search, stopping at ||grad|| <= tol.
inline FitReport fit_regularized(Model m, const GroupedDataset& ds, double lambda,
                                 double tol = 1e-8, Index max_iterations = 100000) {
  if (!(lambda >= 0.0)) throw DomainError("lambda must be non-negative");
  const auto all = ds.all_indices();
  auto objective = [&](const Model& x) {
    return loss_mean(x, ds, all) + 0.5 * lambda * x.params.squaredNorm();
  };
  auto gradient = [&](const Model& x) -> Eigen::VectorXd {
    return mean_grad(x, ds, all) + lambda * x.params;
  };
  double step = 1.0;
  double f = objective(m);
  Eigen::VectorXd g = gradient(m);
  Index it = 0;
  for (; it < max_iterations && g.norm() > tol; ++it) {
    const double g2 = g.squaredNorm();
    Model trial = m;
    // Rounding slack: near the optimum the Armijo decrease falls below the
    // resolution of f.
    const double slack = 8.0 * std::numeric_limits<double>::epsilon() * std::abs(f);
    for (int bt = 0;; ++bt) {
      trial.params = m.params - step * g;
      const double ft = objective(trial);
      if (ft <= f - 0.5 * step * g2 + slack) {
        f = ft;
        break;
      }
      step *= 0.5;
      if (bt > 80) {
        throw NumericalError("line search failed; gradient norm " + std::to_string(g.norm()));
      }
    }
    m = std::move(trial);
    g = gradient(m);
    step = std::min(step * 2.0, 1e4);
  }
  if (g.norm() > tol) {
    throw NumericalError("optimizer did not converge; final gradient norm " +
                         std::to_string(g.norm()));
  }
  return {std::move(m), g.norm(), it};
}

struct OutputPertResult {
  Model optimum;
  Model noisy;
};

// Regularized ERM followed by Gaussian noise N(0, (sensitivity * sigma)^2 I)
// on the minimizer. Sensitivity is 2/(n lambda); sigma comes from
// calibrate_sigma unless given explicitly.
class OutputPerturbation {
 public:
  OutputPerturbation(const GroupedDataset& ds, Family family, Index classes, double lambda,
                     double epsilon, double delta, std::optional<double> sigma = std::nullopt)
      : lambda_(lambda) {
    if (family == Family::kMlp1) {
      throw UnsupportedError("output perturbation needs a convex family");
    }
    sensitivity_ = output_pert_sensitivity(ds.size(), lambda);
    sigma_ = sigma ? *sigma : calibrate_sigma(epsilon, delta, sensitivity_);
    auto fit = fit_regularized(Model::zeros(family, ds.dim(), classes), ds, lambda);
    optimum_ = std::move(fit.model);
    grad_norm_ = fit.grad_norm;
  }

  const Model& optimum() const { return optimum_; }
  double sensitivity() const { return sensitivity_; }
  double sigma() const { return sigma_; }
  double noise_std() const { return sensitivity_ * sigma_; }
  double lambda() const { return lambda_; }
  double optimizer_grad_norm() const { return grad_norm_; }

  Model sample(std::uint64_t seed) const {
    Model out = optimum_;
    if (noise_std() == 0.0) return out;
    Rng rng(seed);
    std::normal_distribution<double> noise(0.0, noise_std());
    for (Eigen::Index p = 0; p < out.params.size(); ++p) out.params[p] += noise(rng);
    return out;
  }

 private:
  double lambda_;
  double sensitivity_ = 0.0;
  double sigma_ = 0.0;
  double grad_norm_ = 0.0;
  Model optimum_;
};

inline OutputPertResult train_output_pert(const GroupedDataset& ds, Family family,
                                          double lambda, double epsilon, double delta,
                                          std::uint64_t seed, Index classes = 2,
                                          std::optional<double> sigma = std::nullopt) {
  OutputPerturbation mech(ds, family, classes, lambda, epsilon, delta, sigma);
  return {mech.optimum(), mech.sample(seed)};
}

}  // namespace dpfair
