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
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dpfair/errors.hpp"

namespace dpfair {

// Privacy parameters of a run. For DP-SGD the noise on the clipped-gradient
// sum is N(0, C^2 sigma^2 I); for output perturbation the noise on the
// parameters is N(0, (sensitivity * sigma)^2 I).
struct PrivacySpec {
  std::optional<double> epsilon;
  double delta = 1e-5;
  std::optional<double> sigma;
  double clip_bound = 0.1;
  double sensitivity = 0.0;
  double q = 0.01;
  std::uint64_t iterations = 1;

  void validate(bool dpsgd) const {
    if (!(delta > 0.0 && delta < 1.0)) throw DomainError("delta must lie in (0, 1)");
    if (!epsilon && !sigma) throw DomainError("one of epsilon or sigma must be set");
    if (epsilon && !(*epsilon > 0.0)) throw DomainError("epsilon must be positive");
    if (sigma && !(*sigma >= 0.0)) throw DomainError("sigma must be non-negative");
    if (dpsgd && !(clip_bound > 0.0)) throw DomainError("clip bound must be positive");
    if (!(sensitivity >= 0.0)) throw DomainError("sensitivity must be non-negative");
    if (!(q >= 0.0 && q <= 1.0)) throw DomainError("q must lie in [0, 1]");
    if (iterations < 1) throw DomainError("iterations must be >= 1");
  }
};

// pi_C(g) = g * min(1, C / ||g||). The result has norm at most C.
inline Eigen::VectorXd clip(const Eigen::VectorXd& g, double bound) {
  if (!(bound > 0.0)) throw DomainError("clip bound must be positive");
  const double norm = g.norm();
  if (norm <= bound) return g;
  // Rounding can leave the scaled vector an ulp above the bound; shrink the
  // factor until it is not, which also makes clip idempotent.
  double factor = bound / norm;
  Eigen::VectorXd out = g * factor;
  while (out.norm() > bound) {
    factor = std::nextafter(factor, 0.0);
    out = g * factor;
  }
  return out;
}

// Sensitivity of the regularized ERM minimizer: 2 / (n lambda).
inline double output_pert_sensitivity(std::uint64_t n, double lambda) {
  if (n < 1) throw DomainError("dataset size must be >= 1");
  if (!(lambda > 0.0)) throw DomainError("regularization lambda must be positive");
  return 2.0 / (static_cast<double>(n) * lambda);
}

inline double standard_normal_cdf(double x) {
  return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

// Smallest delta for which Gaussian noise with std sigma * sensitivity is
// (epsilon, delta)-DP (exact privacy profile of the Gaussian mechanism). The
// sensitivity cancels, so only the multiplier matters.
inline double gaussian_delta(double sigma, double epsilon) {
  const double a = 0.5 / sigma - epsilon * sigma;
  const double b = -0.5 / sigma - epsilon * sigma;
  const double pb = standard_normal_cdf(b);
  const double second = pb > 0.0 ? std::exp(epsilon + std::log(pb)) : 0.0;
  return std::max(0.0, standard_normal_cdf(a) - second);
}

// sqrt(2 ln(1.25/delta)) / epsilon
inline double classical_sigma(double epsilon, double delta) {
  return std::sqrt(2.0 * std::log(1.25 / delta)) / epsilon;
}

// Sufficient condition delta > 4/5 exp(-(sigma eps)^2 / 2), valid for eps < 1.
inline bool satisfies_classical_condition(double sigma, double epsilon,
                                          double delta) {
  return delta > 0.8 * std::exp(-0.5 * (sigma * epsilon) * (sigma * epsilon));
}

// Smallest noise multiplier sigma (relative tolerance 1e-6) with
// gaussian_delta(sigma, epsilon) <= delta, found by bracketing + bisection.
inline double calibrate_sigma(double epsilon, double delta, double sensitivity) {
  if (!(epsilon > 0.0)) throw DomainError("epsilon must be positive");
  if (!(delta > 0.0 && delta < 1.0)) throw DomainError("delta must lie in (0, 1)");
  if (!(sensitivity > 0.0)) throw DomainError("sensitivity must be positive");

  constexpr int kMaxIterations = 200;
  int iterations = 0;
  double lo = 1.0;
  double hi = 1.0;
  while (gaussian_delta(hi, epsilon) > delta) {
    lo = hi;
    hi *= 2.0;
    if (++iterations > kMaxIterations) {
      throw NumericalError("calibrate_sigma: no upper bracket found");
    }
  }
  while (lo == hi || gaussian_delta(lo, epsilon) <= delta) {
    hi = lo;
    lo *= 0.5;
    if (++iterations > kMaxIterations) {
      throw NumericalError("calibrate_sigma: no lower bracket found");
    }
  }
  while (hi - lo > 1e-7 * hi) {
    const double mid = 0.5 * (lo + hi);
    if (gaussian_delta(mid, epsilon) > delta) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (++iterations > kMaxIterations) {
      throw NumericalError("calibrate_sigma: bisection did not converge");
    }
  }
  return hi;
}

// ---------------------------------------------------------------------------
// Renyi DP accounting for the Poisson-subsampled Gaussian mechanism

inline std::vector<int> default_rdp_orders() {
  std::vector<int> orders;
  for (int a = 2; a <= 64; ++a) orders.push_back(a);
  return orders;
}

namespace detail {

inline double log_add_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double top = std::max(a, b);
  return top + std::log1p(std::exp(-std::abs(a - b)));
}

inline double log_binomial(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

}  // namespace detail

// RDP of order alpha for one step, from the binomial expansion
//   A_alpha = sum_k C(alpha,k) (1-q)^(alpha-k) q^k exp((k^2 - k) / (2 sigma^2)),
//   RDP(alpha) = log(A_alpha) / (alpha - 1),
// evaluated in log space.
inline double rdp_subsampled_gaussian(double q, double sigma, int alpha) {
  if (!(sigma > 0.0)) throw DomainError("sigma must be positive");
  if (!(q >= 0.0 && q <= 1.0)) throw DomainError("q must lie in [0, 1]");
  if (alpha < 2) throw DomainError("RDP orders must be integers >= 2");
  if (q == 0.0) return 0.0;
  const double inv_two_var = 0.5 / (sigma * sigma);
  if (q == 1.0) return alpha * inv_two_var;
  const double log_q = std::log(q);
  const double log_1mq = std::log1p(-q);
  double log_a = -std::numeric_limits<double>::infinity();
  for (int k = 0; k <= alpha; ++k) {
    const double term = detail::log_binomial(alpha, k) + (alpha - k) * log_1mq +
                        k * log_q + (static_cast<double>(k) * k - k) * inv_two_var;
    log_a = detail::log_add_exp(log_a, term);
  }
  return std::max(0.0, log_a / (alpha - 1));
}

inline std::vector<double> rdp_subsampled_gaussian(double q, double sigma,
                                                   const std::vector<int>& orders) {
  std::vector<double> out;
  out.reserve(orders.size());
  for (int a : orders) out.push_back(rdp_subsampled_gaussian(q, sigma, a));
  return out;
}

// kClassic:  eps = min_a T*RDP(a) + log(1/delta) / (a - 1)
// kImproved: eps = min_a T*RDP(a) + log((a-1)/a) - (log(delta) + log(a)) / (a - 1)
// Both are valid conversions; kImproved is never looser once a >= 2.
enum class RdpConversion { kClassic, kImproved };

struct EpsilonResult {
  double epsilon = 0.0;
  int order = 0;
};

inline EpsilonResult rdp_to_eps(const std::vector<int>& orders,
                                const std::vector<double>& rdp, double delta,
                                std::uint64_t steps,
                                RdpConversion conversion = RdpConversion::kImproved) {
  if (orders.empty()) throw DomainError("empty RDP order grid");
  if (orders.size() != rdp.size()) throw ShapeError("orders and RDP values differ in length");
  if (!(delta > 0.0 && delta < 1.0)) throw DomainError("delta must lie in (0, 1)");
  if (steps < 1) throw DomainError("step count must be >= 1");
  EpsilonResult best{std::numeric_limits<double>::infinity(), orders.front()};
  for (std::size_t i = 0; i < orders.size(); ++i) {
    const double a = orders[i];
    const double composed = static_cast<double>(steps) * rdp[i];
    double eps = 0.0;
    if (conversion == RdpConversion::kClassic) {
      eps = composed + std::log(1.0 / delta) / (a - 1.0);
    } else {
      eps = composed + std::log1p(-1.0 / a) - (std::log(delta) + std::log(a)) / (a - 1.0);
    }
    if (eps < best.epsilon) best = {eps, orders[i]};
  }
  best.epsilon = std::max(0.0, best.epsilon);
  return best;
}

struct AccountantRow {
  std::uint64_t step = 0;
  double q = 0.0;
  double sigma = 0.0;
  int alpha_star = 0;
  double epsilon = 0.0;
  double delta = 0.0;
};

inline constexpr const char* kAccountantCsvHeader = "step,q,sigma,alpha_star,epsilon,delta";

// Composes identical subsampled-Gaussian steps. Owned by one training loop.
class RdpAccountant {
 public:
  RdpAccountant(double q, double sigma, double delta,
                std::vector<int> orders = default_rdp_orders(),
                RdpConversion conversion = RdpConversion::kImproved)
      : q_(q), sigma_(sigma), delta_(delta), orders_(std::move(orders)),
        conversion_(conversion), per_step_(rdp_subsampled_gaussian(q, sigma, orders_)) {}

  void step() { ++steps_; }
  std::uint64_t steps() const { return steps_; }

  EpsilonResult spent() const {
    if (steps_ == 0) return {0.0, orders_.front()};
    return rdp_to_eps(orders_, per_step_, delta_, steps_, conversion_);
  }

  AccountantRow row() const {
    const auto e = spent();
    return {steps_, q_, sigma_, e.order, e.epsilon, delta_};
  }

 private:
  double q_;
  double sigma_;
  double delta_;
  std::vector<int> orders_;
  RdpConversion conversion_;
  std::vector<double> per_step_;
  std::uint64_t steps_ = 0;
};

// Smallest sigma whose T-step accountant epsilon is <= target_epsilon.
inline double sigma_for_epsilon(double q, std::uint64_t steps, double delta,
                                double target_epsilon,
                                const std::vector<int>& orders = default_rdp_orders()) {
  if (!(target_epsilon > 0.0)) throw DomainError("target epsilon must be positive");
  auto eps_at = [&](double sigma) {
    return rdp_to_eps(orders, rdp_subsampled_gaussian(q, sigma, orders), delta, steps)
        .epsilon;
  };
  double lo = 1e-2;
  double hi = 1.0;
  int guard = 0;
  while (eps_at(hi) > target_epsilon) {
    lo = hi;
    hi *= 2.0;
    if (++guard > 60) throw NumericalError("sigma_for_epsilon: epsilon " + std::to_string(target_epsilon) +
                           " is unreachable with RDP orders up to " +
                           std::to_string(*std::max_element(orders.begin(), orders.end())));
  }
  if (eps_at(lo) <= target_epsilon) return lo;
  for (int i = 0; i < 200 && hi - lo > 1e-7 * hi; ++i) {
    const double mid = 0.5 * (lo + hi);
    (eps_at(mid) > target_epsilon ? lo : hi) = mid;
  }
  return hi;
}

}  // namespace dpfair
