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
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dpfair/data.hpp"
#include "dpfair/errors.hpp"

namespace dpfair {

enum class Family { kLinearL2, kSoftmaxLinear, kMlp1 };
enum class Activation { kSigmoid, kTanh };

inline const char* to_string(Family f) {
  switch (f) {
    case Family::kLinearL2: return "linear_l2";
    case Family::kSoftmaxLinear: return "softmax_linear";
    case Family::kMlp1: return "mlp1";
  }
  return "?";
}

inline const char* to_string(Activation a) {
  return a == Activation::kSigmoid ? "sigmoid" : "tanh";
}

inline Family parse_family(const std::string& s) {
  if (s == "linear_l2") return Family::kLinearL2;
  if (s == "softmax_linear") return Family::kSoftmaxLinear;
  if (s == "mlp1") return Family::kMlp1;
  throw ParseError("unknown model family '" + s + "'");
}

inline Activation parse_activation(const std::string& s) {
  if (s == "sigmoid") return Activation::kSigmoid;
  if (s == "tanh") return Activation::kTanh;
  throw ParseError("unknown activation '" + s + "'");
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Model family tag plus a flat parameter vector.
//
// Flattening order:
//   linear_l2       theta (d)
//   softmax_linear  theta (d x K), row-major: index i*K + k
//   mlp1            theta2 (d x H) row-major, then theta1 (H x K) row-major
//
// f(X) = softmax(theta1^T act(theta2^T X)) for mlp1; no bias terms anywhere.
struct Model {
  Family family = Family::kSoftmaxLinear;
  Index dim = 0;
  Index classes = 2;
  Index hidden = 0;
  Activation activation = Activation::kTanh;
  Eigen::VectorXd params;

  static Index param_count(Family family, Index d, Index k, Index h) {
    switch (family) {
      case Family::kLinearL2: return d;
      case Family::kSoftmaxLinear: return d * k;
      case Family::kMlp1: return d * h + h * k;
    }
    return 0;
  }

  static Model zeros(Family family, Index d, Index k = 2, Index h = 16,
                     Activation act = Activation::kTanh) {
    Model m;
    m.family = family;
    m.dim = d;
    m.classes = family == Family::kLinearL2 ? 1 : k;
    m.hidden = family == Family::kMlp1 ? h : 0;
    m.activation = act;
    m.params = Eigen::VectorXd::Zero(
        static_cast<Eigen::Index>(param_count(family, d, m.classes, m.hidden)));
    return m;
  }

  Index num_params() const { return param_count(family, dim, classes, hidden); }
  bool is_classifier() const { return family != Family::kLinearL2; }
  bool is_convex() const { return family != Family::kMlp1; }

  void check_shape() const {
    if (static_cast<Index>(params.size()) != num_params()) {
      throw ShapeError("parameter vector has " + std::to_string(params.size()) +
                       " entries, expected " + std::to_string(num_params()));
    }
  }
};

// Per-sample gradients, one row per source index.
struct GradSet {
  Eigen::MatrixXd per_sample;
  IndexList indices;

  Eigen::VectorXd mean() const {
    return per_sample.colwise().mean().transpose();
  }
  Eigen::VectorXd norms() const { return per_sample.rowwise().norm(); }
};

namespace detail {

using ConstVec = Eigen::Ref<const Eigen::VectorXd>;

inline Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
  const double top = z.maxCoeff();
  Eigen::VectorXd e = (z.array() - top).exp().matrix();
  return e / e.sum();
}

inline double log_sum_exp(const Eigen::VectorXd& z) {
  const double top = z.maxCoeff();
  return top + std::log((z.array() - top).exp().sum());
}

struct ActivationDerivs {
  Eigen::ArrayXd value, first, second;
};

inline ActivationDerivs activate(Activation a, const Eigen::VectorXd& h) {
  ActivationDerivs out;
  if (a == Activation::kSigmoid) {
    out.value = 1.0 / (1.0 + (-h.array()).exp());
    out.first = out.value * (1.0 - out.value);
    out.second = out.first * (1.0 - 2.0 * out.value);
  } else {
    out.value = h.array().tanh();
    out.first = 1.0 - out.value.square();
    out.second = -2.0 * out.value * out.first;
  }
  return out;
}

// Intermediate quantities of a single forward pass.
struct Pass {
  Eigen::VectorXd logits;    // z (K), or the scalar prediction for linear_l2
  Eigen::VectorXd probs;     // f (K); empty for linear_l2
  Eigen::VectorXd pre;       // h (H), mlp1 only
  ActivationDerivs act;      // act(h), act'(h), act''(h), mlp1 only
};

inline void check_input(const Model& m, const ConstVec& x) {
  if (static_cast<Index>(x.size()) != m.dim) {
    throw ShapeError("input has width " + std::to_string(x.size()) +
                     ", model expects " + std::to_string(m.dim));
  }
}

inline Eigen::Map<const RowMatrix> softmax_weights(const Model& m) {
  return {m.params.data(), static_cast<Eigen::Index>(m.dim),
          static_cast<Eigen::Index>(m.classes)};
}
inline Eigen::Map<const RowMatrix> hidden_weights(const Model& m) {
  return {m.params.data(), static_cast<Eigen::Index>(m.dim),
          static_cast<Eigen::Index>(m.hidden)};
}
inline Eigen::Map<const RowMatrix> output_weights(const Model& m) {
  return {m.params.data() + m.dim * m.hidden,
          static_cast<Eigen::Index>(m.hidden),
          static_cast<Eigen::Index>(m.classes)};
}

inline Pass run(const Model& m, const ConstVec& x) {
  check_input(m, x);
  Pass p;
  switch (m.family) {
    case Family::kLinearL2:
      p.logits = Eigen::VectorXd::Constant(1, m.params.dot(x));
      break;
    case Family::kSoftmaxLinear:
      p.logits = softmax_weights(m).transpose() * x;
      p.probs = softmax(p.logits);
      break;
    case Family::kMlp1:
      p.pre = hidden_weights(m).transpose() * x;
      p.act = activate(m.activation, p.pre);
      p.logits = output_weights(m).transpose() * p.act.value.matrix();
      p.probs = softmax(p.logits);
      break;
  }
  return p;
}

inline Eigen::VectorXd one_hot(const Model& m, double y) {
  Eigen::VectorXd e = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.classes));
  const auto k = static_cast<Eigen::Index>(y);
  if (k < 0 || k >= e.size()) {
    throw DomainError("label " + std::to_string(y) + " is not a class id");
  }
  e[k] = 1.0;
  return e;
}

// Chain rule from d(objective)/d(logits) to the flat parameter gradient.
inline Eigen::VectorXd backprop(const Model& m, const ConstVec& x,
                                const Pass& p, const Eigen::VectorXd& dz) {
  Eigen::VectorXd g(static_cast<Eigen::Index>(m.num_params()));
  switch (m.family) {
    case Family::kLinearL2:
      g = dz[0] * x;
      break;
    case Family::kSoftmaxLinear: {
      Eigen::Map<RowMatrix> gw(g.data(), static_cast<Eigen::Index>(m.dim),
                               static_cast<Eigen::Index>(m.classes));
      gw.noalias() = x * dz.transpose();
      break;
    }
    case Family::kMlp1: {
      const auto d = static_cast<Eigen::Index>(m.dim);
      const auto h = static_cast<Eigen::Index>(m.hidden);
      const auto k = static_cast<Eigen::Index>(m.classes);
      Eigen::Map<RowMatrix> g2(g.data(), d, h);
      Eigen::Map<RowMatrix> g1(g.data() + d * h, h, k);
      g1.noalias() = p.act.value.matrix() * dz.transpose();
      const Eigen::VectorXd dh =
          (p.act.first * (output_weights(m) * dz).array()).matrix();
      g2.noalias() = x * dh.transpose();
      break;
    }
  }
  return g;
}

inline void check_subset(const GroupedDataset& ds, const IndexList& subset) {
  if (subset.empty()) throw DomainError("subset is empty");
  for (Index i : subset) {
    if (i >= ds.size()) throw ShapeError("subset index out of range");
  }
}

inline Eigen::VectorXd row(const GroupedDataset& ds, Index i) {
  return ds.features.row(static_cast<Eigen::Index>(i)).transpose();
}

inline double label(const GroupedDataset& ds, Index i) {
  return ds.labels[static_cast<Eigen::Index>(i)];
}

}  // namespace detail

// Class probabilities for classifiers, the real prediction for linear_l2.
inline Eigen::VectorXd forward(const Model& m, const detail::ConstVec& x) {
  m.check_shape();
  auto p = detail::run(m, x);
  return m.is_classifier() ? p.probs : p.logits;
}

// Row i of the result is forward(m, X.row(i)).
inline Eigen::MatrixXd forward_batch(const Model& m, const Eigen::MatrixXd& x) {
  m.check_shape();
  Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(m.classes));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::VectorXd xi = x.row(i).transpose();
    out.row(i) = forward(m, detail::ConstVec(xi)).transpose();
  }
  return out;
}

inline double sample_loss(const Model& m, const detail::ConstVec& x, double y) {
  auto p = detail::run(m, x);
  if (m.family == Family::kLinearL2) {
    const double r = p.logits[0] - y;
    return r * r;
  }
  const auto k = static_cast<Eigen::Index>(y);
  if (k < 0 || k >= p.logits.size()) {
    throw DomainError("label " + std::to_string(y) + " is not a class id");
  }
  return detail::log_sum_exp(p.logits) - p.logits[k];
}

inline double loss_mean(const Model& m, const GroupedDataset& ds,
                        const IndexList& subset) {
  m.check_shape();
  detail::check_subset(ds, subset);
  double total = 0.0;
  for (Index i : subset) {
    total += sample_loss(m, detail::row(ds, i), detail::label(ds, i));
  }
  return total / static_cast<double>(subset.size());
}

inline double loss_mean(const Model& m, const GroupedDataset& ds) {
  return loss_mean(m, ds, ds.all_indices());
}

// Gradient of the per-sample loss: (f - Y) (x) X for softmax_linear,
// 2 (theta^T X - Y) X for linear_l2.
inline Eigen::VectorXd sample_grad(const Model& m, const detail::ConstVec& x,
                                   double y) {
  auto p = detail::run(m, x);
  Eigen::VectorXd dz;
  if (m.family == Family::kLinearL2) {
    dz = Eigen::VectorXd::Constant(1, 2.0 * (p.logits[0] - y));
  } else {
    dz = p.probs - detail::one_hot(m, y);
  }
  return detail::backprop(m, x, p, dz);
}

inline GradSet per_sample_grad(const Model& m, const GroupedDataset& ds,
                               const IndexList& subset) {
  m.check_shape();
  detail::check_subset(ds, subset);
  GradSet out;
  out.indices = subset;
  out.per_sample.resize(static_cast<Eigen::Index>(subset.size()),
                        static_cast<Eigen::Index>(m.num_params()));
  for (Index r = 0; r < subset.size(); ++r) {
    out.per_sample.row(static_cast<Eigen::Index>(r)) =
        sample_grad(m, detail::row(ds, subset[r]), detail::label(ds, subset[r]))
            .transpose();
  }
  return out;
}

inline Eigen::VectorXd mean_grad(const Model& m, const GroupedDataset& ds,
                                 const IndexList& subset) {
  m.check_shape();
  detail::check_subset(ds, subset);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.num_params()));
  for (Index i : subset) g += sample_grad(m, detail::row(ds, i), detail::label(ds, i));
  return g / static_cast<double>(subset.size());
}

// Trace of the per-sample loss Hessian.
//
//   linear_l2       2 ||X||^2
//   softmax_linear  (1 - sum_k f_k^2) ||X||^2
//   mlp1            sum_{j,k} f_k (1 - f_k) O_j^2  +  ||X||^2 sum_j Gamma_j
//
// with Gamma_j = act''(h_j) sum_k theta1_jk (f_k - Y_k)
//              + act'(h_j)^2 (sum_k theta1_jk^2 f_k - (sum_k theta1_jk f_k)^2),
// the exact diagonal second derivative of the hidden-layer weights.
inline double sample_hessian_trace(const Model& m, const detail::ConstVec& x,
                                   double y) {
  auto p = detail::run(m, x);
  const double x2 = x.squaredNorm();
  switch (m.family) {
    case Family::kLinearL2:
      return 2.0 * x2;
    case Family::kSoftmaxLinear:
      return (1.0 - p.probs.squaredNorm()) * x2;
    case Family::kMlp1: {
      const Eigen::ArrayXd f = p.probs.array();
      const double out_layer = (f * (1.0 - f)).sum() * p.act.value.square().sum();
      const auto w1 = detail::output_weights(m);
      const Eigen::VectorXd resid = p.probs - detail::one_hot(m, y);
      const Eigen::ArrayXd first_order = (w1 * resid).array();
      const Eigen::ArrayXd mean_w = (w1 * p.probs).array();
      const Eigen::ArrayXd mean_w2 = (w1.array().square().matrix() * p.probs).array();
      const Eigen::ArrayXd gamma = p.act.second * first_order +
                                   p.act.first.square() * (mean_w2 - mean_w.square());
      return out_layer + x2 * gamma.sum();
    }
  }
  return 0.0;
}

// Mean over `subset` of the per-sample Hessian traces.
inline double hessian_trace(const Model& m, const GroupedDataset& ds,
                            const IndexList& subset) {
  m.check_shape();
  detail::check_subset(ds, subset);
  double total = 0.0;
  for (Index i : subset) {
    total += sample_hessian_trace(m, detail::row(ds, i), detail::label(ds, i));
  }
  return total / static_cast<double>(subset.size());
}

// Central finite difference of the mean gradient along v.
inline Eigen::VectorXd hvp_fd(const Model& m, const GroupedDataset& ds,
                              const IndexList& subset, const Eigen::VectorXd& v) {
  const double h = 1e-4 * std::max(1.0, m.params.norm()) /
                   std::max(1.0, v.norm());
  Model plus = m;
  Model minus = m;
  plus.params += h * v;
  minus.params -= h * v;
  return (mean_grad(plus, ds, subset) - mean_grad(minus, ds, subset)) / (2.0 * h);
}

// H v for the mean loss over `subset`. softmax_linear uses the Kronecker
// structure (diag(f) - f f^T) (x) X X^T; other families use hvp_fd.
inline Eigen::VectorXd hvp(const Model& m, const GroupedDataset& ds,
                           const IndexList& subset, const Eigen::VectorXd& v) {
  m.check_shape();
  detail::check_subset(ds, subset);
  if (static_cast<Index>(v.size()) != m.num_params()) {
    throw ShapeError("hvp direction has " + std::to_string(v.size()) +
                     " entries, expected " + std::to_string(m.num_params()));
  }
  if (m.family != Family::kSoftmaxLinear) return hvp_fd(m, ds, subset, v);

  const auto d = static_cast<Eigen::Index>(m.dim);
  const auto k = static_cast<Eigen::Index>(m.classes);
  Eigen::Map<const RowMatrix> vm(v.data(), d, k);
  RowMatrix acc = RowMatrix::Zero(d, k);
  for (Index i : subset) {
    const Eigen::VectorXd x = detail::row(ds, i);
    const auto p = detail::run(m, x);
    const Eigen::VectorXd u = vm.transpose() * x;
    const Eigen::VectorXd ju = p.probs.cwiseProduct(u) - p.probs * p.probs.dot(u);
    acc.noalias() += x * ju.transpose();
  }
  acc /= static_cast<double>(subset.size());
  return Eigen::Map<const Eigen::VectorXd>(acc.data(), d * k);
}

struct BoundaryScores {
  std::vector<double> per_sample;
  double mean = 0.0;
};

// s(X) = 1 - sum_k f_k(X)^2: largest at the uniform prediction (1 - 1/K),
// zero at a one-hot prediction.
inline double boundary_score(const Eigen::VectorXd& probs) {
  return 1.0 - probs.squaredNorm();
}

inline BoundaryScores boundary_score(const Model& m, const GroupedDataset& ds,
                                     const IndexList& subset) {
  if (!m.is_classifier()) {
    throw UnsupportedError("boundary score needs a classifier family");
  }
  m.check_shape();
  detail::check_subset(ds, subset);
  BoundaryScores out;
  out.per_sample.reserve(subset.size());
  for (Index i : subset) {
    out.per_sample.push_back(boundary_score(detail::run(m, detail::row(ds, i)).probs));
    out.mean += out.per_sample.back();
  }
  out.mean /= static_cast<double>(subset.size());
  return out;
}

// Gradient of the subset-mean boundary score w.r.t. the parameters.
// ds/dz_j = -2 f_j (f_j - sum_k f_k^2).
inline Eigen::VectorXd boundary_score_grad(const Model& m, const GroupedDataset& ds,
                                           const IndexList& subset) {
  if (!m.is_classifier()) {
    throw UnsupportedError("boundary score needs a classifier family");
  }
  m.check_shape();
  detail::check_subset(ds, subset);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.num_params()));
  for (Index i : subset) {
    const Eigen::VectorXd x = detail::row(ds, i);
    const auto p = detail::run(m, x);
    const double sq = p.probs.squaredNorm();
    const Eigen::VectorXd dz =
        (-2.0 * p.probs.array() * (p.probs.array() - sq)).matrix();
    g += detail::backprop(m, x, p, dz);
  }
  return g / static_cast<double>(subset.size());
}

// ---------------------------------------------------------------------------
// Checkpoints: one header line, then one parameter per line.
//
//   dpfair-model v1 family=<f> d=<d> K=<K> H=<H> activation=<a> P=<P>

inline void save_model(std::ostream& out, const Model& m) {
  m.check_shape();
  out << "dpfair-model v1 family=" << to_string(m.family) << " d=" << m.dim
      << " K=" << m.classes << " H=" << m.hidden
      << " activation=" << to_string(m.activation) << " P=" << m.num_params()
      << '\n';
  char buf[40];
  for (Eigen::Index i = 0; i < m.params.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g\n", m.params[i]);
    out << buf;
  }
}

inline Model load_model(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty model checkpoint");
  std::istringstream header(line);
  std::string magic, version;
  header >> magic >> version;
  if (magic != "dpfair-model" || version != "v1") {
    throw ParseError("not a v1 model checkpoint");
  }
  Model m;
  Index declared = 0;
  std::string kv;
  while (header >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ParseError("bad header token '" + kv + "'");
    const auto key = kv.substr(0, eq);
    const auto val = kv.substr(eq + 1);
    if (key == "family") m.family = parse_family(val);
    else if (key == "d") m.dim = std::stoul(val);
    else if (key == "K") m.classes = std::stoul(val);
    else if (key == "H") m.hidden = std::stoul(val);
    else if (key == "activation") m.activation = parse_activation(val);
    else if (key == "P") declared = std::stoul(val);
    else throw ParseError("unknown header key '" + key + "'");
  }
  if (declared != m.num_params()) {
    throw ParseError("declared parameter count does not match dimensions");
  }
  m.params.resize(static_cast<Eigen::Index>(declared));
  for (Index i = 0; i < declared; ++i) {
    if (!std::getline(in, line)) throw ParseError("truncated checkpoint");
    m.params[static_cast<Eigen::Index>(i)] = std::stod(line);
  }
  return m;
}

}  // namespace dpfair
