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

#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "dpfair/errors.hpp"
#include "dpfair/model.hpp"
#include "test_util.hpp"

namespace dpfair {
namespace {

using testing::fd_grad;
using testing::fd_trace;
using testing::random_model;
using testing::rel_error;

GroupedDataset one_row(const Eigen::VectorXd& x, double y, int classes = 2) {
  GroupedDataset ds;
  ds.features = x.transpose();
  ds.labels = Eigen::VectorXd::Constant(1, y);
  ds.groups = {0};
  ds.group_names = {"a"};
  ds.num_classes = classes;
  return ds;
}

TEST(Forward, ZeroSoftmaxIsUniform) {
  auto m = Model::zeros(Family::kSoftmaxLinear, 3, 4);
  auto f = forward(m, Eigen::Vector3d(1.0, -2.0, 5.0));
  for (int k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(f[k], 0.25);
}

TEST(Forward, LinearPrediction) {
  auto m = Model::zeros(Family::kLinearL2, 3);
  m.params[0] = 1.0;
  EXPECT_DOUBLE_EQ(forward(m, Eigen::Vector3d(3.0, 7.0, -1.0))[0], 3.0);
}

TEST(Forward, MlpWithZeroOutputWeightsIsUniform) {
  Rng rng(1);
  auto m = random_model(Family::kMlp1, 4, 3, 5, rng);
  m.params.tail(5 * 3).setZero();
  auto f = forward(m, Eigen::Vector4d(0.3, 2.0, -1.0, 4.0));
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(f[k], 1.0 / 3.0, 1e-15);
}

TEST(Forward, DimensionMismatchIsShapeError) {
  auto m = Model::zeros(Family::kSoftmaxLinear, 3, 2);
  EXPECT_THROW(forward(m, Eigen::Vector2d(1.0, 2.0)), ShapeError);
}

TEST(Forward, BatchRowsMatchSingleSamples) {
  Rng rng(2);
  auto m = random_model(Family::kMlp1, 3, 3, 4, rng);
  Eigen::MatrixXd x = Eigen::MatrixXd::Random(5, 3);
  auto out = forward_batch(m, x);
  for (Eigen::Index i = 0; i < 5; ++i) {
    Eigen::VectorXd xi = x.row(i).transpose();
    EXPECT_LE((out.row(i).transpose() - forward(m, xi)).norm(), 1e-15);
  }
}

TEST(Forward, SoftmaxRowsAreStochastic) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    auto m = random_model(Family::kSoftmaxLinear, 5, 4, 0, rng, 20.0);
    Eigen::VectorXd x = testing::gaussian_vector(5, rng, 30.0);
    auto f = forward(m, x);
    EXPECT_NEAR(f.sum(), 1.0, 1e-9);
    EXPECT_TRUE(f.allFinite());
  }
}

TEST(LossMean, ClosedFormValues) {
  auto soft = Model::zeros(Family::kSoftmaxLinear, 2, 2);
  EXPECT_NEAR(loss_mean(soft, one_row(Eigen::Vector2d(4.0, -1.0), 1.0)), std::log(2.0), 1e-15);
  auto lin = Model::zeros(Family::kLinearL2, 2);
  EXPECT_DOUBLE_EQ(loss_mean(lin, one_row(Eigen::Vector2d(1.0, 1.0), 2.0, 0)), 4.0);
}

TEST(LossMean, MeanOfTwoSamples) {
  Rng rng(4);
  auto m = random_model(Family::kLinearL2, 2, 1, 0, rng);
  GroupedDataset ds;
  ds.features.resize(2, 2);
  ds.features << 1.0, 2.0, -3.0, 0.5;
  ds.labels = Eigen::Vector2d(0.3, -1.0);
  ds.groups = {0, 0};
  ds.group_names = {"a"};
  ds.num_classes = 0;
  const double a = sample_loss(m, detail::row(ds, 0), 0.3);
  const double b = sample_loss(m, detail::row(ds, 1), -1.0);
  EXPECT_DOUBLE_EQ(loss_mean(m, ds), (a + b) / 2.0);
  EXPECT_THROW(loss_mean(m, ds, IndexList{}), DomainError);
}

TEST(PerSampleGrad, SoftmaxAtZero) {
  auto m = Model::zeros(Family::kSoftmaxLinear, 2, 2);
  auto g = sample_grad(m, Eigen::Vector2d(1.0, 0.0), 0.0);
  // Row-major d x K: (x1, class 0), (x1, class 1), (x2, class 0), (x2, class 1).
  EXPECT_DOUBLE_EQ(g[0], -0.5);
  EXPECT_DOUBLE_EQ(g[1], 0.5);
  EXPECT_EQ(g[2], 0.0);
  EXPECT_EQ(g[3], 0.0);
  EXPECT_LE(rel_error(g, fd_grad(m, Eigen::Vector2d(1.0, 0.0), 0.0)), 1e-5);
}

TEST(PerSampleGrad, LinearClosedForm) {
  auto m = Model::zeros(Family::kLinearL2, 2);
  auto g = sample_grad(m, Eigen::Vector2d(1.0, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(g[0], -2.0);
  EXPECT_DOUBLE_EQ(g[1], -2.0);
}

TEST(PerSampleGrad, RowsMatchSampleGrad) {
  Rng rng(5);
  auto m = random_model(Family::kSoftmaxLinear, 3, 3, 0, rng);
  auto ds = testing::random_dataset(m, 7, rng);
  auto gs = per_sample_grad(m, ds, ds.all_indices());
  ASSERT_EQ(gs.per_sample.rows(), 7);
  for (Index i = 0; i < 7; ++i) {
    EXPECT_EQ(gs.per_sample.row(static_cast<Eigen::Index>(i)).transpose(),
              sample_grad(m, detail::row(ds, i), detail::label(ds, i)));
  }
  EXPECT_LE((gs.mean() - mean_grad(m, ds, ds.all_indices())).norm(), 1e-14);
}

struct FamilyCase {
  Family family;
  Activation activation;
  double trace_tol;
  double h;
};

class FamilyOracle : public ::testing::TestWithParam<FamilyCase> {};

TEST_P(FamilyOracle, GradientMatchesFiniteDifferences) {
  const auto c = GetParam();
  Rng rng(6);
  for (int t = 0; t < 50; ++t) {
    auto m = random_model(c.family, 4, 3, 5, rng, 0.7, c.activation);
    Eigen::VectorXd x = testing::gaussian_vector(4, rng);
    const double y = testing::random_label(m, rng);
    EXPECT_LE(rel_error(sample_grad(m, x, y), fd_grad(m, x, y)), 1e-5) << "state " << t;
  }
}

TEST_P(FamilyOracle, TraceMatchesFiniteDifferenceDiagonal) {
  const auto c = GetParam();
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    auto m = random_model(c.family, 4, 3, 5, rng, 0.7, c.activation);
    Eigen::VectorXd x = testing::gaussian_vector(4, rng);
    const double y = testing::random_label(m, rng);
    EXPECT_LE(rel_error(sample_hessian_trace(m, x, y), fd_trace(m, x, y, c.h)), c.trace_tol)
        << "state " << t;
  }
}

INSTANTIATE_TEST_SUITE_P(
    Families, FamilyOracle,
    ::testing::Values(FamilyCase{Family::kLinearL2, Activation::kTanh, 1e-6, 1e-3},
                      FamilyCase{Family::kSoftmaxLinear, Activation::kTanh, 1e-4, 1e-2},
                      FamilyCase{Family::kMlp1, Activation::kSigmoid, 1e-3, 1e-2},
                      FamilyCase{Family::kMlp1, Activation::kTanh, 1e-3, 1e-2}));

TEST(HessianTrace, ClosedFormExamples) {
  auto soft = Model::zeros(Family::kSoftmaxLinear, 2, 2);
  // f = (0.5, 0.5), ||X||^2 = 2.
  EXPECT_DOUBLE_EQ(hessian_trace(soft, one_row(Eigen::Vector2d(1.0, 1.0), 0.0), {0}), 1.0);
  auto lin = Model::zeros(Family::kLinearL2, 2);
  EXPECT_DOUBLE_EQ(hessian_trace(lin, one_row(Eigen::Vector2d(1.0, 1.0), 0.0, 0), {0}), 4.0);
  EXPECT_THROW(hessian_trace(lin, one_row(Eigen::Vector2d(1.0, 1.0), 0.0, 0), {}), DomainError);
}

TEST(Hvp, ZeroDirectionAndLinearity) {
  Rng rng(8);
  for (auto family : {Family::kSoftmaxLinear, Family::kLinearL2, Family::kMlp1}) {
    auto m = random_model(family, 3, 3, 4, rng);
    auto ds = testing::random_dataset(m, 20, rng);
    const auto all = ds.all_indices();
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(m.params.size());
    EXPECT_LE(hvp(m, ds, all, zero).norm(), 1e-12);
    Eigen::VectorXd v = testing::gaussian_vector(m.params.size(), rng);
    if (family == Family::kSoftmaxLinear) {
      EXPECT_LE(rel_error(hvp(m, ds, all, 2.5 * v), 2.5 * hvp(m, ds, all, v)), 1e-6);
    }
    EXPECT_THROW(hvp(m, ds, all, Eigen::VectorXd::Zero(2)), ShapeError);
  }
}

TEST(Hvp, SoftmaxAnalyticMatchesFiniteDifferences) {
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    auto m = random_model(Family::kSoftmaxLinear, 4, 3, 0, rng);
    auto ds = testing::random_dataset(m, 30, rng);
    Eigen::VectorXd v = testing::gaussian_vector(m.params.size(), rng);
    const auto all = ds.all_indices();
    EXPECT_LE(rel_error(hvp(m, ds, all, v), hvp_fd(m, ds, all, v)), 1e-4);
  }
}

TEST(Hvp, LinearFiniteDifferenceIsExactQuadratic) {
  Rng rng(10);
  auto m = random_model(Family::kLinearL2, 4, 1, 0, rng);
  auto ds = testing::random_dataset(m, 25, rng);
  Eigen::VectorXd v = testing::gaussian_vector(4, rng);
  Eigen::MatrixXd h = 2.0 * ds.features.transpose() * ds.features / 25.0;
  EXPECT_LE(rel_error(hvp(m, ds, ds.all_indices(), v), Eigen::VectorXd(h * v)), 1e-6);
}

TEST(BoundaryScore, ExtremesAndFamilies) {
  EXPECT_DOUBLE_EQ(boundary_score(Eigen::Vector2d(0.5, 0.5)), 0.5);
  EXPECT_DOUBLE_EQ(boundary_score(Eigen::Vector2d(1.0, 0.0)), 0.0);
  EXPECT_DOUBLE_EQ(boundary_score(Eigen::Vector4d::Constant(0.25)), 0.75);
  auto lin = Model::zeros(Family::kLinearL2, 2);
  EXPECT_THROW(boundary_score(lin, one_row(Eigen::Vector2d(1.0, 1.0), 0.0, 0), {0}),
               UnsupportedError);
}

TEST(BoundaryScore, SimplexGridExtremes) {
  for (int k = 2; k <= 4; ++k) {
    const double top = 1.0 - 1.0 / k;
    const Eigen::VectorXd uniform = Eigen::VectorXd::Constant(k, 1.0 / k);
    EXPECT_NEAR(boundary_score(uniform), top, 1e-15);
    for (const auto& p : testing::simplex_grid(k, 20)) {
      const double s = boundary_score(p);
      const bool vertex = p.maxCoeff() == 1.0;
      EXPECT_GE(s, 0.0);
      EXPECT_LE(s, top + 1e-15);
      if (vertex) {
        EXPECT_EQ(s, 0.0);
      } else {
        EXPECT_GT(s, 0.0);
      }
      if ((p - uniform).norm() > 1e-12) {
        EXPECT_LT(s, top - 1e-12);
      }
    }
  }
}

TEST(BoundaryScore, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  for (auto family : {Family::kSoftmaxLinear, Family::kMlp1}) {
    auto m = random_model(family, 3, 3, 4, rng);
    auto ds = testing::random_dataset(m, 15, rng);
    const auto all = ds.all_indices();
    Eigen::VectorXd fd(m.params.size());
    const double h = 1e-6;
    Model probe = m;
    for (Eigen::Index p = 0; p < fd.size(); ++p) {
      probe.params[p] = m.params[p] + h;
      const double up = boundary_score(probe, ds, all).mean;
      probe.params[p] = m.params[p] - h;
      const double down = boundary_score(probe, ds, all).mean;
      probe.params[p] = m.params[p];
      fd[p] = (up - down) / (2 * h);
    }
    EXPECT_LE(rel_error(boundary_score_grad(m, ds, all), fd), 1e-6);
  }
}

TEST(Proportionality, GradientNormScalesWithInputAtZero) {
  auto m = Model::zeros(Family::kSoftmaxLinear, 3, 3);
  const Eigen::Vector3d x(0.4, -1.2, 2.0);
  const double base = sample_grad(m, x, 1.0).norm();
  for (double c : {0.5, 2.0, 4.0, 8.0}) {
    EXPECT_EQ(sample_grad(m, Eigen::Vector3d(c * x), 1.0).norm(), c * base);
  }
  EXPECT_NEAR(sample_grad(m, Eigen::Vector3d(3.0 * x), 1.0).norm(), 3.0 * base, 1e-14);
}

TEST(Checkpoint, RoundTripIsExact) {
  Rng rng(12);
  auto m = random_model(Family::kMlp1, 3, 2, 4, rng, 1.0, Activation::kSigmoid);
  std::stringstream buf;
  save_model(buf, m);
  auto back = load_model(buf);
  EXPECT_EQ(back.family, m.family);
  EXPECT_EQ(back.hidden, 4u);
  EXPECT_EQ(back.activation, Activation::kSigmoid);
  EXPECT_EQ(back.params, m.params);
}

TEST(Checkpoint, RejectsForeignHeaders) {
  std::stringstream bad("something else\n1\n");
  EXPECT_THROW(load_model(bad), ParseError);
  std::stringstream truncated("dpfair-model v1 family=linear_l2 d=3 K=1 H=0 activation=tanh P=3\n1\n");
  EXPECT_THROW(load_model(truncated), ParseError);
}

}  // namespace
}  // namespace dpfair
