// Copyright 2026 The DEFT Toolkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "deft/nn.hpp"

using namespace deft;

namespace {

double rel_err(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}); }

// 0.5 * ||W2 tanh(W1 x + b1) + b2 - y||^2 summed over columns, by explicit loops.
double reference_loss(const nn::Mlp& m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  double total = 0.0;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    std::vector<double> h(m.hidden.out_dim());
    for (Eigen::Index i = 0; i < m.hidden.out_dim(); ++i) {
      double s = m.hidden.bias[i];
      for (Eigen::Index j = 0; j < x.rows(); ++j) s += m.hidden.weight(i, j) * x(j, c);
      h[i] = std::tanh(s);
    }
    for (Eigen::Index i = 0; i < m.output.out_dim(); ++i) {
      double s = m.output.bias[i];
      for (Eigen::Index j = 0; j < m.hidden.out_dim(); ++j) s += m.output.weight(i, j) * h[j];
      total += 0.5 * (s - y(i, c)) * (s - y(i, c));
    }
  }
  return total;
}

}  // namespace

TEST(Mlp, ForwardMatchesReference) {
  std::mt19937_64 rng(1);
  const nn::Mlp m = nn::make_mlp(3, 5, 2, rng);
  const Eigen::MatrixXd x = Eigen::MatrixXd::Random(3, 4);
  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(2, 4);
  const Eigen::MatrixXd y = nn::forward(m, x);
  EXPECT_NEAR(0.5 * y.squaredNorm(), reference_loss(m, x, zero), 1e-12);
}

TEST(Mlp, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  nn::Mlp m = nn::make_mlp(4, 6, 3, rng);
  m.hidden.bias.setRandom();
  m.output.bias.setRandom();
  const Eigen::MatrixXd x = Eigen::MatrixXd::Random(4, 5);
  const Eigen::MatrixXd y = Eigen::MatrixXd::Random(3, 5);

  nn::MlpCache cache;
  const Eigen::MatrixXd out = nn::forward(m, x, &cache);
  nn::Mlp g = nn::zeros_like(m);
  const Eigen::MatrixXd gx = nn::backward(m, cache, out - y, g);

  Eigen::VectorXd flat(m.size()), gflat(m.size());
  Eigen::Index at = 0;
  nn::pack(m, flat, at);
  at = 0;
  nn::pack(g, gflat, at);
  const double h = 1e-5;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < flat.size(); ++i) {
    nn::Mlp a = m, b = m;
    Eigen::VectorXd fa = flat, fb = flat;
    fa[i] += h;
    fb[i] -= h;
    at = 0;
    nn::unpack(a, fa, at);
    at = 0;
    nn::unpack(b, fb, at);
    worst = std::max(worst, rel_err(gflat[i], (reference_loss(a, x, y) - reference_loss(b, x, y)) / (2 * h)));
  }
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Eigen::MatrixXd xa = x, xb = x;
    xa.data()[i] += h;
    xb.data()[i] -= h;
    worst = std::max(worst, rel_err(gx.data()[i], (reference_loss(m, xa, y) - reference_loss(m, xb, y)) / (2 * h)));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Mlp, PackUnpackRoundTrip) {
  std::mt19937_64 rng(3);
  const nn::Mlp m = nn::make_mlp(2, 3, 4, rng);
  Eigen::VectorXd flat(m.size());
  Eigen::Index at = 0;
  nn::pack(m, flat, at);
  EXPECT_EQ(at, m.size());
  nn::Mlp z = nn::zeros_like(m);
  at = 0;
  nn::unpack(z, flat, at);
  EXPECT_EQ(z.hidden.weight, m.hidden.weight);
  EXPECT_EQ(z.output.bias, m.output.bias);
}

TEST(Mlp, JsonRoundTrip) {
  std::mt19937_64 rng(4);
  const nn::Mlp m = nn::make_mlp(3, 4, 2, rng);
  const nn::Mlp back = nn::mlp_from_json(nlohmann::json::parse(nn::to_json(m).dump()));
  EXPECT_EQ(back.hidden.weight, m.hidden.weight);
  EXPECT_EQ(back.output.weight, m.output.weight);
}

TEST(Minimize, QuadraticConvergesMonotonically) {
  Eigen::VectorXd p = Eigen::VectorXd::Constant(3, 5.0);
  const Eigen::VectorXd target(Eigen::Vector3d(1.0, -2.0, 0.5));
  auto f = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    g = 2.0 * (x - target);
    return (x - target).squaredNorm();
  };
  const auto trace = nn::minimize(p, f, 3000, 0.1);
  EXPECT_LT((p - target).norm(), 1e-3);
  ASSERT_EQ(trace.loss.size(), 3001u);
  for (std::size_t i = 1; i < trace.loss.size(); ++i) EXPECT_LE(trace.loss[i], trace.loss[i - 1]);
}

TEST(Minimize, DeterministicTrace) {
  auto run = [] {
    Eigen::VectorXd p = Eigen::VectorXd::LinSpaced(4, -1.0, 1.0);
    auto f = [](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
      g = (4.0 * x.array().cube()).matrix();
      return x.array().pow(4).sum();
    };
    return nn::minimize(p, f, 200, 0.05).loss;
  };
  EXPECT_EQ(run(), run());
}
