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
#pragma once

// Small dense networks with hand-written backward passes. Batches are stored
// column-wise: an input batch is (features x samples).

#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

#include "deft/common.hpp"
#include "json.hpp"

namespace deft::nn {

struct Dense {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out

  Eigen::Index in_dim() const { return weight.cols(); }
  Eigen::Index out_dim() const { return weight.rows(); }
  Eigen::Index size() const { return weight.size() + bias.size(); }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const {
    return (weight * x).colwise() + bias;
  }
};

/// Glorot-uniform weights, zero bias.
inline Dense make_dense(Eigen::Index in, Eigen::Index out, std::mt19937_64& rng) {
  Dense d;
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-limit, limit);
  d.weight.resize(out, in);
  for (Eigen::Index i = 0; i < d.weight.size(); ++i) d.weight.data()[i] = u(rng);
  d.bias = Eigen::VectorXd::Zero(out);
  return d;
}

inline Dense zeros_like(const Dense& d) {
  return {Eigen::MatrixXd::Zero(d.weight.rows(), d.weight.cols()), Eigen::VectorXd::Zero(d.bias.size())};
}

/// in -> hidden (tanh) -> out (linear).
struct Mlp {
  Dense hidden;
  Dense output;

  Eigen::Index size() const { return hidden.size() + output.size(); }
};

inline Mlp make_mlp(Eigen::Index in, Eigen::Index hidden, Eigen::Index out, std::mt19937_64& rng) {
  Mlp m;
  m.hidden = make_dense(in, hidden, rng);
  m.output = make_dense(hidden, out, rng);
  return m;
}

inline Mlp zeros_like(const Mlp& m) { return {zeros_like(m.hidden), zeros_like(m.output)}; }

struct MlpCache {
  Eigen::MatrixXd input;
  Eigen::MatrixXd activation;  // tanh(hidden pre-activation)
};

inline Eigen::MatrixXd forward(const Mlp& m, const Eigen::MatrixXd& x, MlpCache* cache = nullptr) {
  Eigen::MatrixXd h = m.hidden.forward(x).array().tanh().matrix();
  Eigen::MatrixXd y = m.output.forward(h);
  if (cache) {
    cache->input = x;
    cache->activation = std::move(h);
  }
  return y;
}

/// Accumulates parameter gradients into `grad`; returns dL/dinput.
inline Eigen::MatrixXd backward(const Mlp& m, const MlpCache& cache, const Eigen::MatrixXd& grad_out,
                                Mlp& grad) {
  grad.output.weight.noalias() += grad_out * cache.activation.transpose();
  grad.output.bias += grad_out.rowwise().sum();
  const Eigen::MatrixXd grad_h = m.output.weight.transpose() * grad_out;
  const Eigen::MatrixXd grad_pre =
      (grad_h.array() * (1.0 - cache.activation.array().square())).matrix();
  grad.hidden.weight.noalias() += grad_pre * cache.input.transpose();
  grad.hidden.bias += grad_pre.rowwise().sum();
  return m.hidden.weight.transpose() * grad_pre;
}

// Flat parameter views, used by the optimizer and gradient checks.

inline void pack(const Dense& d, Eigen::VectorXd& out, Eigen::Index& at) {
  out.segment(at, d.weight.size()) = Eigen::Map<const Eigen::VectorXd>(d.weight.data(), d.weight.size());
  at += d.weight.size();
  out.segment(at, d.bias.size()) = d.bias;
  at += d.bias.size();
}

inline void unpack(Dense& d, const Eigen::VectorXd& in, Eigen::Index& at) {
  Eigen::Map<Eigen::VectorXd>(d.weight.data(), d.weight.size()) = in.segment(at, d.weight.size());
  at += d.weight.size();
  d.bias = in.segment(at, d.bias.size());
  at += d.bias.size();
}

inline void pack(const Mlp& m, Eigen::VectorXd& out, Eigen::Index& at) {
  pack(m.hidden, out, at);
  pack(m.output, out, at);
}

inline void unpack(Mlp& m, const Eigen::VectorXd& in, Eigen::Index& at) {
  unpack(m.hidden, in, at);
  unpack(m.output, in, at);
}

/// Adam update on a flat parameter vector.
class Adam {
 public:
  explicit Adam(Eigen::Index n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(Eigen::VectorXd::Zero(n)), v_(Eigen::VectorXd::Zero(n)), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, double lr) {
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    params.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

 private:
  Eigen::VectorXd m_, v_;
  double beta1_, beta2_, eps_;
  int t_ = 0;
};

/// loss(params, grad_out) -> loss. grad_out is sized like params and overwritten.
using Objective = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

struct TrainTrace {
  std::vector<double> loss;  // best loss so far; loss[0] is the initial loss, then one entry per epoch
  int rising_epochs = 0;     // epochs whose iterate was worse than the previous one
};

/// Full-batch Adam with a cosine-annealed step on a deterministic objective.
/// The losses here have kinks (unsquared norms), so a monotone line search
/// stalls at them; instead the iterate may wander and the best one seen is
/// kept. `params` returns that best iterate and the trace is its loss.
inline TrainTrace minimize(Eigen::VectorXd& params, const Objective& objective, int epochs, double lr) {
  TrainTrace trace;
  Eigen::VectorXd grad(params.size());
  Eigen::VectorXd x = params;
  double loss = objective(x, grad);
  double best = loss;
  trace.loss.push_back(best);
  Adam adam(x.size());
  for (int e = 0; e < epochs; ++e) {
    const double step = 0.5 * lr * (1.0 + std::cos(std::numbers::pi * e / epochs));
    adam.step(x, grad, step);
    const double next = objective(x, grad);
    if (!std::isfinite(next)) break;
    if (next > loss) ++trace.rising_epochs;
    loss = next;
    if (loss < best) {
      best = loss;
      params = x;
    }
    trace.loss.push_back(best);
  }
  trace.loss.resize(static_cast<std::size_t>(epochs) + 1, best);
  return trace;
}

// Serialization

inline nlohmann::json to_json(const Dense& d) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < d.weight.rows(); ++r) {
    rows.push_back(to_std(d.weight.row(r).transpose()));
  }
  return {{"weight", rows}, {"bias", to_std(d.bias)}};
}

inline Dense dense_from_json(const nlohmann::json& j) {
  Dense d;
  const auto& rows = j.at("weight");
  const auto bias = j.at("bias").get<std::vector<double>>();
  const Eigen::Index out = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index in = out > 0 ? static_cast<Eigen::Index>(rows[0].size()) : 0;
  if (static_cast<Eigen::Index>(bias.size()) != out) {
    throw Error(ErrorKind::kParse, "dense layer: bias size does not match weight rows");
  }
  d.weight.resize(out, in);
  for (Eigen::Index r = 0; r < out; ++r) {
    const auto row = rows[r].get<std::vector<double>>();
    if (static_cast<Eigen::Index>(row.size()) != in) throw Error(ErrorKind::kParse, "dense layer: ragged weight");
    for (Eigen::Index c = 0; c < in; ++c) d.weight(r, c) = row[c];
  }
  d.bias = Eigen::Map<const Eigen::VectorXd>(bias.data(), out);
  return d;
}

inline nlohmann::json to_json(const Mlp& m) { return {{"hidden", to_json(m.hidden)}, {"output", to_json(m.output)}}; }

inline Mlp mlp_from_json(const nlohmann::json& j) {
  Mlp m{dense_from_json(j.at("hidden")), dense_from_json(j.at("output"))};
  if (m.output.in_dim() != m.hidden.out_dim()) throw Error(ErrorKind::kParse, "mlp: layer shapes disagree");
  return m;
}

}  // namespace deft::nn
