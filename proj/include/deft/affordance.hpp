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

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "deft/common.hpp"
#include "deft/nn.hpp"
#include "json.hpp"

namespace deft::affordance {

/// Grasp parameters: contact location (m), wrist Euler XYZ (rad), hand joints (rad).
struct GraspParams {
  Vec3 mu = Vec3::Zero();
  Vec3 theta_wrist = Vec3::Zero();
  HandJoints pose = HandJoints::Zero();

  ParamVector to_vector() const {
    ParamVector v;
    v << mu, theta_wrist, pose;
    return v;
  }

  static GraspParams from_vector(const ParamVector& v) {
    GraspParams g;
    g.mu = v.segment<kContactDim>(kContactOffset);
    g.theta_wrist = v.segment<kWristDim>(kWristOffset);
    g.pose = v.segment<kHandJointDim>(kHandOffset);
    return g;
  }

  bool finite() const { return mu.allFinite() && theta_wrist.allFinite() && pose.allFinite(); }

  friend bool operator==(const GraspParams& a, const GraspParams& b) {
    return a.to_vector() == b.to_vector();
  }
};

inline nlohmann::json to_json(const GraspParams& g) {
  return {{"mu", to_std(g.mu)}, {"theta_wrist", to_std(g.theta_wrist)}, {"pose", to_std(g.pose)}};
}

inline GraspParams grasp_params_from_json(const nlohmann::json& j) {
  auto read = [&](const char* key, std::size_t n) {
    const auto v = j.at(key).get<std::vector<double>>();
    if (v.size() != n) throw Error(ErrorKind::kParse, std::string("grasp params: bad length for ") + key);
    return v;
  };
  GraspParams g;
  const auto mu = read("mu", 3);
  const auto th = read("theta_wrist", 3);
  const auto p = read("pose", kHandJointDim);
  g.mu = Vec3(mu[0], mu[1], mu[2]);
  g.theta_wrist = Vec3(th[0], th[1], th[2]);
  g.pose = Eigen::Map<const HandJoints>(p.data());
  return g;
}

// ---------------------------------------------------------------------------
// Contact-point mixture model

enum class Frame { kImage, kWorkspace };

struct ContactSet {
  Eigen::MatrixXd points;  // N x D, D = 2 (pixels) or 3 (meters)
  Frame frame = Frame::kImage;

  Eigen::Index size() const { return points.rows(); }
  Eigen::Index dim() const { return points.cols(); }
};

inline constexpr double kVarianceFloor = 1e-6;

struct GmmModel {
  Eigen::VectorXd weights;     // k
  Eigen::MatrixXd means;       // k x D
  Eigen::MatrixXd variances;   // k x D, diagonal covariances

  Eigen::Index components() const { return weights.size(); }

  double log_likelihood(const Eigen::MatrixXd& points) const;

  /// Weighted mean of component means: the single contact point the model reports.
  Eigen::VectorXd contact_point() const { return means.transpose() * weights; }
};

namespace detail {

inline double log_gaussian_diag(const Eigen::Ref<const Eigen::RowVectorXd>& x,
                                const Eigen::Ref<const Eigen::RowVectorXd>& mean,
                                const Eigen::Ref<const Eigen::RowVectorXd>& var) {
  const double two_pi = 2.0 * std::numbers::pi;
  return -0.5 * ((x - mean).array().square() / var.array() + (two_pi * var.array()).log()).sum();
}

/// Per-point component log joint densities (N x k).
inline Eigen::MatrixXd log_joint(const GmmModel& m, const Eigen::MatrixXd& pts) {
  Eigen::MatrixXd lj(pts.rows(), m.components());
  for (Eigen::Index c = 0; c < m.components(); ++c) {
    const double lw = m.weights[c] > 0.0 ? std::log(m.weights[c]) : -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      lj(i, c) = lw + log_gaussian_diag(pts.row(i), m.means.row(c), m.variances.row(c));
    }
  }
  return lj;
}

inline double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  const double mx = row.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((row.array() - mx).exp().sum());
}

}  // namespace detail

inline double GmmModel::log_likelihood(const Eigen::MatrixXd& points) const {
  const Eigen::MatrixXd lj = detail::log_joint(*this, points);
  double ll = 0.0;
  for (Eigen::Index i = 0; i < lj.rows(); ++i) ll += detail::log_sum_exp(lj.row(i));
  return ll;
}

struct GmmFit {
  GmmModel model;
  std::vector<double> log_likelihood;  // before each EM iteration, plus the final value
};

/// EM for a diagonal-covariance mixture with k-means++ seeding. Variances are
/// floored at kVarianceFloor; the floored update is the constrained maximizer,
/// so the likelihood trace stays non-decreasing.
inline GmmFit fit_gmm(const ContactSet& set, int k, int iters, std::uint64_t seed) {
  const Eigen::MatrixXd& x = set.points;
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  if (k < 1) throw Error(ErrorKind::kPrecondition, "fit_gmm: k must be >= 1");
  if (n < k) {
    throw Error(ErrorKind::kInsufficientPoints,
                "fit_gmm: " + std::to_string(n) + " points for " + std::to_string(k) + " components");
  }
  if (!x.allFinite()) throw Error(ErrorKind::kPrecondition, "fit_gmm: non-finite contact points");

  GmmFit fit;
  GmmModel& m = fit.model;

  const Eigen::RowVectorXd centroid = x.colwise().mean();
  const bool degenerate = ((x.rowwise() - centroid).array().abs().maxCoeff() == 0.0);
  if (degenerate) {
    m.weights = Eigen::VectorXd::Ones(1);
    m.means = centroid;
    m.variances = Eigen::MatrixXd::Constant(1, d, kVarianceFloor);
    fit.log_likelihood.push_back(m.log_likelihood(x));
    return fit;
  }

  // k-means++ seeding.
  std::mt19937_64 rng(seed);
  m.means.resize(k, d);
  m.means.row(0) = x.row(std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng));
  Eigen::VectorXd d2 = (x.rowwise() - m.means.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    Eigen::Index pick = 0;
    if (d2.sum() > 0.0) {
      std::discrete_distribution<Eigen::Index> dd(d2.data(), d2.data() + n);
      pick = dd(rng);
    } else {
      pick = std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng);
    }
    m.means.row(c) = x.row(pick);
    d2 = d2.cwiseMin((x.rowwise() - m.means.row(c)).rowwise().squaredNorm());
  }
  const Eigen::RowVectorXd global_var =
      ((x.rowwise() - centroid).array().square().colwise().sum() / static_cast<double>(n))
          .max(kVarianceFloor)
          .matrix();
  m.variances = global_var.replicate(k, 1);
  m.weights = Eigen::VectorXd::Constant(k, 1.0 / k);

  Eigen::MatrixXd resp(n, k);
  for (int it = 0; it <= iters; ++it) {
    // E-step.
    const Eigen::MatrixXd lj = detail::log_joint(m, x);
    double ll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double lse = detail::log_sum_exp(lj.row(i));
      ll += lse;
      resp.row(i) = (lj.row(i).array() - lse).exp();
    }
    fit.log_likelihood.push_back(ll);
    if (it == iters) break;

    // M-step.
    const Eigen::VectorXd nk = resp.colwise().sum().transpose();
    for (int c = 0; c < k; ++c) {
      m.weights[c] = nk[c] / static_cast<double>(n);
      if (nk[c] <= 0.0) continue;
      const Eigen::RowVectorXd mean = (resp.col(c).transpose() * x) / nk[c];
      const Eigen::MatrixXd centered = x.rowwise() - mean;
      const Eigen::RowVectorXd var =
          (resp.col(c).transpose() * centered.array().square().matrix()) / nk[c];
      m.means.row(c) = mean;
      m.variances.row(c) = var.array().max(kVarianceFloor).matrix();
    }
    m.weights /= m.weights.sum();
  }
  return fit;
}

inline nlohmann::json to_json(const GmmModel& m) {
  nlohmann::json comps = nlohmann::json::array();
  for (Eigen::Index c = 0; c < m.components(); ++c) {
    comps.push_back({{"weight", m.weights[c]},
                     {"mean", to_std(m.means.row(c).transpose())},
                     {"variance", to_std(m.variances.row(c).transpose())}});
  }
  return {{"kind", "diagonal-gmm"}, {"components", comps}, {"contact_point", to_std(m.contact_point())}};
}

inline GmmModel gmm_from_json(const nlohmann::json& j) {
  const auto& comps = j.at("components");
  GmmModel m;
  const Eigen::Index k = static_cast<Eigen::Index>(comps.size());
  if (k == 0) throw Error(ErrorKind::kParse, "gmm: no components");
  const Eigen::Index d = static_cast<Eigen::Index>(comps[0].at("mean").size());
  m.weights.resize(k);
  m.means.resize(k, d);
  m.variances.resize(k, d);
  for (Eigen::Index c = 0; c < k; ++c) {
    const auto mean = comps[c].at("mean").get<std::vector<double>>();
    const auto var = comps[c].at("variance").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(mean.size()) != d || static_cast<Eigen::Index>(var.size()) != d) {
      throw Error(ErrorKind::kParse, "gmm: inconsistent component dimension");
    }
    m.weights[c] = comps[c].at("weight").get<double>();
    m.means.row(c) = Eigen::Map<const Eigen::RowVectorXd>(mean.data(), d);
    m.variances.row(c) = Eigen::Map<const Eigen::RowVectorXd>(var.data(), d);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Heatmaps and camera geometry

/// Affine grid-to-metric mapping: metric = origin + cell_size * (col, row).
struct GridMapping {
  Eigen::Vector2d origin = Eigen::Vector2d::Zero();
  double cell_size = 1.0;
};

struct Heatmap {
  Eigen::MatrixXd scores;  // H x W
  GridMapping mapping;

  void validate() const {
    if (scores.size() == 0 || !scores.allFinite() || scores.minCoeff() < 0.0 || !(scores.maxCoeff() > 0.0)) {
      throw Error(ErrorKind::kPrecondition, "heatmap must be finite, non-negative, and not all zero");
    }
  }

  Eigen::Vector2d to_metric(const Eigen::Vector2d& grid) const {
    return mapping.origin + mapping.cell_size * Eigen::Vector2d(grid.y(), grid.x());
  }
};

/// Expected (row, col) under softmax(scores / temperature).
inline Eigen::Vector2d spatial_softargmax(const Heatmap& h, double temperature = 1.0) {
  h.validate();
  if (!(temperature > 0.0)) throw Error(ErrorKind::kPrecondition, "temperature must be positive");
  const Eigen::ArrayXXd logits = h.scores.array() / temperature;
  const Eigen::ArrayXXd p = (logits - logits.maxCoeff()).exp();
  const double z = p.sum();
  double row = 0.0;
  double col = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      row += p(i, j) * static_cast<double>(i);
      col += p(i, j) * static_cast<double>(j);
    }
  }
  return {row / z, col / z};
}

struct CameraIntrinsics {
  double fx = 600.0;
  double fy = 600.0;
  double cx = 320.0;
  double cy = 240.0;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw Error(ErrorKind::kPrecondition, "focal lengths must be positive");
  }
};

/// Pinhole back-projection of pixel (u, v) at the given depth.
inline Vec3 deproject(const Eigen::Vector2d& pixel, double depth, const CameraIntrinsics& k) {
  k.validate();
  if (!(depth > 0.0) || !std::isfinite(depth)) {
    throw Error(ErrorKind::kInvalidDepth, "deproject: depth must be positive, got " + std::to_string(depth));
  }
  return {(pixel.x() - k.cx) * depth / k.fx, (pixel.y() - k.cy) * depth / k.fy, depth};
}

inline Eigen::Vector2d project(const Vec3& point, const CameraIntrinsics& k) {
  k.validate();
  if (!(point.z() > 0.0)) throw Error(ErrorKind::kInvalidDepth, "project: point behind camera");
  return {k.fx * point.x() / point.z() + k.cx, k.fy * point.y() / point.z() + k.cy};
}

// ---------------------------------------------------------------------------
// Grasp-prior loss

struct LossWeights {
  double mu = 1.0;
  double theta = 0.1;
  double pose = 0.1;
};

struct LossResult {
  double loss = 0.0;
  ParamVector grad = ParamVector::Zero();  // d loss / d pred
};

/// Weighted sum of unsquared L2 errors per block. The gradient of a block
/// whose error is exactly zero is taken as zero.
inline LossResult grasp_loss(const GraspParams& pred, const GraspParams& target, const LossWeights& w = {}) {
  LossResult out;
  const ParamVector diff = pred.to_vector() - target.to_vector();
  auto block = [&](int offset, int len, double weight) {
    const auto seg = diff.segment(offset, len);
    const double n = seg.norm();
    out.loss += weight * n;
    if (n > 0.0) out.grad.segment(offset, len) = weight * seg / n;
  };
  block(kContactOffset, kContactDim, w.mu);
  block(kWristOffset, kWristDim, w.theta);
  block(kHandOffset, kHandJointDim, w.pose);
  return out;
}

// ---------------------------------------------------------------------------
// Toy trainable head

inline constexpr int kToyHeadHidden = 64;

struct ToyAffordanceHead {
  nn::Mlp net;  // F -> 64 (tanh) -> 22

  Eigen::Index feature_dim() const { return net.hidden.in_dim(); }

  GraspParams predict(const FeatureVector& features) const {
    if (features.size() != feature_dim()) {
      throw Error(ErrorKind::kDimensionMismatch, "toy head: feature dimension mismatch");
    }
    const Eigen::MatrixXd y = nn::forward(net, features);
    return GraspParams::from_vector(y.col(0));
  }
};

inline nlohmann::json to_json(const ToyAffordanceHead& head) {
  return {{"kind", "toy-affordance-head"}, {"version", 1}, {"net", nn::to_json(head.net)}};
}

inline ToyAffordanceHead toy_head_from_json(const nlohmann::json& j) {
  ToyAffordanceHead head{nn::mlp_from_json(j.at("net"))};
  if (head.net.output.out_dim() != kParamDim) throw Error(ErrorKind::kParse, "toy head: output must be 22-dim");
  return head;
}

struct AffordanceSample {
  FeatureVector features;
  GraspParams target;
};

struct ToyHeadTraining {
  ToyAffordanceHead head;
  nn::TrainTrace trace;
};

/// Mean grasp_loss over the dataset, with gradient w.r.t. the flat head parameters.
inline double toy_head_objective(const ToyAffordanceHead& head, std::span<const AffordanceSample> data,
                                 const LossWeights& w, Eigen::VectorXd* grad_flat) {
  const Eigen::Index n = static_cast<Eigen::Index>(data.size());
  Eigen::MatrixXd x(head.feature_dim(), n);
  for (Eigen::Index i = 0; i < n; ++i) x.col(i) = data[i].features;
  nn::MlpCache cache;
  const Eigen::MatrixXd y = nn::forward(head.net, x, &cache);
  Eigen::MatrixXd gy(kParamDim, n);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const LossResult r = grasp_loss(GraspParams::from_vector(y.col(i)), data[i].target, w);
    loss += r.loss;
    gy.col(i) = r.grad / static_cast<double>(n);
  }
  if (grad_flat) {
    nn::Mlp g = nn::zeros_like(head.net);
    nn::backward(head.net, cache, gy, g);
    grad_flat->resize(g.size());
    Eigen::Index at = 0;
    nn::pack(g, *grad_flat, at);
  }
  return loss / static_cast<double>(n);
}

inline ToyHeadTraining train_toy_head(std::span<const AffordanceSample> data, const LossWeights& w, int epochs,
                                      double lr, std::uint64_t seed) {
  if (data.empty()) throw Error(ErrorKind::kEmptyDataset, "train_toy_head: empty dataset");
  const Eigen::Index f = data.front().features.size();
  for (const auto& s : data) {
    if (s.features.size() != f) throw Error(ErrorKind::kDimensionMismatch, "train_toy_head: inconsistent feature dim");
  }
  std::mt19937_64 rng(seed);
  ToyHeadTraining out;
  out.head.net = nn::make_mlp(f, kToyHeadHidden, kParamDim, rng);
  Eigen::VectorXd params(out.head.net.size());
  Eigen::Index at = 0;
  nn::pack(out.head.net, params, at);

  ToyAffordanceHead scratch = out.head;
  auto objective = [&](const Eigen::VectorXd& p, Eigen::VectorXd& g) {
    Eigen::Index pos = 0;
    nn::unpack(scratch.net, p, pos);
    return toy_head_objective(scratch, data, w, &g);
  };
  out.trace = nn::minimize(params, objective, epochs, lr);
  at = 0;
  nn::unpack(out.head.net, params, at);
  return out;
}

// ---------------------------------------------------------------------------
// Prior sources

/// What a policy or prior sees of a scene. `object_position` is carried for
/// the environment and schematic rendering only.
struct Observation {
  std::uint64_t id = 0;
  FeatureVector features;
  Vec3 object_position = Vec3::Zero();
};

class PriorSource {
 public:
  virtual ~PriorSource() = default;
  virtual GraspParams predict(const Observation& obs) const = 0;
  virtual std::string kind() const = 0;
};

/// Precomputed predictions keyed by observation id.
class TablePrior final : public PriorSource {
 public:
  explicit TablePrior(std::map<std::uint64_t, GraspParams> rows) : rows_(std::move(rows)) {}

  /// JSONL rows: {"id": <int>, "mu": [3], "theta_wrist": [3], "pose": [16]}.
  static TablePrior load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::kIo, "cannot open prior table " + path);
    std::map<std::uint64_t, GraspParams> rows;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        rows[j.at("id").get<std::uint64_t>()] = grasp_params_from_json(j);
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::kParse, path + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    return TablePrior(std::move(rows));
  }

  GraspParams predict(const Observation& obs) const override {
    const auto it = rows_.find(obs.id);
    if (it == rows_.end()) {
      throw Error(ErrorKind::kMissingPrior, "no prior row for observation id " + std::to_string(obs.id));
    }
    return it->second;
  }

  std::string kind() const override { return "table"; }

 private:
  std::map<std::uint64_t, GraspParams> rows_;
};

/// Hidden optimum plus a fixed bias; the optimum lookup is supplied by the environment.
class BiasedOraclePrior final : public PriorSource {
 public:
  using OptimumFn = std::function<ParamVector(const Observation&)>;

  BiasedOraclePrior(OptimumFn optimum, const ParamVector& bias) : optimum_(std::move(optimum)), bias_(bias) {}

  GraspParams predict(const Observation& obs) const override {
    return GraspParams::from_vector(optimum_(obs) + bias_);
  }

  std::string kind() const override { return "synthetic"; }

 private:
  OptimumFn optimum_;
  ParamVector bias_;
};

class HeadPrior final : public PriorSource {
 public:
  explicit HeadPrior(ToyAffordanceHead head) : head_(std::move(head)) {}

  GraspParams predict(const Observation& obs) const override { return head_.predict(obs.features); }

  std::string kind() const override { return "toy-head"; }

 private:
  ToyAffordanceHead head_;
};

inline GraspParams prior_predict(const PriorSource& source, const Observation& obs) {
  return source.predict(obs);
}

}  // namespace deft::affordance
