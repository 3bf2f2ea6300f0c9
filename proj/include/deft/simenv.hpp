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

// Synthetic grasp environment. Each task instance hides an optimal grasp;
// the reward is a Gaussian bump around it, scaled by how well the replayed
// post-grasp trajectory matches the demonstration.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "deft/affordance.hpp"
#include "deft/common.hpp"
#include "deft/finetune.hpp"
#include "deft/kinematics.hpp"
#include "json.hpp"

namespace deft::simenv {

using affordance::GraspParams;
using affordance::Observation;
using kinematics::Rotation;
using kinematics::WristDelta;

inline constexpr std::array<const char*, 9> kTaskIds{
    "pick-cup",   "pour-cup",    "open-drawer", "pick-spoon",    "scoop-grape",
    "stir-spoon", "pick-grape",  "flip-bagel",  "squeeze-lemon"};
inline constexpr int kTaskCount = static_cast<int>(kTaskIds.size());

inline int task_index(const std::string& id) {
  for (int i = 0; i < kTaskCount; ++i) {
    if (id == kTaskIds[i]) return i;
  }
  throw Error(ErrorKind::kConfig, "unknown task id '" + id + "'");
}

/// Observation-id ranges: fine-tuning episodes and evaluation trials never share instances.
inline constexpr std::uint64_t kEpisodesPerSeed = 1'000'000;
inline constexpr std::uint64_t kTestSeedBase = std::uint64_t{1} << 40;

inline std::uint64_t train_instance_seed(std::uint64_t session_seed, int episode) {
  return session_seed * kEpisodesPerSeed + static_cast<std::uint64_t>(episode);
}

inline std::uint64_t test_instance_seed(std::uint64_t eval_seed, int trial) {
  return kTestSeedBase + eval_seed * kEpisodesPerSeed + static_cast<std::uint64_t>(trial);
}

struct LengthScales {
  double mu = 0.03;          // m
  double theta = 0.3;        // rad
  double pose = 0.4;         // rad
  double trajectory = 0.02;  // m, trajectory endpoint translation
};

struct WorkspaceBox {
  Vec3 lo = Vec3(0.30, -0.20, 0.0);
  Vec3 hi = Vec3(0.60, 0.20, 0.0);

  Vec3 center() const { return 0.5 * (lo + hi); }
};

struct TaskSpec {
  std::string id = "pick-cup";
  Vec3 grasp_offset = Vec3(0.0, 0.0, 0.05);  // canonical contact relative to the object
  Vec3 theta = Vec3::Zero();                 // canonical wrist Euler XYZ
  HandJoints pose = HandJoints::Zero();      // canonical hand joints
  LengthScales scales;
  double success_threshold = 0.5;
  std::string trajectory_file;
  std::vector<WristDelta> trajectory;  // demonstration deltas
  ParamVector prior_bias = ParamVector::Zero();
  WorkspaceBox workspace;
  double object_radius = 0.04;

  void validate() const {
    task_index(id);
    if (!(scales.mu > 0.0) || !(scales.theta > 0.0) || !(scales.pose > 0.0) || !(scales.trajectory > 0.0)) {
      throw Error(ErrorKind::kConfig, "task " + id + ": length-scales must be positive");
    }
    if (!(success_threshold > 0.0 && success_threshold < 1.0)) {
      throw Error(ErrorKind::kConfig, "task " + id + ": success threshold must be in (0, 1)");
    }
    if ((workspace.hi - workspace.lo).minCoeff() < 0.0) {
      throw Error(ErrorKind::kConfig, "task " + id + ": workspace hi < lo");
    }
  }
};

struct TaskInstance {
  TaskSpec spec;
  std::uint64_t seed = 0;
  Vec3 object_position = Vec3::Zero();
  GraspParams optimum;  // hidden from policies and the API
};

inline GraspParams compose_optimum(const TaskSpec& spec, const Vec3& object_position) {
  GraspParams g;
  g.mu = object_position + spec.grasp_offset;
  g.theta_wrist = spec.theta;
  g.pose = spec.pose;
  return g;
}

inline TaskInstance make_instance_at(const TaskSpec& spec, const Vec3& object_position, std::uint64_t seed) {
  TaskInstance inst;
  inst.spec = spec;
  inst.seed = seed;
  inst.object_position = object_position;
  inst.optimum = compose_optimum(spec, object_position);
  return inst;
}

/// Object placed uniformly in the workspace box.
inline TaskInstance make_instance(const TaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vec3 p;
  for (int i = 0; i < 3; ++i) {
    const double draw = u(rng);
    p[i] = spec.workspace.lo[i] + draw * (spec.workspace.hi[i] - spec.workspace.lo[i]);
  }
  return make_instance_at(spec, p, seed);
}

/// Object at the workspace center; source of the embedding-reward goal.
inline TaskInstance canonical_instance(const TaskSpec& spec) {
  return make_instance_at(spec, spec.workspace.center(), 0);
}

// ---------------------------------------------------------------------------
// Features

/// Fixed random projections standing in for an image encoder. Initial
/// features encode the object position and task; final features encode the
/// object motion achieved by the episode.
class FeatureSynthesizer {
 public:
  static constexpr int kDefaultDim = 32;
  static constexpr int kMotionDim = 6;

  explicit FeatureSynthesizer(int dim = kDefaultDim, std::uint64_t seed = 0x5eedf00d, double noise = 0.01)
      : noise_(noise) {
    if (dim < 1) throw Error(ErrorKind::kConfig, "feature dimension must be >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    scene_.resize(dim, 3 + kTaskCount);
    motion_.resize(dim, kMotionDim + kTaskCount);
    for (Eigen::Index i = 0; i < scene_.size(); ++i) scene_.data()[i] = n(rng);
    for (Eigen::Index i = 0; i < motion_.size(); ++i) motion_.data()[i] = n(rng);
  }

  int dim() const { return static_cast<int>(scene_.rows()); }
  double noise() const { return noise_; }
  const Eigen::MatrixXd& scene_projection() const { return scene_; }

  FeatureVector features(const TaskInstance& inst) const {
    Eigen::VectorXd in = Eigen::VectorXd::Zero(3 + kTaskCount);
    in.head<3>() = inst.object_position;
    in[3 + task_index(inst.spec.id)] = 1.0;
    FeatureVector f = scene_ * in;
    std::mt19937_64 rng(inst.seed ^ 0x9e3779b97f4a7c15ull);
    std::normal_distribution<double> n(0.0, noise_);
    for (Eigen::Index i = 0; i < f.size(); ++i) f[i] += n(rng);
    return f;
  }

  /// `motion` is the (translation, rotation-vector) the object underwent.
  FeatureVector final_features(const std::string& task_id, const Eigen::Matrix<double, kMotionDim, 1>& motion) const {
    Eigen::VectorXd in = Eigen::VectorXd::Zero(kMotionDim + kTaskCount);
    in.head<kMotionDim>() = motion;
    in[kMotionDim + task_index(task_id)] = 1.0;
    return motion_ * in;
  }

 private:
  Eigen::MatrixXd scene_;
  Eigen::MatrixXd motion_;
  double noise_;
};

inline FeatureVector synth_features(const TaskInstance& inst, const FeatureSynthesizer& synth) {
  return synth.features(inst);
}

// ---------------------------------------------------------------------------
// Rollout

struct RolloutResult {
  double reward = 0.0;
  FeatureVector final_features;
  bool success = false;
};

inline double grasp_exponent(const TaskInstance& inst, const GraspParams& g) {
  const LengthScales& s = inst.spec.scales;
  const double dmu = (g.mu - inst.optimum.mu).squaredNorm();
  const double dang = Rotation::from_euler_xyz(g.theta_wrist)
                          .angular_distance(Rotation::from_euler_xyz(inst.optimum.theta_wrist));
  const double dpose = (g.pose - inst.optimum.pose).squaredNorm();
  return dmu / (2.0 * s.mu * s.mu) + dang * dang / (2.0 * s.theta * s.theta) + dpose / (2.0 * s.pose * s.pose);
}

/// In (0, 1]: endpoint agreement between the replayed and demonstrated trajectories.
inline double trajectory_factor(const TaskSpec& spec, std::span<const WristDelta> replayed) {
  const auto a = kinematics::trajectory_endpoint(replayed);
  const auto b = kinematics::trajectory_endpoint(spec.trajectory);
  const double dp = (a.position - b.position).squaredNorm();
  const double da = a.orientation.angular_distance(b.orientation);
  return std::exp(-(dp / (2.0 * spec.scales.trajectory * spec.scales.trajectory) +
                    da * da / (2.0 * spec.scales.theta * spec.scales.theta)));
}

/// Net (translation, rotation vector) of a delta chain.
inline Eigen::Matrix<double, 6, 1> trajectory_motion(std::span<const WristDelta> deltas) {
  const auto end = kinematics::trajectory_endpoint(deltas);
  Eigen::Matrix<double, 6, 1> m;
  m << end.position, end.orientation.to_rotation_vector();
  return m;
}

inline RolloutResult rollout(const TaskInstance& inst, const GraspParams& grasp, std::span<const WristDelta> trajectory,
                             const FeatureSynthesizer& synth) {
  if (!grasp.finite()) throw Error(ErrorKind::kPrecondition, "rollout: non-finite grasp parameters");
  RolloutResult out;
  out.reward = std::exp(-grasp_exponent(inst, grasp)) * trajectory_factor(inst.spec, trajectory);
  out.success = out.reward >= inst.spec.success_threshold;
  out.final_features = synth.final_features(inst.spec.id, out.reward * trajectory_motion(trajectory));
  return out;
}

/// exp(-||final - goal|| / scale): monotone in the negative embedding distance.
inline double embedding_reward(const FeatureVector& final_features, const FeatureVector& goal, double scale) {
  if (final_features.size() != goal.size()) {
    throw Error(ErrorKind::kDimensionMismatch, "embedding_reward: feature dimensions differ");
  }
  if (!(scale > 0.0)) throw Error(ErrorKind::kPrecondition, "embedding_reward: scale must be positive");
  return std::exp(-(final_features - goal).norm() / scale);
}

/// Goal embedding from executing the optimum on the canonical instance.
inline FeatureVector embedding_goal(const TaskSpec& spec, const FeatureSynthesizer& synth) {
  const TaskInstance inst = canonical_instance(spec);
  return rollout(inst, inst.optimum, spec.trajectory, synth).final_features;
}

/// Distance between the goal and a zero-reward outcome; a natural reward scale.
inline double embedding_span(const TaskSpec& spec, const FeatureSynthesizer& synth) {
  const Eigen::Matrix<double, 6, 1> zero = Eigen::Matrix<double, 6, 1>::Zero();
  return (synth.final_features(spec.id, zero) - embedding_goal(spec, synth)).norm();
}

// ---------------------------------------------------------------------------
// Schematic

struct Schematic {
  Eigen::Vector2d workspace_lo = Eigen::Vector2d::Zero();
  Eigen::Vector2d workspace_hi = Eigen::Vector2d::Zero();
  Eigen::Vector2d object_center = Eigen::Vector2d::Zero();
  double object_radius = 0.0;
  Eigen::Vector2d contact = Eigen::Vector2d::Zero();
  Eigen::Vector2d wrist_from = Eigen::Vector2d::Zero();
  Eigen::Vector2d wrist_to = Eigen::Vector2d::Zero();
  std::array<double, kinematics::kRobotFingerCount> finger_closure{};
};

inline constexpr double kWristArrowLength = 0.05;

/// Top-down projection of the scene and grasp; every point is clamped into the workspace.
inline Schematic render_schematic(const TaskInstance& inst, const GraspParams& grasp,
                                  const kinematics::HandLayout& layout = kinematics::default_hand_layout()) {
  Schematic s;
  const Eigen::Vector2d lo = inst.spec.workspace.lo.head<2>();
  const Eigen::Vector2d hi = inst.spec.workspace.hi.head<2>();
  auto clamp2 = [&](const Eigen::Vector2d& p) -> Eigen::Vector2d { return p.cwiseMax(lo).cwiseMin(hi); };
  s.workspace_lo = lo;
  s.workspace_hi = hi;
  s.object_center = clamp2(inst.object_position.head<2>());
  s.object_radius = inst.spec.object_radius;
  s.contact = clamp2(grasp.mu.head<2>());
  s.wrist_from = s.contact;
  const Vec3 approach = Rotation::from_euler_xyz(grasp.theta_wrist).rotate(Vec3::UnitX());
  const Eigen::Vector2d dir = approach.head<2>();
  const double n = dir.norm();
  s.wrist_to = n > 1e-12 ? clamp2(s.contact + kWristArrowLength * dir / n) : s.contact;
  for (int f = 0; f < kinematics::kRobotFingerCount; ++f) {
    double acc = 0.0;
    for (int j : {kinematics::kMcpBend, kinematics::kPipBend, kinematics::kDipBend}) {
      const int idx = f * kinematics::kRobotJointsPerFinger + j;
      const auto lim = layout.limit(idx);
      acc += std::clamp((grasp.pose[idx] - lim.lo) / (lim.hi - lim.lo), 0.0, 1.0);
    }
    s.finger_closure[f] = acc / 3.0;
  }
  return s;
}

inline nlohmann::json to_json(const Schematic& s) {
  auto v2 = [](const Eigen::Vector2d& v) { return nlohmann::json::array({v.x(), v.y()}); };
  return {{"workspace", {{"lo", v2(s.workspace_lo)}, {"hi", v2(s.workspace_hi)}}},
          {"object", {{"center", v2(s.object_center)}, {"radius", s.object_radius}}},
          {"contact", v2(s.contact)},
          {"wrist", {{"from", v2(s.wrist_from)}, {"to", v2(s.wrist_to)}}},
          {"finger_closure", s.finger_closure}};
}

// ---------------------------------------------------------------------------
// Environment and automated reward channels

class SimEnvironment final : public finetune::Environment {
 public:
  SimEnvironment(TaskSpec spec, FeatureSynthesizer synth, std::uint64_t session_seed)
      : spec_(std::move(spec)), synth_(std::move(synth)), session_seed_(session_seed) {
    spec_.validate();
  }

  Observation observe(int episode_index) override {
    return observe_instance(make_instance(spec_, train_instance_seed(session_seed_, episode_index)));
  }

  Observation observe_instance(const TaskInstance& inst) const {
    return {inst.seed, synth_.features(inst), inst.object_position};
  }

  finetune::Outcome execute(const Observation& obs, const GraspParams& grasp) override {
    const RolloutResult r = rollout(instance(obs), grasp, spec_.trajectory, synth_);
    return {r.reward, r.final_features, r.success};
  }

  /// Hidden optimum for an observation; used only by the synthetic prior.
  ParamVector optimum(const Observation& obs) const { return instance(obs).optimum.to_vector(); }

  TaskInstance instance(const Observation& obs) const { return make_instance(spec_, obs.id); }

  const TaskSpec& spec() const { return spec_; }
  const FeatureSynthesizer& synthesizer() const { return synth_; }

 private:
  TaskSpec spec_;
  FeatureSynthesizer synth_;
  std::uint64_t session_seed_;
};

/// Synthetic prior: hidden optimum plus the task's configured bias.
inline affordance::BiasedOraclePrior make_biased_prior(const SimEnvironment& env) {
  const TaskSpec spec = env.spec();
  return affordance::BiasedOraclePrior(
      [spec](const Observation& obs) { return make_instance(spec, obs.id).optimum.to_vector(); },
      spec.prior_bias);
}

class OracleRewardChannel final : public finetune::RewardChannel {
 public:
  std::optional<double> collect(const finetune::PendingEpisode& ep) override { return ep.outcome.reward; }
  std::string mode() const override { return "oracle"; }
};

class EmbeddingRewardChannel final : public finetune::RewardChannel {
 public:
  EmbeddingRewardChannel(FeatureVector goal, double scale) : goal_(std::move(goal)), scale_(scale) {}

  std::optional<double> collect(const finetune::PendingEpisode& ep) override {
    return embedding_reward(ep.outcome.final_features, goal_, scale_);
  }
  std::string mode() const override { return "embedding"; }

 private:
  FeatureVector goal_;
  double scale_;
};

// ---------------------------------------------------------------------------
// Task files

namespace detail {
inline std::vector<double> read_vec(const nlohmann::json& j, const char* key, std::size_t n) {
  const auto v = j.at(key).get<std::vector<double>>();
  if (v.size() != n) throw Error(ErrorKind::kParse, std::string("task: bad length for ") + key);
  return v;
}
inline Vec3 read_vec3(const nlohmann::json& j, const char* key) {
  const auto v = read_vec(j, key, 3);
  return {v[0], v[1], v[2]};
}
}  // namespace detail

/// Parse a task document. A relative trajectory_file is resolved against `base_dir`.
inline TaskSpec task_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  TaskSpec t;
  try {
    t.id = j.at("id").get<std::string>();
    t.grasp_offset = detail::read_vec3(j, "grasp_offset");
    t.theta = detail::read_vec3(j, "theta");
    const auto pose = detail::read_vec(j, "pose", kHandJointDim);
    t.pose = Eigen::Map<const HandJoints>(pose.data());
    if (j.contains("length_scales")) {
      const auto& s = j["length_scales"];
      t.scales.mu = s.value("mu", t.scales.mu);
      t.scales.theta = s.value("theta", t.scales.theta);
      t.scales.pose = s.value("pose", t.scales.pose);
      t.scales.trajectory = s.value("trajectory", t.scales.trajectory);
    }
    t.success_threshold = j.value("success_threshold", t.success_threshold);
    if (j.contains("prior_bias")) {
      const auto b = affordance::grasp_params_from_json(j["prior_bias"]);
      t.prior_bias = b.to_vector();
    }
    if (j.contains("workspace")) {
      t.workspace.lo = detail::read_vec3(j["workspace"], "lo");
      t.workspace.hi = detail::read_vec3(j["workspace"], "hi");
    }
    t.object_radius = j.value("object_radius", t.object_radius);
    t.trajectory_file = j.value("trajectory_file", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("task: ") + e.what());
  }
  if (!t.trajectory_file.empty()) {
    std::filesystem::path p(t.trajectory_file);
    if (p.is_relative()) p = base_dir / p;
    const auto poses = kinematics::load_wrist_jsonl(p.string());
    t.trajectory = kinematics::extract_post_grasp(poses);
  }
  t.validate();
  return t;
}

inline TaskSpec load_task(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open task file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, path + ": " + e.what());
  }
  return task_from_json(j, std::filesystem::path(path).parent_path());
}

/// `<dir>/<id>.json`.
inline TaskSpec load_task_from_library(const std::string& dir, const std::string& id) {
  task_index(id);
  return load_task((std::filesystem::path(dir) / (id + ".json")).string());
}

}  // namespace deft::simenv
