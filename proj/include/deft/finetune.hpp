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

// Residual cross-entropy fine-tuning: sample a residual around the prior's
// grasp, execute, collect a reward, and after the warm-up phase refit the
// residual distribution to the best episodes seen so far.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "deft/affordance.hpp"
#include "deft/common.hpp"
#include "json.hpp"

namespace deft::finetune {

using affordance::GraspParams;
using affordance::Observation;
using affordance::PriorSource;

inline constexpr double kStdFloor = 1e-4;

struct SessionConfig {
  int elites = 10;
  int warmup = 10;
  int episodes = 30;
  double sigma_mu = 0.02;
  double sigma_theta = 0.2;
  double sigma_pose = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (episodes < 1) throw Error(ErrorKind::kConfig, "episodes must be >= 1");
    if (elites < 1 || elites > episodes) throw Error(ErrorKind::kConfig, "elites must be in [1, episodes]");
    if (warmup < 0 || warmup > episodes) throw Error(ErrorKind::kConfig, "warmup must be in [0, episodes]");
    if (!(sigma_mu > 0.0) || !(sigma_theta > 0.0) || !(sigma_pose > 0.0)) {
      throw Error(ErrorKind::kConfig, "initial standard deviations must be positive");
    }
  }
};

/// Diagonal Gaussian over 22-dim residuals.
struct ResidualDistribution {
  ParamVector mean = ParamVector::Zero();
  ParamVector stddev = ParamVector::Constant(kStdFloor);

  friend bool operator==(const ResidualDistribution& a, const ResidualDistribution& b) {
    return a.mean == b.mean && a.stddev == b.stddev;
  }
};

inline ResidualDistribution init_distribution(const SessionConfig& cfg) {
  cfg.validate();
  ResidualDistribution d;
  d.stddev.segment<kContactDim>(kContactOffset).setConstant(cfg.sigma_mu);
  d.stddev.segment<kWristDim>(kWristOffset).setConstant(cfg.sigma_theta);
  d.stddev.segment<kHandJointDim>(kHandOffset).setConstant(cfg.sigma_pose);
  return d;
}

inline ParamVector sample_residual(const ResidualDistribution& d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  ParamVector eps;
  for (int i = 0; i < kParamDim; ++i) eps[i] = d.mean[i] + d.stddev[i] * n(rng);
  return eps;
}

struct Timestamps {
  std::int64_t started_ms = 0;
  std::int64_t finished_ms = 0;
};

struct EpisodeRecord {
  int index = 0;
  std::uint64_t observation_id = 0;
  GraspParams prior;
  ParamVector residual = ParamVector::Zero();
  GraspParams executed;
  double reward = 0.0;
  bool success = false;
  FeatureVector features;
  ResidualDistribution distribution;  // D after this episode's update
  Timestamps timestamps;
};

struct SessionLog {
  ResidualDistribution initial;
  std::vector<EpisodeRecord> episodes;
  std::vector<int> elites;  // Ω after the last episode
  bool aborted = false;
};

/// Top-E episode indices by reward, ties to the earlier episode.
inline std::vector<int> rank_elites(std::span<const EpisodeRecord> episodes, int count) {
  std::vector<int> order(episodes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return episodes[a].reward > episodes[b].reward; });
  if (count >= 0 && static_cast<std::size_t>(count) < order.size()) order.resize(count);
  return order;
}

inline std::vector<int> rank_elites(const SessionLog& log, int count) { return rank_elites(log.episodes, count); }

/// Per-dimension mean and population std of the top-E residuals, std floored.
inline ResidualDistribution refit_distribution(std::span<const EpisodeRecord> episodes, int count) {
  if (count < 1 || episodes.size() < static_cast<std::size_t>(count)) {
    throw Error(ErrorKind::kInsufficientEpisodes, "refit needs " + std::to_string(count) + " episodes, have " +
                                                      std::to_string(episodes.size()));
  }
  const std::vector<int> elite = rank_elites(episodes, count);
  ResidualDistribution d;
  d.mean.setZero();
  for (int i : elite) d.mean += episodes[i].residual;
  d.mean /= static_cast<double>(count);
  ParamVector var = ParamVector::Zero();
  for (int i : elite) var += (episodes[i].residual - d.mean).cwiseAbs2();
  var /= static_cast<double>(count);
  d.stddev = var.cwiseSqrt().cwiseMax(kStdFloor);
  return d;
}

inline ResidualDistribution refit_distribution(const SessionLog& log, int count) {
  return refit_distribution(log.episodes, count);
}

// ---------------------------------------------------------------------------
// Session loop

struct Outcome {
  double reward = 0.0;  // task reward in [0, 1] from the environment
  FeatureVector final_features;
  bool success = false;
};

/// Executes grasps followed by the task's fixed post-grasp trajectory.
class Environment {
 public:
  virtual ~Environment() = default;
  virtual Observation observe(int episode_index) = 0;
  virtual Outcome execute(const Observation& obs, const GraspParams& grasp) = 0;
  virtual void reset() {}
};

struct PendingEpisode {
  int index = 0;
  Observation observation;
  GraspParams prior;
  ParamVector residual = ParamVector::Zero();
  GraspParams executed;
  Outcome outcome;
};

/// Supplies the reward for an executed episode. Returns nullopt on timeout.
class RewardChannel {
 public:
  virtual ~RewardChannel() = default;
  virtual std::optional<double> collect(const PendingEpisode& episode) = 0;
  virtual std::string mode() const = 0;
};

enum class TimeoutPolicy { kPause, kAbort };

struct SessionOptions {
  TimeoutPolicy on_timeout = TimeoutPolicy::kPause;
  /// Called once per completed episode, after the distribution update.
  std::function<void(const EpisodeRecord&)> on_episode;
  /// Called when an episode has been executed and its reward is being collected.
  std::function<void(const PendingEpisode&)> on_pending;
  std::function<std::int64_t()> clock = [] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
  };
};

/// Per-episode generator so a resumed session draws the same residuals.
inline std::mt19937_64 episode_rng(std::uint64_t session_seed, int episode_index) {
  std::seed_seq seq{static_cast<std::uint32_t>(session_seed), static_cast<std::uint32_t>(session_seed >> 32),
                    static_cast<std::uint32_t>(episode_index), 0x44454654u};
  return std::mt19937_64(seq);
}

/// Runs episodes k = |resume.episodes| .. N-1. Pass a partial log to resume.
inline SessionLog run_session(Environment& env, const PriorSource& prior, RewardChannel& reward,
                              const SessionConfig& cfg, const SessionOptions& options = {},
                              SessionLog resume = {}) {
  cfg.validate();
  SessionLog log = std::move(resume);
  log.aborted = false;
  if (log.episodes.empty()) log.initial = init_distribution(cfg);
  if (log.episodes.size() > static_cast<std::size_t>(cfg.episodes)) {
    throw Error(ErrorKind::kConfig, "resumed log is longer than the configured episode count");
  }
  ResidualDistribution dist = log.episodes.empty() ? log.initial : log.episodes.back().distribution;

  for (int k = static_cast<int>(log.episodes.size()); k < cfg.episodes; ++k) {
    EpisodeRecord rec;
    rec.index = k;
    rec.timestamps.started_ms = options.clock();

    PendingEpisode pending;
    pending.index = k;
    pending.observation = env.observe(k);
    pending.prior = affordance::prior_predict(prior, pending.observation);
    std::mt19937_64 rng = episode_rng(cfg.seed, k);
    pending.residual = sample_residual(dist, rng);
    pending.executed = GraspParams::from_vector(pending.prior.to_vector() + pending.residual);
    pending.outcome = env.execute(pending.observation, pending.executed);
    if (options.on_pending) options.on_pending(pending);

    std::optional<double> r = reward.collect(pending);
    while (!r && options.on_timeout == TimeoutPolicy::kPause) r = reward.collect(pending);
    if (!r) {
      log.aborted = true;
      break;
    }
    env.reset();

    rec.observation_id = pending.observation.id;
    rec.prior = pending.prior;
    rec.residual = pending.residual;
    rec.executed = pending.executed;
    rec.reward = std::clamp(*r, 0.0, 1.0);
    rec.success = pending.outcome.success;
    rec.features = pending.observation.features;
    log.episodes.push_back(rec);

    if (k + 1 > cfg.warmup) dist = refit_distribution(log.episodes, std::min(cfg.elites, k + 1));
    log.episodes.back().distribution = dist;
    log.episodes.back().timestamps.finished_ms = options.clock();
    if (options.on_episode) options.on_episode(log.episodes.back());
  }
  log.elites = rank_elites(log.episodes, cfg.elites);
  return log;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const SessionConfig& c) {
  return {{"elites", c.elites},       {"warmup", c.warmup},           {"episodes", c.episodes},
          {"sigma_mu", c.sigma_mu},   {"sigma_theta", c.sigma_theta}, {"sigma_pose", c.sigma_pose},
          {"seed", c.seed}};
}

inline SessionConfig session_config_from_json(const nlohmann::json& j) {
  SessionConfig c;
  c.elites = j.value("elites", c.elites);
  c.warmup = j.value("warmup", c.warmup);
  c.episodes = j.value("episodes", c.episodes);
  c.sigma_mu = j.value("sigma_mu", c.sigma_mu);
  c.sigma_theta = j.value("sigma_theta", c.sigma_theta);
  c.sigma_pose = j.value("sigma_pose", c.sigma_pose);
  c.seed = j.value("seed", c.seed);
  return c;
}

inline nlohmann::json to_json(const ResidualDistribution& d) {
  return {{"mean", to_std(d.mean)}, {"std", to_std(d.stddev)}};
}

inline ParamVector param_vector_from_json(const nlohmann::json& j, const char* what) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != static_cast<std::size_t>(kParamDim)) {
    throw Error(ErrorKind::kParse, std::string(what) + ": expected 22 values");
  }
  return Eigen::Map<const ParamVector>(v.data());
}

inline ResidualDistribution distribution_from_json(const nlohmann::json& j) {
  return {param_vector_from_json(j.at("mean"), "mean"), param_vector_from_json(j.at("std"), "std")};
}

/// One JSONL line. Wall-clock data lives under "timestamps" only.
inline nlohmann::json to_json(const EpisodeRecord& r) {
  return {{"index", r.index},
          {"observation_id", r.observation_id},
          {"prior", affordance::to_json(r.prior)},
          {"residual", to_std(r.residual)},
          {"executed", affordance::to_json(r.executed)},
          {"reward", r.reward},
          {"success", r.success},
          {"features", to_std(r.features)},
          {"distribution", to_json(r.distribution)},
          {"timestamps", {{"started_ms", r.timestamps.started_ms}, {"finished_ms", r.timestamps.finished_ms}}}};
}

inline EpisodeRecord episode_from_json(const nlohmann::json& j) {
  EpisodeRecord r;
  r.index = j.at("index").get<int>();
  r.observation_id = j.at("observation_id").get<std::uint64_t>();
  r.prior = affordance::grasp_params_from_json(j.at("prior"));
  r.residual = param_vector_from_json(j.at("residual"), "residual");
  r.executed = affordance::grasp_params_from_json(j.at("executed"));
  r.reward = j.at("reward").get<double>();
  if (!(r.reward >= 0.0 && r.reward <= 1.0)) throw Error(ErrorKind::kParse, "reward outside [0, 1]");
  r.success = j.at("success").get<bool>();
  const auto f = j.at("features").get<std::vector<double>>();
  r.features = Eigen::Map<const Eigen::VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
  r.distribution = distribution_from_json(j.at("distribution"));
  if (j.contains("timestamps")) {
    r.timestamps.started_ms = j["timestamps"].value("started_ms", std::int64_t{0});
    r.timestamps.finished_ms = j["timestamps"].value("finished_ms", std::int64_t{0});
  }
  return r;
}

}  // namespace deft::finetune
