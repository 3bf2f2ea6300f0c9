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

// Evaluation on held-out instances. Test instances come from a seed range
// disjoint from every fine-tuning session (see simenv::test_instance_seed).

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "deft/affordance.hpp"
#include "deft/kinematics.hpp"
#include "deft/policy.hpp"
#include "deft/simenv.hpp"
#include "json.hpp"

namespace deft::harness {

enum class EvalMethod { kPriorOnly, kNoPrior, kDeft };

inline const char* to_string(EvalMethod m) {
  switch (m) {
    case EvalMethod::kPriorOnly: return "prior-only";
    case EvalMethod::kNoPrior: return "no-prior";
    case EvalMethod::kDeft: return "deft";
  }
  return "prior-only";
}

inline EvalMethod eval_method_from_string(const std::string& s) {
  if (s == "prior-only") return EvalMethod::kPriorOnly;
  if (s == "no-prior") return EvalMethod::kNoPrior;
  if (s == "deft") return EvalMethod::kDeft;
  throw Error(ErrorKind::kConfig, "method must be prior-only, no-prior, or deft (got '" + s + "')");
}

struct TrialRecord {
  std::uint64_t eval_seed = 0;
  int trial = 0;
  std::uint64_t instance_seed = 0;
  double reward = 0.0;
  bool success = false;
  affordance::GraspParams executed;
};

struct EvalReport {
  std::string task;
  EvalMethod method = EvalMethod::kPriorOnly;
  int trials = 0;  // per seed
  std::vector<std::uint64_t> seeds;
  int successes = 0;
  std::vector<TrialRecord> records;

  int total() const { return static_cast<int>(records.size()); }
  double success_rate() const { return records.empty() ? 0.0 : static_cast<double>(successes) / total(); }
};

/// Baseline without a prior: object centre, random wrist rotation, half-closed hand.
inline affordance::GraspParams no_prior_grasp(const Vec3& object_center, std::mt19937_64& rng,
                                              const kinematics::HandLayout& layout = kinematics::default_hand_layout()) {
  std::uniform_real_distribution<double> angle(-std::numbers::pi, std::numbers::pi);
  affordance::GraspParams g;
  g.mu = object_center;
  for (int i = 0; i < 3; ++i) g.theta_wrist[i] = angle(rng);
  for (int i = 0; i < kHandJointDim; ++i) {
    const auto lim = layout.limit(i);
    g.pose[i] = 0.5 * (lim.lo + lim.hi);
  }
  return g;
}

inline std::mt19937_64 trial_rng(std::uint64_t eval_seed, int trial) {
  std::seed_seq seq{static_cast<std::uint32_t>(eval_seed), static_cast<std::uint32_t>(eval_seed >> 32),
                    static_cast<std::uint32_t>(trial), 0x4556414cu};
  return std::mt19937_64(seq);
}

/// Runs `trials` fresh test instances per seed. `policy` is required for kDeft.
inline EvalReport evaluate(const simenv::SimEnvironment& env, const affordance::PriorSource& prior, EvalMethod method,
                           int trials, const std::vector<std::uint64_t>& seeds,
                           const policy::TrainedPolicy* policy = nullptr) {
  if (trials < 1) throw Error(ErrorKind::kConfig, "eval: trials must be >= 1 (empty report)");
  if (seeds.empty()) throw Error(ErrorKind::kConfig, "eval: at least one seed is required");
  if (method == EvalMethod::kDeft && !policy) throw Error(ErrorKind::kConfig, "eval: deft requires policy weights");

  EvalReport rep;
  rep.task = env.spec().id;
  rep.method = method;
  rep.trials = trials;
  rep.seeds = seeds;
  for (std::uint64_t s : seeds) {
    for (int t = 0; t < trials; ++t) {
      const auto inst = simenv::make_instance(env.spec(), simenv::test_instance_seed(s, t));
      const auto obs = env.observe_instance(inst);
      std::mt19937_64 rng = trial_rng(s, t);
      affordance::GraspParams g;
      switch (method) {
        case EvalMethod::kPriorOnly: g = affordance::prior_predict(prior, obs); break;
        case EvalMethod::kNoPrior: g = no_prior_grasp(inst.object_position, rng); break;
        case EvalMethod::kDeft: g = policy->propose(obs.features, affordance::prior_predict(prior, obs), rng); break;
      }
      const auto r = simenv::rollout(inst, g, env.spec().trajectory, env.synthesizer());
      rep.records.push_back({s, t, inst.seed, r.reward, r.success, g});
      rep.successes += r.success ? 1 : 0;
    }
  }
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& t : r.records) {
    recs.push_back({{"eval_seed", t.eval_seed},
                    {"trial", t.trial},
                    {"instance_seed", t.instance_seed},
                    {"reward", t.reward},
                    {"success", t.success},
                    {"executed", affordance::to_json(t.executed)}});
  }
  return {{"format", "deft-eval"},
          {"schema_version", 1},
          {"task", r.task},
          {"method", to_string(r.method)},
          {"trials", r.trials},
          {"seeds", r.seeds},
          {"successes", r.successes},
          {"total", r.total()},
          {"success_rate", r.success_rate()},
          {"records", recs}};
}

}  // namespace deft::harness
