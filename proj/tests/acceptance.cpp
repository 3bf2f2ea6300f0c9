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

// End-to-end acceptance checks. One line per criterion:
//   PASS <name>: <detail>   or   FAIL <name>: <detail>
// Exits 1 if any criterion fails.

#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>

#include "deft/harness/commands.hpp"

using namespace deft;
namespace fs = std::filesystem;
using affordance::GraspParams;

namespace {

int failures = 0;

void report(bool ok, const char* name, const std::string& detail) {
  std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double rel_err(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}); }

const std::string kData = DEFT_DATA_DIR;

harness::RunConfig oracle_config(std::uint64_t seed, const fs::path& out = "unused") {
  harness::RunConfig c = harness::load_run_config(kData + "/configs/pick-cup-oracle.json");
  c.session.seed = seed;
  c.output_dir = out.string();
  return c;
}

finetune::SessionLog oracle_session(const harness::RunConfig& c) {
  auto parts = harness::make_session_parts(c);
  return finetune::run_session(*parts.env, *parts.prior, *parts.automated_reward, c.session);
}

// --- criteria -----------------------------------------------------------------

void protocol() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto c = oracle_config(1);
  const auto log = oracle_session(c);
  const auto& s = c.session;
  bool ok = s.episodes == 30 && s.warmup == 10 && s.elites == 10 && log.episodes.size() == 30 && !log.aborted;
  const ParamVector sd = log.initial.stddev;
  for (int i = 0; i < kParamDim; ++i) {
    const double want = i < 3 ? 0.02 : (i < 6 ? 0.2 : 0.05);
    ok = ok && sd[i] == want && log.initial.mean[i] == 0.0;
  }
  int first_change = -1;
  for (std::size_t k = 0; k < log.episodes.size() && first_change < 0; ++k) {
    if (!(log.episodes[k].distribution == log.initial)) first_change = static_cast<int>(k) + 1;
  }
  ok = ok && first_change == 11 && log.elites.size() == 10;
  const double secs = seconds_since(t0);
  ok = ok && secs < 1.0;
  report(ok, "protocol", "N=30 M=10 E=10, first refit at episode " + std::to_string(first_change) + fmt(", %.3f s", secs));
}

// Runs the ten oracle sessions shared by the bias-recovery and improvement checks.
std::vector<finetune::SessionLog> ten_sessions(double* secs) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<finetune::SessionLog> logs;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) logs.push_back(oracle_session(oracle_config(seed)));
  *secs = seconds_since(t0);
  return logs;
}

void bias_recovery(const std::vector<finetune::SessionLog>& logs, double secs) {
  const auto spec = simenv::load_task_from_library(kData + "/tasks", "pick-cup");
  const ParamVector b = spec.prior_bias;
  int recovered = 0;
  for (const auto& log : logs) {
    const ParamVector m = log.episodes.back().distribution.mean;
    bool ok = true;
    for (int i = 0; i < kParamDim; ++i) {
      if (b[i] != 0.0) ok = ok && std::abs(m[i] + b[i]) <= 0.3 * std::abs(b[i]);
    }
    recovered += ok ? 1 : 0;
  }
  report(recovered >= 8 && secs < 60.0, "cem-bias-recovery",
         std::to_string(recovered) + "/10 seeds within 30% of -b (need 8)" + fmt(", %.2f s", secs));
}

void improvement(const std::vector<finetune::SessionLog>& logs) {
  int better = 0;
  for (const auto& log : logs) {
    double early = 0.0, late = 0.0;
    for (int k = 0; k < 10; ++k) early += log.episodes[k].reward;
    for (int k = 20; k < 30; ++k) late += log.episodes[k].reward;
    better += late > early ? 1 : 0;
  }
  report(better >= 9, "improvement", std::to_string(better) + "/10 seeds with mean(21-30) > mean(1-10) (need 9)");
}

void method_ordering() {
  const auto t0 = std::chrono::steady_clock::now();
  int deft = 0, prior_only = 0, no_prior = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto c = oracle_config(seed + 1);
    auto parts = harness::make_session_parts(c);
    const auto log = finetune::run_session(*parts.env, *parts.prior, *parts.automated_reward, c.session);
    const auto pol = policy::train_policy(harness::elite_samples(log, harness::kTrainingElites), c.policy);
    const std::vector<std::uint64_t> seeds{seed};
    using harness::EvalMethod;
    deft += harness::evaluate(*parts.env, *parts.prior, EvalMethod::kDeft, 10, seeds, &pol).successes;
    prior_only += harness::evaluate(*parts.env, *parts.prior, EvalMethod::kPriorOnly, 10, seeds).successes;
    no_prior += harness::evaluate(*parts.env, *parts.prior, EvalMethod::kNoPrior, 10, seeds).successes;
  }
  const bool ok = deft >= prior_only && prior_only >= no_prior && deft > no_prior;
  report(ok, "method-ordering",
         "successes/100 deft=" + std::to_string(deft) + " prior-only=" + std::to_string(prior_only) +
             " no-prior=" + std::to_string(no_prior) + fmt(", %.1f s", seconds_since(t0)));
}

void gradient_checks() {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> n(0.0, 1.0);
  const double h = 1e-5;
  auto random_params = [&] {
    ParamVector v;
    for (int i = 0; i < kParamDim; ++i) v[i] = n(rng);
    return v;
  };
  double worst_loss = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const ParamVector p = random_params(), t = random_params();
    const auto target = GraspParams::from_vector(t);
    const ParamVector g = affordance::grasp_loss(GraspParams::from_vector(p), target).grad;
    for (int i = 0; i < kParamDim; ++i) {
      ParamVector a = p, b = p;
      a[i] += h;
      b[i] -= h;
      const double num = (affordance::grasp_loss(GraspParams::from_vector(a), target).loss -
                          affordance::grasp_loss(GraspParams::from_vector(b), target).loss) /
                         (2 * h);
      worst_loss = std::max(worst_loss, rel_err(g[i], num));
    }
  }
  double worst_elbo = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    policy::CvaeParams p = policy::make_cvae(6 + kParamDim, 2, 8, 0.1, rng);
    p.encoder.hidden.bias.setRandom();
    const ParamVector t = random_params() * 0.1;
    const Eigen::VectorXd c = Eigen::VectorXd::Random(6 + kParamDim);
    Eigen::VectorXd eps(2);
    eps << n(rng), n(rng);
    const auto r = policy::elbo_loss(p, t, c, eps);
    const Eigen::VectorXd w = policy::flatten(p);
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      Eigen::VectorXd a = w, b = w;
      a[i] += h;
      b[i] -= h;
      policy::CvaeParams pa = p, pb = p;
      policy::assign(pa, a);
      policy::assign(pb, b);
      const double num = (policy::elbo_loss(pa, t, c, eps).loss - policy::elbo_loss(pb, t, c, eps).loss) / (2 * h);
      worst_elbo = std::max(worst_elbo, rel_err(r.grad[i], num));
    }
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "max rel err eq1=%.2e elbo=%.2e over 100 instances each", worst_loss, worst_elbo);
  report(worst_loss < 1e-4 && worst_elbo < 1e-4, "gradient-checks", buf);
}

void gmm() {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_int_distribution<int> kd(1, 4);
  double worst_drop = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    affordance::ContactSet s;
    s.points.resize(80, 2);
    for (Eigen::Index i = 0; i < s.points.size(); ++i) s.points.data()[i] = n(rng) + (i % 3) * 2.0;
    const auto fit = affordance::fit_gmm(s, kd(rng), 50, trial);
    for (std::size_t t = 1; t < fit.log_likelihood.size(); ++t) {
      worst_drop = std::max(worst_drop, fit.log_likelihood[t - 1] - fit.log_likelihood[t]);
    }
  }
  std::mt19937_64 crng(7);
  std::normal_distribution<double> cn(0.0, 0.5);
  affordance::ContactSet two;
  two.points.resize(400, 2);
  for (int i = 0; i < 200; ++i) {
    two.points.row(i) << cn(crng), cn(crng);
    two.points.row(200 + i) << 10.0 + cn(crng), 10.0 + cn(crng);
  }
  const auto m = affordance::fit_gmm(two, 2, 100, 7).model;
  const int lo = m.means(0, 0) < m.means(1, 0) ? 0 : 1;
  const double e0 = (m.means.row(lo) - Eigen::RowVector2d(0, 0)).norm();
  const double e1 = (m.means.row(1 - lo) - Eigen::RowVector2d(10, 10)).norm();
  char buf[160];
  std::snprintf(buf, sizeof buf, "max log-lik drop %.1e over 100 fits, mean errors %.3f %.3f", worst_drop, e0, e1);
  report(worst_drop <= 1e-9 && e0 < 0.2 && e1 < 0.2, "gmm", buf);
}

void kinematics_checks() {
  using namespace kinematics;
  std::mt19937_64 rng(99);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> ang(-std::numbers::pi, std::numbers::pi);
  auto unit = [&] { return Vec3(n(rng), n(rng), n(rng)).normalized(); };
  auto gap = [](const Rotation& a, const Rotation& b) { return (a.matrix() - b.matrix()).cwiseAbs().maxCoeff(); };

  double swing_err = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Rotation r = Rotation::from_axis_angle(unit(), ang(rng));
    const Vec3 axis = unit();
    const auto st = swing_twist(r, axis);
    swing_err = std::max(swing_err, gap(st.swing * Rotation::from_axis_angle(axis, st.twist_angle), r));
  }

  const HandLayout l = default_hand_layout();
  double retarget_err = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    ManoPose m;
    HandJoints expected = HandJoints::Zero();
    for (int fi = 0; fi < kRobotFingerCount; ++fi) {
      const auto& f = l.fingers[fi];
      auto inside = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo + 0.01, hi - 0.01)(rng); };
      const double spread = inside(f.limits[kMcpSpread].lo, f.limits[kMcpSpread].hi);
      const double bend = inside(f.limits[kMcpBend].lo, f.limits[kMcpBend].hi);
      const auto [plo, phi] = HandLayout::coupled_pip_range(f);
      const double pip = inside(plo, phi);
      const Rotation mcp =
          Rotation::from_axis_angle(f.axes[kMcp].spread, spread) * Rotation::from_axis_angle(f.axes[kMcp].bend, bend);
      m.joint_rots[f.mano_joints[kMcp]] = mcp.to_rotation_vector();
      m.joint_rots[f.mano_joints[kPip]] = f.axes[kPip].bend * pip;
      m.joint_rots[f.mano_joints[kDip]] = f.axes[kDip].bend * (f.coupling_ratio * pip);
      expected.segment<4>(fi * 4) << spread, bend, pip, f.coupling_ratio * pip;
    }
    retarget_err = std::max(retarget_err, (retarget_mano(m, l).joint_angles - expected).cwiseAbs().maxCoeff());
  }

  double delta_err = 0.0;
  bool forty = true;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<WristPose> poses;
    WristPose p{Vec3(n(rng), n(rng), n(rng)) * 0.2, Rotation::from_axis_angle(unit(), ang(rng))};
    for (int t = 0; t < 60; ++t) {
      poses.push_back(p);
      p.position += Vec3(n(rng), n(rng), n(rng)) * 0.005;
      p.orientation = p.orientation * Rotation::from_rotation_vector(Vec3(n(rng), n(rng), n(rng)) * 0.02);
    }
    const auto deltas = extract_post_grasp(poses);
    forty = forty && deltas.size() == 40;
    const auto replay = apply_deltas(poses[0], deltas);
    for (std::size_t t = 0; t < replay.size(); ++t) {
      delta_err = std::max(delta_err, (replay[t].position - poses[t + 1].position).norm());
    }
  }
  char buf[200];
  std::snprintf(buf, sizeof buf, "swing-twist %.1e, retarget %.1e rad, delta replay %.1e m, 40 deltas: %s", swing_err,
                retarget_err, delta_err, forty ? "yes" : "no");
  report(swing_err < 1e-9 && retarget_err < 1e-6 && delta_err < 1e-9 && forty, "kinematics", buf);
}

void policy_ablation() {
  // Ten elites in identical scenes, split between two residual modes.
  const FeatureVector f = FeatureVector::Constant(8, 0.5);
  const GraspParams xi;
  ParamVector mode_a = ParamVector::Zero(), mode_b = ParamVector::Zero();
  mode_a[0] = 0.03;
  mode_a[5] = 0.2;
  mode_b[0] = -0.03;
  mode_b[5] = -0.2;
  std::vector<policy::EliteSample> elites;
  for (int i = 0; i < 10; ++i) elites.push_back({f, xi, i % 2 ? mode_a : mode_b});

  policy::PolicyConfig cvae_cfg;
  policy::PolicyConfig mlp_cfg;
  mlp_cfg.head = policy::HeadType::kMlp;
  const auto cvae = policy::train_policy(elites, cvae_cfg);
  const auto mlp = policy::train_policy(elites, mlp_cfg);

  std::mt19937_64 rng(11);
  double best_a = 1e300, best_b = 1e300;
  for (int s = 0; s < 10; ++s) {
    const ParamVector r = cvae.propose(f, xi, rng).to_vector() - xi.to_vector();
    best_a = std::min(best_a, (r - mode_a).norm());
    best_b = std::min(best_b, (r - mode_b).norm());
  }
  const ParamVector m = mlp.propose(f, xi, rng).to_vector() - xi.to_vector();
  const double mlp_a = (m - mode_a).norm(), mlp_b = (m - mode_b).norm();
  char buf[200];
  std::snprintf(buf, sizeof buf, "mode A: mlp %.4f vs cvae best-of-10 %.4f; mode B: mlp %.4f vs %.4f", mlp_a, best_a,
                mlp_b, best_b);
  report(mlp_a > best_a && mlp_b > best_b, "policy-ablation", buf);
}

std::vector<std::string> episode_lines_without_timestamps(const fs::path& file) {
  std::ifstream in(file);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    auto j = nlohmann::json::parse(line);
    j.erase("timestamps");
    out.push_back(j.dump());
  }
  return out;
}

void determinism() {
  const fs::path root = fs::temp_directory_path() / ("deft_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  bool ok = true;
  for (const char* mode : {"oracle", "embedding"}) {
    for (const char* run : {"a", "b"}) {
      auto c = harness::load_run_config(kData + "/configs/pick-cup-" + std::string(mode) + ".json");
      c.output_dir = (root / (std::string(mode) + run)).string();
      harness::run_finetune(c);
    }
    const auto a = episode_lines_without_timestamps(root / (std::string(mode) + "a") / "episodes.jsonl");
    const auto b = episode_lines_without_timestamps(root / (std::string(mode) + "b") / "episodes.jsonl");
    ok = ok && a.size() == 30 && a == b;
    std::ifstream ha(root / (std::string(mode) + "a") / "session.json"), hb(root / (std::string(mode) + "b") / "session.json");
    const std::string sa((std::istreambuf_iterator<char>(ha)), {}), sb((std::istreambuf_iterator<char>(hb)), {});
    ok = ok && sa == sb;
  }
  fs::remove_all(root);
  report(ok, "determinism", "oracle and embedding logs identical across two runs (timestamps excluded)");
}

}  // namespace

int main() {
  try {
    protocol();
    double secs = 0.0;
    const auto logs = ten_sessions(&secs);
    bias_recovery(logs, secs);
    improvement(logs);
    method_ordering();
    gradient_checks();
    gmm();
    kinematics_checks();
    policy_ablation();
    determinism();
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance: unexpected error: %s\n", e.what());
    return 1;
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
