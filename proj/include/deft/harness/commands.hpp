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

// Subcommand bodies. Each returns a process exit code:
//   0 success, 2 configuration error, 3 runtime error.
// Errors go to stderr as one JSON line.

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "deft/finetune.hpp"
#include "deft/harness/api.hpp"
#include "deft/harness/curves.hpp"
#include "deft/harness/eval.hpp"
#include "deft/harness/session_io.hpp"
#include "deft/policy.hpp"
#include "deft/simenv.hpp"
#include "json.hpp"

namespace deft::harness {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

inline int exit_code_for(ErrorKind k) { return k == ErrorKind::kConfig ? kExitConfig : kExitRuntime; }

inline std::string error_line(const std::string& kind, const std::string& message) {
  return nlohmann::json{{"error", kind}, {"message", message}}.dump();
}

/// Runs `body`, mapping exceptions to an exit code and a JSON line on `err`.
inline int guarded(const std::function<int()>& body, std::ostream& err = std::cerr) {
  try {
    return body();
  } catch (const Error& e) {
    err << error_line(to_string(e.kind()), e.what()) << std::endl;
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << error_line("runtime", e.what()) << std::endl;
    return kExitRuntime;
  }
}

// ---------------------------------------------------------------------------
// finetune

struct FinetuneHooks {
  /// Called with the bound port once the API is up (human mode).
  std::function<void(int)> on_listening;
  std::ostream* progress = nullptr;
};

/// Runs (or resumes) the session described by `c`, appending to its output directory.
inline finetune::SessionLog run_finetune(const RunConfig& c, const FinetuneHooks& hooks = {}) {
  c.validate();
  SessionParts parts = make_session_parts(c);
  finetune::SessionLog resume = open_session_dir(c);
  EpisodeWriter writer(SessionFiles{c.output_dir}.episodes());

  finetune::SessionOptions opts;
  opts.on_timeout = c.human.on_timeout;
  auto report = [&](const finetune::EpisodeRecord& r) {
    if (hooks.progress) {
      *hooks.progress << "episode " << r.index + 1 << "/" << c.session.episodes << " reward " << format_double(r.reward)
                      << (r.success ? " success" : "") << '\n';
    }
  };

  finetune::SessionLog log;
  if (c.reward_mode == RewardMode::kHuman) {
    HumanRewardChannel channel(std::chrono::milliseconds(static_cast<long long>(std::llround(c.human.timeout_s * 1000.0))));
    LiveSession live(c.task, c.reward_mode, c.session, resume.initial, &channel);
    for (const auto& r : resume.episodes) {
      live.add_episode(r);
      channel.mark_rewarded(r.index);
    }
    ApiServer server(live, c.human.static_dir);
    const auto [host, port] = parse_bind(c.bind);
    const int bound = server.start(host, port);
    if (hooks.on_listening) hooks.on_listening(bound);
    opts.on_pending = [&](const finetune::PendingEpisode& ep) { live.set_pending(ep, parts.env->instance(ep.observation)); };
    opts.on_episode = [&](const finetune::EpisodeRecord& r) {
      writer.append(r);
      live.add_episode(r);
      report(r);
    };
    log = finetune::run_session(*parts.env, *parts.prior, channel, c.session, opts, std::move(resume));
    live.finish(log.aborted);
    server.stop();
  } else {
    opts.on_episode = [&](const finetune::EpisodeRecord& r) {
      writer.append(r);
      report(r);
    };
    log = finetune::run_session(*parts.env, *parts.prior, *parts.automated_reward, c.session, opts, std::move(resume));
  }
  write_summary(c.output_dir, log);
  return log;
}

inline int cli_finetune(const std::string& config_path, const std::string& output_override, std::ostream& out) {
  RunConfig c = load_run_config(config_path);
  if (!output_override.empty()) c.output_dir = output_override;
  FinetuneHooks hooks;
  hooks.progress = &out;
  hooks.on_listening = [&](int port) { out << "listening on port " << port << std::endl; };
  const auto log = run_finetune(c, hooks);
  out << nlohmann::json{{"episodes", log.episodes.size()}, {"aborted", log.aborted}, {"output_dir", c.output_dir}}.dump()
      << '\n';
  return log.aborted ? kExitRuntime : kExitOk;
}

// ---------------------------------------------------------------------------
// train-policy

inline constexpr int kTrainingElites = 10;

/// Trains the configured head on the top-10 episodes of a session directory.
inline policy::TrainedPolicy train_policy_from_session(const fs::path& session_dir, const policy::PolicyConfig& cfg) {
  const finetune::SessionLog log = read_session_log(session_dir);
  if (log.episodes.size() < static_cast<std::size_t>(kTrainingElites)) {
    throw Error(ErrorKind::kInsufficientEpisodes, "train-policy: session has " + std::to_string(log.episodes.size()) +
                                                      " episodes, need at least " + std::to_string(kTrainingElites));
  }
  const auto elites = elite_samples(log, kTrainingElites);
  return policy::train_policy(elites, cfg);
}

/// Policy config from an explicit file, else from the session header.
inline policy::PolicyConfig resolve_policy_config(const fs::path& session_dir, const std::string& config_path) {
  if (!config_path.empty()) return load_run_config(config_path).policy;
  return policy::policy_config_from_json(read_json_file(SessionFiles{session_dir}.header()).at("policy"));
}

inline int cli_train_policy(const std::string& session_dir, const std::string& config_path, const std::string& head,
                            const std::string& out_path, std::ostream& out) {
  policy::PolicyConfig cfg = resolve_policy_config(session_dir, config_path);
  if (!head.empty()) cfg.head = policy::head_from_string(head);
  cfg.validate();
  const auto p = train_policy_from_session(session_dir, cfg);
  policy::save_policy(p, out_path);
  out << nlohmann::json{{"policy", out_path},
                        {"head", policy::to_string(cfg.head)},
                        {"final_loss", p.loss_curve.empty() ? 0.0 : p.loss_curve.back()}}
             .dump()
      << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string config_path;
  std::string method = "prior-only";
  int trials = 10;
  std::vector<std::uint64_t> seeds{0};
  std::string policy_path;
  std::string out_path;
};

inline EvalReport run_eval(const RunConfig& c, EvalMethod method, int trials, const std::vector<std::uint64_t>& seeds,
                           const std::string& policy_path) {
  c.validate();
  if (method == EvalMethod::kDeft && (policy_path.empty() || !fs::exists(policy_path))) {
    throw Error(ErrorKind::kConfig, "eval: deft requires an existing policy weight file");
  }
  SessionParts parts = make_session_parts(c);
  std::optional<policy::TrainedPolicy> pol;
  if (method == EvalMethod::kDeft) pol = policy::load_policy(policy_path);
  return evaluate(*parts.env, *parts.prior, method, trials, seeds, pol ? &*pol : nullptr);
}

inline int cli_eval(const EvalArgs& a, std::ostream& out) {
  const RunConfig c = load_run_config(a.config_path);
  const EvalReport rep = run_eval(c, eval_method_from_string(a.method), a.trials, a.seeds, a.policy_path);
  const std::string text = to_json(rep).dump(2);
  if (!a.out_path.empty()) {
    std::ofstream f(a.out_path);
    if (!f) throw Error(ErrorKind::kIo, "cannot write " + a.out_path);
    f << text << '\n';
  }
  out << nlohmann::json{{"task", rep.task}, {"method", to_string(rep.method)}, {"successes", rep.successes},
                        {"total", rep.total()}}
             .dump()
      << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// export-curves

inline std::vector<CurveRow> curves_for_sessions(const std::vector<std::string>& dirs, int window = kCurveWindow) {
  std::vector<CurveRow> rows;
  for (const auto& d : dirs) {
    const auto eps = read_episodes(SessionFiles{d}.episodes());
    const auto name = fs::path(d).filename().empty() ? fs::path(d).parent_path().filename() : fs::path(d).filename();
    const auto r = curve_rows(name.string(), eps, window);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return rows;
}

inline int cli_export_curves(const std::vector<std::string>& dirs, const std::string& out_path, int window,
                             std::ostream& out) {
  if (dirs.empty()) throw Error(ErrorKind::kConfig, "export-curves: no session directories given");
  const auto rows = curves_for_sessions(dirs, window);
  if (out_path.empty() || out_path == "-") {
    write_curves_csv(out, rows);
  } else {
    std::ofstream f(out_path);
    if (!f) throw Error(ErrorKind::kIo, "cannot write " + out_path);
    write_curves_csv(f, rows);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// replay

struct ReplayResult {
  int episodes = 0;
  int mismatches = 0;  // automated-mode episodes whose recomputed reward differs
  int distribution_mismatches = 0;
};

/// Re-executes logged grasps and re-derives the distribution snapshots from
/// logged rewards. Human rewards are taken verbatim.
inline ReplayResult replay_session(const fs::path& dir, const RunConfig& c) {
  nlohmann::json header;
  const finetune::SessionLog log = read_session_log(dir, &header);
  const RewardMode mode = reward_mode_from_string(header.at("reward_mode").get<std::string>());
  const finetune::SessionConfig cfg = finetune::session_config_from_json(header.at("session"));
  SessionParts parts = make_session_parts(c);
  ReplayResult res;
  res.episodes = static_cast<int>(log.episodes.size());
  for (std::size_t k = 0; k < log.episodes.size(); ++k) {
    const auto& r = log.episodes[k];
    if (mode != RewardMode::kHuman) {
      const affordance::Observation obs = parts.env->observe_instance(
          simenv::make_instance(parts.env->spec(), r.observation_id));
      finetune::PendingEpisode ep;
      ep.index = r.index;
      ep.observation = obs;
      ep.executed = r.executed;
      ep.outcome = parts.env->execute(obs, r.executed);
      const double recomputed = std::clamp(*parts.automated_reward->collect(ep), 0.0, 1.0);
      if (recomputed != r.reward) ++res.mismatches;
    }
    const int n = static_cast<int>(k) + 1;
    const finetune::ResidualDistribution expect =
        n > cfg.warmup ? finetune::refit_distribution(std::span(log.episodes).first(k + 1), std::min(cfg.elites, n))
                       : (k == 0 ? log.initial : log.episodes[k - 1].distribution);
    if (expect.mean != r.distribution.mean || expect.stddev != r.distribution.stddev) ++res.distribution_mismatches;
  }
  return res;
}

inline int cli_replay(const std::string& session_dir, const std::string& config_path, std::ostream& out) {
  const RunConfig c = load_run_config(config_path);
  const ReplayResult r = replay_session(session_dir, c);
  out << nlohmann::json{{"episodes", r.episodes},
                        {"reward_mismatches", r.mismatches},
                        {"distribution_mismatches", r.distribution_mismatches}}
             .dump()
      << '\n';
  return (r.mismatches == 0 && r.distribution_mismatches == 0) ? kExitOk : kExitRuntime;
}

// ---------------------------------------------------------------------------
// serve

/// Serves a recorded session read-only (history, distribution) until `stop` returns true.
inline int cli_serve(const std::string& session_dir, const std::string& bind, const std::string& static_dir,
                     std::ostream& out, const std::function<bool()>& stop = [] { return false; }) {
  nlohmann::json header;
  const finetune::SessionLog log = read_session_log(session_dir, &header);
  LiveSession live(header.at("task").get<std::string>(),
                   reward_mode_from_string(header.at("reward_mode").get<std::string>()),
                   finetune::session_config_from_json(header.at("session")), log.initial);
  for (const auto& r : log.episodes) live.add_episode(r);
  const auto cfg = finetune::session_config_from_json(header.at("session"));
  live.finish(static_cast<int>(log.episodes.size()) < cfg.episodes);
  ApiServer server(live, static_dir);
  const auto [host, port] = parse_bind(bind);
  out << "listening on port " << server.start(host, port) << std::endl;
  while (!stop()) std::this_thread::sleep_for(std::chrono::milliseconds(200));
  return kExitOk;
}

}  // namespace deft::harness
