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

// Run configuration and on-disk session logs.
//
// A session directory holds:
//   session.json    header: task, reward mode, configs, initial distribution
//   episodes.jsonl  one EpisodeRecord per line, appended as episodes finish
//   summary.json    elites and final distribution, written when the loop ends

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "deft/affordance.hpp"
#include "deft/finetune.hpp"
#include "deft/policy.hpp"
#include "deft/simenv.hpp"
#include "json.hpp"

namespace deft::harness {

namespace fs = std::filesystem;

inline constexpr int kSchemaVersion = 1;

enum class RewardMode { kHuman, kOracle, kEmbedding };

inline const char* to_string(RewardMode m) {
  switch (m) {
    case RewardMode::kHuman: return "human";
    case RewardMode::kOracle: return "oracle";
    case RewardMode::kEmbedding: return "embedding";
  }
  return "oracle";
}

inline RewardMode reward_mode_from_string(const std::string& s) {
  if (s == "human") return RewardMode::kHuman;
  if (s == "oracle") return RewardMode::kOracle;
  if (s == "embedding") return RewardMode::kEmbedding;
  throw Error(ErrorKind::kConfig, "reward_mode must be human, oracle, or embedding (got '" + s + "')");
}

struct PriorConfig {
  std::string kind = "synthetic";  // synthetic | table | toy-head
  std::string path;
};

struct FeatureConfig {
  int dim = simenv::FeatureSynthesizer::kDefaultDim;
  std::uint64_t seed = 0x5eedf00d;
  double noise = 0.01;
};

struct HumanConfig {
  double timeout_s = 0.0;  // 0 waits forever
  finetune::TimeoutPolicy on_timeout = finetune::TimeoutPolicy::kPause;
  std::string static_dir;  // optional built operator panel
};

/// Parsed run configuration. Relative paths are resolved against the config file's directory.
struct RunConfig {
  std::string task = "pick-cup";
  std::string task_dir = "data/tasks";
  PriorConfig prior;
  RewardMode reward_mode = RewardMode::kOracle;
  finetune::SessionConfig session;
  policy::PolicyConfig policy;
  FeatureConfig features;
  double embedding_scale_fraction = 0.25;
  std::string output_dir = "runs/session";
  std::string bind = "127.0.0.1:8080";
  HumanConfig human;

  void validate() const {
    simenv::task_index(task);
    session.validate();
    policy.validate();
    if (features.dim < 1) throw Error(ErrorKind::kConfig, "features.dim must be >= 1");
    if (!(embedding_scale_fraction > 0.0)) throw Error(ErrorKind::kConfig, "embedding.scale_fraction must be > 0");
    if (!fs::exists(fs::path(task_dir) / (task + ".json"))) {
      throw Error(ErrorKind::kConfig, "task file not found: " + (fs::path(task_dir) / (task + ".json")).string());
    }
    if (prior.kind != "synthetic" && prior.kind != "table" && prior.kind != "toy-head") {
      throw Error(ErrorKind::kConfig, "prior.kind must be synthetic, table, or toy-head");
    }
    if (prior.kind != "synthetic" && !fs::exists(prior.path)) {
      throw Error(ErrorKind::kConfig, "prior file not found: " + prior.path);
    }
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"schema_version", kSchemaVersion},
          {"task", c.task},
          {"task_dir", c.task_dir},
          {"prior", {{"kind", c.prior.kind}, {"path", c.prior.path}}},
          {"reward_mode", to_string(c.reward_mode)},
          {"session", finetune::to_json(c.session)},
          {"policy", policy::to_json(c.policy)},
          {"features", {{"dim", c.features.dim}, {"seed", c.features.seed}, {"noise", c.features.noise}}},
          {"embedding", {{"scale_fraction", c.embedding_scale_fraction}}},
          {"output_dir", c.output_dir},
          {"bind", c.bind},
          {"human",
           {{"timeout_s", c.human.timeout_s},
            {"on_timeout", c.human.on_timeout == finetune::TimeoutPolicy::kAbort ? "abort" : "pause"},
            {"static_dir", c.human.static_dir}}}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j, const fs::path& base_dir = {}) {
  RunConfig c;
  auto resolve = [&](const std::string& p) {
    if (p.empty()) return p;
    const fs::path path(p);
    return (path.is_relative() ? base_dir / path : path).lexically_normal().string();
  };
  try {
    if (j.value("schema_version", kSchemaVersion) != kSchemaVersion) {
      throw Error(ErrorKind::kConfig, "unsupported config schema_version");
    }
    c.task = j.value("task", c.task);
    c.task_dir = resolve(j.value("task_dir", c.task_dir));
    if (j.contains("prior")) {
      c.prior.kind = j["prior"].value("kind", c.prior.kind);
      c.prior.path = resolve(j["prior"].value("path", std::string()));
    }
    c.reward_mode = reward_mode_from_string(j.value("reward_mode", std::string("oracle")));
    if (j.contains("session")) c.session = finetune::session_config_from_json(j["session"]);
    if (j.contains("policy")) c.policy = policy::policy_config_from_json(j["policy"]);
    if (j.contains("features")) {
      c.features.dim = j["features"].value("dim", c.features.dim);
      c.features.seed = j["features"].value("seed", c.features.seed);
      c.features.noise = j["features"].value("noise", c.features.noise);
    }
    if (j.contains("embedding")) {
      c.embedding_scale_fraction = j["embedding"].value("scale_fraction", c.embedding_scale_fraction);
    }
    c.output_dir = resolve(j.value("output_dir", c.output_dir));
    c.bind = j.value("bind", c.bind);
    if (j.contains("human")) {
      c.human.timeout_s = j["human"].value("timeout_s", c.human.timeout_s);
      const std::string policy = j["human"].value("on_timeout", std::string("pause"));
      if (policy != "pause" && policy != "abort") throw Error(ErrorKind::kConfig, "human.on_timeout: pause|abort");
      c.human.on_timeout = policy == "abort" ? finetune::TimeoutPolicy::kAbort : finetune::TimeoutPolicy::kPause;
      c.human.static_dir = resolve(j["human"].value("static_dir", std::string()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kConfig, "cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kConfig, path + ": " + e.what());
  }
  return run_config_from_json(j, fs::path(path).parent_path());
}

// ---------------------------------------------------------------------------
// Assembling a session from a config

/// Environment, prior, and automated reward channel built from a RunConfig.
struct SessionParts {
  std::unique_ptr<simenv::SimEnvironment> env;
  std::unique_ptr<affordance::PriorSource> prior;
  std::unique_ptr<finetune::RewardChannel> automated_reward;  // null in human mode
};

inline simenv::FeatureSynthesizer make_synthesizer(const FeatureConfig& f) {
  return simenv::FeatureSynthesizer(f.dim, f.seed, f.noise);
}

inline std::unique_ptr<affordance::PriorSource> make_prior(const PriorConfig& p, const simenv::SimEnvironment& env) {
  if (p.kind == "table") return std::make_unique<affordance::TablePrior>(affordance::TablePrior::load(p.path));
  if (p.kind == "toy-head") {
    std::ifstream in(p.path);
    if (!in) throw Error(ErrorKind::kIo, "cannot open toy head " + p.path);
    nlohmann::json j;
    in >> j;
    return std::make_unique<affordance::HeadPrior>(affordance::toy_head_from_json(j));
  }
  return std::make_unique<affordance::BiasedOraclePrior>(simenv::make_biased_prior(env));
}

inline SessionParts make_session_parts(const RunConfig& c) {
  SessionParts parts;
  const simenv::TaskSpec spec = simenv::load_task_from_library(c.task_dir, c.task);
  const simenv::FeatureSynthesizer synth = make_synthesizer(c.features);
  parts.env = std::make_unique<simenv::SimEnvironment>(spec, synth, c.session.seed);
  parts.prior = make_prior(c.prior, *parts.env);
  if (c.reward_mode == RewardMode::kOracle) {
    parts.automated_reward = std::make_unique<simenv::OracleRewardChannel>();
  } else if (c.reward_mode == RewardMode::kEmbedding) {
    const double scale = c.embedding_scale_fraction * simenv::embedding_span(spec, synth);
    parts.automated_reward =
        std::make_unique<simenv::EmbeddingRewardChannel>(simenv::embedding_goal(spec, synth), scale);
  }
  return parts;
}

// ---------------------------------------------------------------------------
// Session directory

struct SessionFiles {
  fs::path dir;
  fs::path header() const { return dir / "session.json"; }
  fs::path episodes() const { return dir / "episodes.jsonl"; }
  fs::path summary() const { return dir / "summary.json"; }
};

/// Header contents; used to refuse resuming a directory written by a different config.
inline nlohmann::json session_header(const RunConfig& c) {
  return {{"format", "deft-session"},
          {"schema_version", kSchemaVersion},
          {"task", c.task},
          {"reward_mode", to_string(c.reward_mode)},
          {"prior", {{"kind", c.prior.kind}, {"path", c.prior.path}}},
          {"session", finetune::to_json(c.session)},
          {"policy", policy::to_json(c.policy)},
          {"features", {{"dim", c.features.dim}, {"seed", c.features.seed}, {"noise", c.features.noise}}},
          {"embedding", {{"scale_fraction", c.embedding_scale_fraction}}},
          {"initial_distribution", finetune::to_json(finetune::init_distribution(c.session))}};
}

inline nlohmann::json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + p.string());
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, p.string() + ": " + e.what());
  }
}

/// Reads episodes.jsonl; a malformed line raises kParse naming its line number.
inline std::vector<finetune::EpisodeRecord> read_episodes(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<finetune::EpisodeRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(finetune::episode_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::kParse, path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorKind::kParse, path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
    }
    if (out.back().index != static_cast<int>(out.size()) - 1) {
      throw Error(ErrorKind::kParse, path.string() + ": line " + std::to_string(line_no) + ": episode index out of order");
    }
  }
  return out;
}

/// Loads a session directory (header + episodes) into a SessionLog.
inline finetune::SessionLog read_session_log(const fs::path& dir, nlohmann::json* header_out = nullptr) {
  const SessionFiles files{dir};
  const nlohmann::json header = read_json_file(files.header());
  finetune::SessionLog log;
  log.initial = finetune::distribution_from_json(header.at("initial_distribution"));
  log.episodes = fs::exists(files.episodes()) ? read_episodes(files.episodes()) : std::vector<finetune::EpisodeRecord>{};
  const int elites = header.at("session").value("elites", 10);
  log.elites = finetune::rank_elites(log.episodes, elites);
  if (header_out) *header_out = header;
  return log;
}

/// Append-only writer for episodes.jsonl.
class EpisodeWriter {
 public:
  explicit EpisodeWriter(const fs::path& path) : out_(path, std::ios::app) {
    if (!out_) throw Error(ErrorKind::kIo, "cannot append to " + path.string());
  }

  void append(const finetune::EpisodeRecord& r) {
    out_ << finetune::to_json(r).dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

/// Creates the directory and header, or validates an existing header and
/// returns the episodes already on disk for resumption.
inline finetune::SessionLog open_session_dir(const RunConfig& c) {
  const SessionFiles files{c.output_dir};
  fs::create_directories(files.dir);
  const nlohmann::json header = session_header(c);
  finetune::SessionLog log;
  log.initial = finetune::init_distribution(c.session);
  if (fs::exists(files.header())) {
    const nlohmann::json existing = read_json_file(files.header());
    if (existing != header) {
      throw Error(ErrorKind::kConfig, "output directory holds a session with a different configuration: " +
                                          files.dir.string());
    }
    if (fs::exists(files.episodes())) log.episodes = read_episodes(files.episodes());
  } else {
    std::ofstream out(files.header());
    out << header.dump(2) << '\n';
  }
  return log;
}

inline void write_summary(const fs::path& dir, const finetune::SessionLog& log) {
  const finetune::ResidualDistribution final_dist = log.episodes.empty() ? log.initial : log.episodes.back().distribution;
  nlohmann::json j{{"episodes", log.episodes.size()},
                   {"elites", log.elites},
                   {"aborted", log.aborted},
                   {"final_distribution", finetune::to_json(final_dist)}};
  std::ofstream out(SessionFiles{dir}.summary());
  out << j.dump(2) << '\n';
}

/// Elite samples for policy training, ranked exactly like the CEM loop.
inline std::vector<policy::EliteSample> elite_samples(const finetune::SessionLog& log, int count) {
  std::vector<policy::EliteSample> out;
  for (int i : finetune::rank_elites(log.episodes, count)) {
    const auto& r = log.episodes[i];
    out.push_back({r.features, r.prior, r.residual});
  }
  return out;
}

}  // namespace deft::harness
