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

// Live session state, the human reward channel, and the HTTP+JSON API the
// operator panel talks to. Payloads carry observations, schematics, grasp
// parameters, and rewards only; hidden optima and prior biases never leave
// the environment.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "deft/finetune.hpp"
#include "deft/harness/session_io.hpp"
#include "deft/simenv.hpp"
#include "httplib.h"
#include "json.hpp"

namespace deft::harness {

enum class SubmitStatus { kAccepted, kUnknownEpisode, kDuplicate, kOutOfRange };

/// Blocks the session loop until an operator submits a reward for the pending episode.
class HumanRewardChannel final : public finetune::RewardChannel {
 public:
  /// A zero timeout waits indefinitely.
  explicit HumanRewardChannel(std::chrono::milliseconds timeout = std::chrono::milliseconds(0))
      : timeout_(timeout) {}

  std::optional<double> collect(const finetune::PendingEpisode& ep) override {
    std::unique_lock lock(mu_);
    pending_index_ = ep.index;
    auto ready = [&] { return submitted_.has_value() || closed_; };
    if (timeout_.count() > 0) {
      if (!cv_.wait_for(lock, timeout_, ready)) return std::nullopt;
    } else {
      cv_.wait(lock, ready);
    }
    if (!submitted_) return std::nullopt;
    const double r = *submitted_;
    submitted_.reset();
    pending_index_.reset();
    return r;
  }

  std::string mode() const override { return "human"; }

  SubmitStatus submit(int index, double reward) {
    std::lock_guard lock(mu_);
    if (!(reward >= 0.0 && reward <= 1.0)) return SubmitStatus::kOutOfRange;
    if (rewarded_.contains(index)) return SubmitStatus::kDuplicate;
    if (!pending_index_ || *pending_index_ != index) return SubmitStatus::kUnknownEpisode;
    rewarded_.insert(index);
    submitted_ = reward;
    cv_.notify_all();
    return SubmitStatus::kAccepted;
  }

  /// Episodes rewarded in an earlier (resumed) run.
  void mark_rewarded(int index) {
    std::lock_guard lock(mu_);
    rewarded_.insert(index);
  }

  /// Unblocks a waiting collect() with no reward (shutdown).
  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::optional<int> pending_index_;
  std::optional<double> submitted_;
  std::set<int> rewarded_;
  std::chrono::milliseconds timeout_;
  bool closed_ = false;
};

enum class SessionStatus { kRunning, kAwaitingReward, kFinished, kAborted };

inline const char* to_string(SessionStatus s) {
  switch (s) {
    case SessionStatus::kRunning: return "running";
    case SessionStatus::kAwaitingReward: return "awaiting-reward";
    case SessionStatus::kFinished: return "finished";
    case SessionStatus::kAborted: return "aborted";
  }
  return "running";
}

/// Thread-safe mirror of a session, fed by the loop's callbacks and read by the API.
class LiveSession {
 public:
  struct Pending {
    int index = 0;
    nlohmann::json schematic;
    affordance::GraspParams prior;
    ParamVector residual;
    affordance::GraspParams executed;
  };

  LiveSession(std::string task, RewardMode mode, finetune::SessionConfig cfg, finetune::ResidualDistribution initial,
              HumanRewardChannel* human = nullptr)
      : task_(std::move(task)), mode_(mode), cfg_(cfg), initial_(std::move(initial)), human_(human) {}

  void set_pending(const finetune::PendingEpisode& ep, const simenv::TaskInstance& inst) {
    std::lock_guard lock(mu_);
    pending_ = Pending{ep.index, simenv::to_json(simenv::render_schematic(inst, ep.executed)), ep.prior,
                       ep.residual, ep.executed};
    if (mode_ == RewardMode::kHuman) status_ = SessionStatus::kAwaitingReward;
  }

  void add_episode(const finetune::EpisodeRecord& r) {
    std::lock_guard lock(mu_);
    episodes_.push_back(r);
    pending_.reset();
    status_ = SessionStatus::kRunning;
  }

  void finish(bool aborted) {
    std::lock_guard lock(mu_);
    pending_.reset();
    status_ = aborted ? SessionStatus::kAborted : SessionStatus::kFinished;
  }

  SubmitStatus submit(int index, double reward) {
    {
      std::lock_guard lock(mu_);
      if (!(reward >= 0.0 && reward <= 1.0)) return SubmitStatus::kOutOfRange;
      if (index >= 0 && index < static_cast<int>(episodes_.size())) return SubmitStatus::kDuplicate;
    }
    if (!human_) return SubmitStatus::kUnknownEpisode;
    return human_->submit(index, reward);
  }

  nlohmann::json session_json() const {
    std::lock_guard lock(mu_);
    const int done = static_cast<int>(episodes_.size());
    return {{"schema_version", kSchemaVersion},
            {"type", "session"},
            {"task", task_},
            {"reward_mode", to_string(mode_)},
            {"status", to_string(status_)},
            {"episode", done},
            {"episodes", cfg_.episodes},
            {"warmup", cfg_.warmup},
            {"elites", cfg_.elites},
            {"in_warmup", done < cfg_.warmup},
            {"config", finetune::to_json(cfg_)}};
  }

  nlohmann::json pending_json() const {
    std::lock_guard lock(mu_);
    nlohmann::json j{{"schema_version", kSchemaVersion}, {"type", "episode-pending"}};
    if (!pending_) {
      j["pending"] = nullptr;
      return j;
    }
    j["pending"] = {{"index", pending_->index},
                    {"schematic", pending_->schematic},
                    {"xi", affordance::to_json(pending_->prior)},
                    {"epsilon", to_std(pending_->residual)},
                    {"executed", affordance::to_json(pending_->executed)}};
    return j;
  }

  nlohmann::json history_json(int from) const {
    std::lock_guard lock(mu_);
    nlohmann::json eps = nlohmann::json::array();
    for (std::size_t i = static_cast<std::size_t>(std::max(from, 0)); i < episodes_.size(); ++i) {
      const auto& r = episodes_[i];
      eps.push_back({{"index", r.index},
                     {"reward", r.reward},
                     {"success", r.success},
                     {"xi", affordance::to_json(r.prior)},
                     {"epsilon", to_std(r.residual)},
                     {"executed", affordance::to_json(r.executed)}});
    }
    return {{"schema_version", kSchemaVersion}, {"type", "history"}, {"from", std::max(from, 0)},
            {"total", episodes_.size()}, {"episodes", eps}};
  }

  nlohmann::json distribution_json() const {
    std::lock_guard lock(mu_);
    nlohmann::json series = nlohmann::json::array();
    for (const auto& r : episodes_) {
      series.push_back({{"episode", r.index}, {"mean", to_std(r.distribution.mean)}, {"std", to_std(r.distribution.stddev)}});
    }
    return {{"schema_version", kSchemaVersion}, {"type", "distribution"}, {"warmup", cfg_.warmup},
            {"initial", finetune::to_json(initial_)}, {"series", series}};
  }

  std::vector<finetune::EpisodeRecord> episodes() const {
    std::lock_guard lock(mu_);
    return episodes_;
  }

 private:
  mutable std::mutex mu_;
  std::string task_;
  RewardMode mode_;
  finetune::SessionConfig cfg_;
  finetune::ResidualDistribution initial_;
  HumanRewardChannel* human_;
  std::vector<finetune::EpisodeRecord> episodes_;
  std::optional<Pending> pending_;
  SessionStatus status_ = SessionStatus::kRunning;
};

inline nlohmann::json error_body(int status, const std::string& message) {
  return {{"schema_version", kSchemaVersion}, {"type", "error"}, {"status", status}, {"error", message}};
}

/// HTTP endpoints over a LiveSession, served on a background thread.
class ApiServer {
 public:
  explicit ApiServer(LiveSession& session, std::string static_dir = {}) : session_(session) {
    auto json_reply = [](httplib::Response& res, int status, const nlohmann::json& body) {
      res.status = status;
      res.set_content(body.dump(), "application/json");
    };
    server_.Get("/api/session", [this, json_reply](const httplib::Request&, httplib::Response& res) {
      json_reply(res, 200, session_.session_json());
    });
    server_.Get("/api/episode/pending", [this, json_reply](const httplib::Request&, httplib::Response& res) {
      json_reply(res, 200, session_.pending_json());
    });
    server_.Get("/api/history", [this, json_reply](const httplib::Request& req, httplib::Response& res) {
      int from = 0;
      if (req.has_param("from")) {
        try {
          from = std::stoi(req.get_param_value("from"));
        } catch (const std::exception&) {
          json_reply(res, 422, error_body(422, "from must be an integer"));
          return;
        }
      }
      json_reply(res, 200, session_.history_json(from));
    });
    server_.Get("/api/distribution", [this, json_reply](const httplib::Request&, httplib::Response& res) {
      json_reply(res, 200, session_.distribution_json());
    });
    server_.Post(R"(/api/episode/(-?\d+)/reward)",
                 [this, json_reply](const httplib::Request& req, httplib::Response& res) {
                   const int index = std::stoi(req.matches[1].str());
                   double reward = 0.0;
                   try {
                     const auto body = nlohmann::json::parse(req.body);
                     if (!body.contains("reward") || !body["reward"].is_number()) {
                       json_reply(res, 422, error_body(422, "body must be {\"reward\": number}"));
                       return;
                     }
                     reward = body["reward"].get<double>();
                   } catch (const nlohmann::json::exception&) {
                     json_reply(res, 422, error_body(422, "malformed JSON body"));
                     return;
                   }
                   switch (session_.submit(index, reward)) {
                     case SubmitStatus::kAccepted:
                       json_reply(res, 200, {{"schema_version", kSchemaVersion}, {"type", "reward-ack"},
                                             {"index", index}, {"reward", reward}});
                       return;
                     case SubmitStatus::kOutOfRange:
                       json_reply(res, 422, error_body(422, "reward must be in [0, 1]"));
                       return;
                     case SubmitStatus::kDuplicate:
                       json_reply(res, 409, error_body(409, "episode already has a reward"));
                       return;
                     case SubmitStatus::kUnknownEpisode:
                       json_reply(res, 404, error_body(404, "no pending episode with that index"));
                       return;
                   }
                 });
    if (!static_dir.empty()) server_.set_mount_point("/", static_dir);
  }

  ~ApiServer() { stop(); }

  ApiServer(const ApiServer&) = delete;
  ApiServer& operator=(const ApiServer&) = delete;

  /// Binds and starts serving; port 0 picks a free port. Returns the bound port.
  int start(const std::string& host, int port) {
    if (port == 0) {
      port_ = server_.bind_to_any_port(host);
    } else {
      port_ = server_.bind_to_port(host, port) ? port : -1;
    }
    if (port_ < 0) throw Error(ErrorKind::kIo, "cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  void stop() {
    if (thread_.joinable()) {
      server_.stop();
      thread_.join();
    }
  }

  int port() const { return port_; }

 private:
  LiveSession& session_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

/// "host:port" -> (host, port).
inline std::pair<std::string, int> parse_bind(const std::string& bind) {
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos) throw Error(ErrorKind::kConfig, "bind must be host:port");
  try {
    return {bind.substr(0, colon), std::stoi(bind.substr(colon + 1))};
  } catch (const std::exception&) {
    throw Error(ErrorKind::kConfig, "bind must be host:port");
  }
}

}  // namespace deft::harness
