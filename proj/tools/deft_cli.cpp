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

// deft: command-line front end.

#include <atomic>
#include <csignal>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "deft/harness/commands.hpp"

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

}  // namespace

int main(int argc, char** argv) {
  using namespace deft::harness;

  CLI::App app{"DEFT fine-tuning toolkit"};
  app.require_subcommand(1);

  std::string config, output, session, head, out_path, method = "prior-only", policy_path, bind = "127.0.0.1:8080",
                                                        static_dir;
  std::vector<std::string> sessions;
  std::vector<std::uint64_t> seeds{0};
  int trials = 10, window = kCurveWindow;

  auto* finetune = app.add_subcommand("finetune", "run or resume a fine-tuning session");
  finetune->add_option("-c,--config", config, "run config JSON")->required();
  finetune->add_option("-o,--output", output, "override output_dir");

  auto* train = app.add_subcommand("train-policy", "train a residual policy on a session's top-10 episodes");
  train->add_option("-s,--session", session, "session directory")->required();
  train->add_option("-c,--config", config, "run config JSON (policy section); defaults to the session header");
  train->add_option("--head", head, "cvae | mlp | direct-vae");
  train->add_option("-o,--out", out_path, "weight file")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a method on held-out instances");
  eval->add_option("-c,--config", config, "run config JSON")->required();
  eval->add_option("-m,--method", method, "prior-only | no-prior | deft");
  eval->add_option("-t,--trials", trials, "trials per seed");
  eval->add_option("--seeds", seeds, "evaluation seeds");
  eval->add_option("-p,--policy", policy_path, "policy weight file (deft)");
  eval->add_option("-o,--out", out_path, "write the full report here");

  auto* curves = app.add_subcommand("export-curves", "write learning curves as CSV");
  curves->add_option("sessions", sessions, "session directories")->required();
  curves->add_option("-o,--out", out_path, "CSV path (default stdout)");
  curves->add_option("-w,--window", window, "moving-average window");

  auto* replay = app.add_subcommand("replay", "re-execute a logged session and check it");
  replay->add_option("-s,--session", session, "session directory")->required();
  replay->add_option("-c,--config", config, "run config JSON")->required();

  auto* serve = app.add_subcommand("serve", "serve a recorded session over the HTTP API");
  serve->add_option("-s,--session", session, "session directory")->required();
  serve->add_option("-b,--bind", bind, "host:port");
  serve->add_option("--static", static_dir, "directory of built panel assets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << error_line("config", e.what()) << std::endl;
    return kExitConfig;
  }

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);

  return guarded([&]() -> int {
    if (*finetune) return cli_finetune(config, output, std::cout);
    if (*train) return cli_train_policy(session, config, head, out_path, std::cout);
    if (*eval) return cli_eval({config, method, trials, seeds, policy_path, out_path}, std::cout);
    if (*curves) return cli_export_curves(sessions, out_path, window, std::cout);
    if (*replay) return cli_replay(session, config, std::cout);
    return cli_serve(session, bind, static_dir, std::cout, [] { return g_stop.load(); });
  });
}
