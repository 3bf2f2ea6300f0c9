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

// Learning curves as CSV.
//
// Columns: session,episode,reward,success,reward_ma,success_rate_ma
//   episode          1-based
//   reward_ma        mean reward over the trailing window (shorter at the start)
//   success_rate_ma  fraction of successes over the same window

#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "deft/finetune.hpp"

namespace deft::harness {

inline constexpr int kCurveWindow = 5;

struct CurveRow {
  std::string session;
  int episode = 0;
  double reward = 0.0;
  bool success = false;
  double reward_ma = 0.0;
  double success_rate_ma = 0.0;
};

inline std::vector<CurveRow> curve_rows(const std::string& session, std::span<const finetune::EpisodeRecord> eps,
                                        int window = kCurveWindow) {
  if (window < 1) throw Error(ErrorKind::kConfig, "curve window must be >= 1");
  std::vector<CurveRow> rows;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const std::size_t lo = i + 1 >= static_cast<std::size_t>(window) ? i + 1 - window : 0;
    double rs = 0.0, ss = 0.0;
    for (std::size_t j = lo; j <= i; ++j) {
      rs += eps[j].reward;
      ss += eps[j].success ? 1.0 : 0.0;
    }
    const double n = static_cast<double>(i - lo + 1);
    rows.push_back({session, static_cast<int>(i) + 1, eps[i].reward, eps[i].success, rs / n, ss / n});
  }
  return rows;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_curves_csv(std::ostream& out, const std::vector<CurveRow>& rows) {
  out << "session,episode,reward,success,reward_ma,success_rate_ma\n";
  for (const auto& r : rows) {
    out << r.session << ',' << r.episode << ',' << format_double(r.reward) << ',' << (r.success ? 1 : 0) << ','
        << format_double(r.reward_ma) << ',' << format_double(r.success_rate_ma) << '\n';
  }
}

}  // namespace deft::harness
