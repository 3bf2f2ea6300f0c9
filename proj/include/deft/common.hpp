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

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace deft {

/// Layout of the fine-tuned grasp vector: contact (3), wrist Euler (3), hand joints (16).
inline constexpr int kContactDim = 3;
inline constexpr int kWristDim = 3;
inline constexpr int kHandJointDim = 16;
inline constexpr int kParamDim = kContactDim + kWristDim + kHandJointDim;

inline constexpr int kContactOffset = 0;
inline constexpr int kWristOffset = kContactDim;
inline constexpr int kHandOffset = kContactDim + kWristDim;

using Vec3 = Eigen::Vector3d;
using HandJoints = Eigen::Matrix<double, kHandJointDim, 1>;
using ParamVector = Eigen::Matrix<double, kParamDim, 1>;
using FeatureVector = Eigen::VectorXd;

enum class ErrorKind {
  kPrecondition,
  kInsufficientTrajectory,
  kInsufficientPoints,
  kInvalidDepth,
  kEmptyDataset,
  kMissingPrior,
  kConfig,
  kInsufficientEpisodes,
  kDimensionMismatch,
  kParse,
  kIo,
  kTimeout,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kPrecondition: return "precondition";
    case ErrorKind::kInsufficientTrajectory: return "insufficient-trajectory";
    case ErrorKind::kInsufficientPoints: return "insufficient-points";
    case ErrorKind::kInvalidDepth: return "invalid-depth";
    case ErrorKind::kEmptyDataset: return "empty-dataset";
    case ErrorKind::kMissingPrior: return "missing-prior";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kInsufficientEpisodes: return "insufficient-episodes";
    case ErrorKind::kDimensionMismatch: return "dimension-mismatch";
    case ErrorKind::kParse: return "parse";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kTimeout: return "timeout";
  }
  return "unknown";
}

/// Single exception type for the toolkit; `kind()` distinguishes the failure.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline bool all_finite(const Eigen::Ref<const Eigen::VectorXd>& v) {
  return v.allFinite();
}

inline std::vector<double> to_std(const Eigen::Ref<const Eigen::VectorXd>& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

}  // namespace deft
