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

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "deft/common.hpp"
#include "json.hpp"

namespace deft::kinematics {

/// Unit quaternion with the double cover canonicalized to w >= 0.
class Rotation {
 public:
  Rotation() : q_(Eigen::Quaterniond::Identity()) {}

  explicit Rotation(const Eigen::Quaterniond& q) : q_(q) {
    const double n = q_.norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw Error(ErrorKind::kPrecondition, "rotation from zero or non-finite quaternion");
    }
    q_.coeffs() /= n;
    if (q_.w() < 0.0) q_.coeffs() = -q_.coeffs();
  }

  Rotation(double w, double x, double y, double z) : Rotation(Eigen::Quaterniond(w, x, y, z)) {}

  static Rotation identity() { return Rotation(); }

  /// `axis` need not be normalized; a zero axis yields identity.
  static Rotation from_axis_angle(const Vec3& axis, double angle) {
    const double n = axis.norm();
    if (n == 0.0) return Rotation();
    const Vec3 u = axis / n;
    const double h = 0.5 * angle;
    const double s = std::sin(h);
    return Rotation(std::cos(h), s * u.x(), s * u.y(), s * u.z());
  }

  static Rotation from_rotation_vector(const Vec3& v) {
    const double angle = v.norm();
    if (angle == 0.0) return Rotation();
    return from_axis_angle(v / angle, angle);
  }

  /// Intrinsic X-Y-Z Euler angles: R = Rx(a) * Ry(b) * Rz(c).
  static Rotation from_euler_xyz(const Vec3& e) {
    return from_axis_angle(Vec3::UnitX(), e.x()) * from_axis_angle(Vec3::UnitY(), e.y()) *
           from_axis_angle(Vec3::UnitZ(), e.z());
  }

  struct Euler {
    Vec3 angles;
    bool gimbal_lock = false;
  };

  /// Inverse of from_euler_xyz. The middle angle is in [-pi/2, pi/2]; at
  /// |b| = pi/2 the first and third angles are not separable and
  /// `gimbal_lock` is set (the third angle is then reported as 0).
  Euler to_euler_xyz(double gimbal_tolerance = 1e-9) const {
    const Eigen::Matrix3d m = matrix();
    Euler out;
    const double sb = std::clamp(m(0, 2), -1.0, 1.0);
    const double cb = std::sqrt(std::max(0.0, 1.0 - sb * sb));
    out.angles.y() = std::asin(sb);
    if (cb < gimbal_tolerance) {
      out.gimbal_lock = true;
      out.angles.x() = std::atan2(m(2, 1), m(1, 1));
      out.angles.z() = 0.0;
    } else {
      out.angles.x() = std::atan2(-m(1, 2), m(2, 2));
      out.angles.z() = std::atan2(-m(0, 1), m(0, 0));
    }
    return out;
  }

  /// Rotation vector with magnitude in [0, pi].
  Vec3 to_rotation_vector() const {
    const Vec3 v(q_.x(), q_.y(), q_.z());
    const double s = v.norm();
    if (s == 0.0) return Vec3::Zero();
    return v * (2.0 * std::atan2(s, q_.w()) / s);
  }

  double angle() const {
    const Vec3 v(q_.x(), q_.y(), q_.z());
    return 2.0 * std::atan2(v.norm(), q_.w());
  }

  /// Geodesic distance on SO(3), in [0, pi].
  double angular_distance(const Rotation& other) const {
    return (inverse() * other).angle();
  }

  Rotation inverse() const { return Rotation(q_.conjugate()); }

  Rotation operator*(const Rotation& rhs) const { return Rotation(q_ * rhs.q_); }

  Vec3 rotate(const Vec3& v) const { return q_ * v; }

  Eigen::Matrix3d matrix() const { return q_.toRotationMatrix(); }

  const Eigen::Quaterniond& quaternion() const { return q_; }
  double w() const { return q_.w(); }
  double x() const { return q_.x(); }
  double y() const { return q_.y(); }
  double z() const { return q_.z(); }

  /// Euclidean distance between quaternions modulo sign.
  double quaternion_distance(const Rotation& other) const {
    const Eigen::Vector4d a = q_.coeffs();
    const Eigen::Vector4d b = other.q_.coeffs();
    return std::min((a - b).norm(), (a + b).norm());
  }

 private:
  Eigen::Quaterniond q_;
};

struct SwingTwist {
  double twist_angle = 0.0;
  Rotation swing;
};

/// Factor r = swing * twist(twist_axis, twist_angle) with the swing axis
/// perpendicular to `twist_axis`. twist_angle lies in [-pi, pi].
inline SwingTwist swing_twist(const Rotation& r, const Vec3& twist_axis) {
  if (!twist_axis.allFinite() || std::abs(twist_axis.norm() - 1.0) > 1e-9) {
    throw Error(ErrorKind::kPrecondition, "swing_twist: twist axis must be unit-norm");
  }
  const Vec3 v(r.x(), r.y(), r.z());
  const double p = v.dot(twist_axis);
  SwingTwist out;
  if (p == 0.0 && r.w() == 0.0) {
    // Half-turn about an axis perpendicular to twist_axis: pure swing.
    out.swing = r;
    return out;
  }
  const Vec3 tv = p * twist_axis;
  const Rotation twist(r.w(), tv.x(), tv.y(), tv.z());
  out.twist_angle = 2.0 * std::atan2(twist.quaternion().vec().dot(twist_axis), twist.w());
  out.swing = r * twist.inverse();
  return out;
}

// ---------------------------------------------------------------------------
// Hand model

inline constexpr int kManoJointCount = 15;
inline constexpr int kRobotFingerCount = 4;
inline constexpr int kRobotJointsPerFinger = 4;
static_assert(kRobotFingerCount * kRobotJointsPerFinger == kHandJointDim);

/// Robot joint slots within a finger.
enum RobotJoint : int { kMcpSpread = 0, kMcpBend = 1, kPipBend = 2, kDipBend = 3 };
/// Finger joints carrying MANO rotations.
enum FingerJoint : int { kMcp = 0, kPip = 1, kDip = 2 };

struct ManoPose {
  Vec3 wrist_rot = Vec3::Zero();
  std::array<Vec3, kManoJointCount> joint_rots{};

  ManoPose() { joint_rots.fill(Vec3::Zero()); }

  /// Throws kPrecondition if any axis-angle is non-finite or has magnitude >= pi.
  void validate() const {
    auto check = [](const Vec3& aa) {
      if (!aa.allFinite() || aa.norm() >= std::numbers::pi) {
        throw Error(ErrorKind::kPrecondition, "ManoPose: axis-angle magnitude must be < pi");
      }
    };
    check(wrist_rot);
    for (const auto& j : joint_rots) check(j);
  }

  /// Flat 45-vector of joint axis-angles (wrist excluded).
  Eigen::Matrix<double, 3 * kManoJointCount, 1> flat() const {
    Eigen::Matrix<double, 3 * kManoJointCount, 1> out;
    for (int j = 0; j < kManoJointCount; ++j) out.segment<3>(3 * j) = joint_rots[j];
    return out;
  }
};

struct JointAxes {
  Vec3 bend = Vec3::UnitZ();
  Vec3 spread = Vec3::UnitY();
  Vec3 twist = Vec3::UnitX();
};

struct JointLimit {
  double lo = 0.0;
  double hi = 0.0;
};

struct FingerLayout {
  std::string name;
  std::array<int, 3> mano_joints{};  // MCP, PIP, DIP indices into ManoPose::joint_rots
  std::array<JointAxes, 3> axes{};
  std::array<JointLimit, kRobotJointsPerFinger> limits{};  // indexed by RobotJoint
  double coupling_ratio = 1.0;                              // DIP = ratio * PIP
};

struct HandLayout {
  std::array<FingerLayout, kRobotFingerCount> fingers{};

  void validate() const {
    for (const auto& f : fingers) {
      for (int j : f.mano_joints) {
        if (j < 0 || j >= kManoJointCount) {
          throw Error(ErrorKind::kConfig, "HandLayout: MANO joint index out of range for " + f.name);
        }
      }
      for (const auto& a : f.axes) {
        for (const Vec3* v : {&a.bend, &a.spread, &a.twist}) {
          if (std::abs(v->norm() - 1.0) > 1e-9) {
            throw Error(ErrorKind::kConfig, "HandLayout: non-unit axis on finger " + f.name);
          }
        }
        if (std::abs(a.bend.dot(a.spread)) > 1e-6 || std::abs(a.bend.dot(a.twist)) > 1e-6 ||
            std::abs(a.spread.dot(a.twist)) > 1e-6) {
          throw Error(ErrorKind::kConfig, "HandLayout: axes not orthogonal on finger " + f.name);
        }
      }
      for (const auto& l : f.limits) {
        if (!(l.lo < l.hi)) {
          throw Error(ErrorKind::kConfig, "HandLayout: joint limit lo >= hi on finger " + f.name);
        }
      }
      if (!(f.coupling_ratio > 0.0)) {
        throw Error(ErrorKind::kConfig, "HandLayout: coupling ratio must be positive");
      }
      const auto [lo, hi] = coupled_pip_range(f);
      if (!(lo <= hi)) {
        throw Error(ErrorKind::kConfig, "HandLayout: PIP/DIP limits incompatible with coupling on " + f.name);
      }
    }
  }

  /// PIP interval for which both PIP and ratio * PIP respect their limits.
  static std::pair<double, double> coupled_pip_range(const FingerLayout& f) {
    const auto& pip = f.limits[kPipBend];
    const auto& dip = f.limits[kDipBend];
    return {std::max(pip.lo, dip.lo / f.coupling_ratio), std::min(pip.hi, dip.hi / f.coupling_ratio)};
  }

  JointLimit limit(int robot_index) const {
    return fingers[robot_index / kRobotJointsPerFinger].limits[robot_index % kRobotJointsPerFinger];
  }
};

/// Default layout for a four-finger hand (thumb, index, middle, ring) and the
/// standard MANO joint order (index, middle, pinky, ring, thumb; 3 joints each).
/// Finger axes: twist along the finger (+x), bend about +z, spread about +y.
inline HandLayout default_hand_layout() {
  HandLayout layout;
  const JointAxes finger_axes{Vec3::UnitZ(), Vec3::UnitY(), Vec3::UnitX()};
  const std::array<JointLimit, 4> finger_limits{{{-0.35, 0.35}, {-0.2, 1.6}, {0.0, 1.6}, {0.0, 1.6}}};

  // Thumb axes are the finger axes rolled 45 degrees about +x (thumb opposition).
  const Rotation roll = Rotation::from_axis_angle(Vec3::UnitX(), std::numbers::pi / 4.0);
  const JointAxes thumb_axes{roll.rotate(Vec3::UnitZ()), roll.rotate(Vec3::UnitY()), Vec3::UnitX()};
  const std::array<JointLimit, 4> thumb_limits{{{-0.6, 0.6}, {-0.3, 1.2}, {0.0, 1.4}, {0.0, 1.4}}};

  auto make = [](std::string name, std::array<int, 3> mano, const JointAxes& axes,
                 const std::array<JointLimit, 4>& limits) {
    FingerLayout f;
    f.name = std::move(name);
    f.mano_joints = mano;
    f.axes = {axes, axes, axes};
    f.limits = limits;
    f.coupling_ratio = 1.0;
    return f;
  };
  layout.fingers[0] = make("thumb", {12, 13, 14}, thumb_axes, thumb_limits);
  layout.fingers[1] = make("index", {0, 1, 2}, finger_axes, finger_limits);
  layout.fingers[2] = make("middle", {3, 4, 5}, finger_axes, finger_limits);
  layout.fingers[3] = make("ring", {9, 10, 11}, finger_axes, finger_limits);
  return layout;
}

/// 16 joint angles ordered [finger][MCP-spread, MCP-bend, PIP-bend, DIP-bend].
struct RobotHandPose {
  HandJoints joint_angles = HandJoints::Zero();

  double& at(int finger, RobotJoint joint) { return joint_angles[finger * kRobotJointsPerFinger + joint]; }
  double at(int finger, RobotJoint joint) const {
    return joint_angles[finger * kRobotJointsPerFinger + joint];
  }
};

struct ClampEvent {
  int finger = 0;
  RobotJoint joint = kMcpSpread;
  double requested = 0.0;
  double applied = 0.0;
};

/// Side information from retargeting: discarded twist, the measured DIP bend
/// that the coupling overrode, and every clamp applied.
struct RetargetDiagnostics {
  std::array<std::array<double, 3>, kRobotFingerCount> discarded_twist{};
  std::array<double, kRobotFingerCount> measured_dip{};
  std::vector<ClampEvent> clamps;
};

/// Map MANO joint rotations onto the robot hand. MCP rotations are split as
/// residual * spread * bend (bend extracted first, then spread from the
/// remaining swing); PIP bend is extracted the same way; DIP follows PIP
/// through the coupling ratio. Out-of-range angles are clamped.
inline RobotHandPose retarget_mano(const ManoPose& m, const HandLayout& layout,
                                   RetargetDiagnostics* diagnostics = nullptr) {
  m.validate();
  layout.validate();
  RobotHandPose out;
  auto clamp_into = [&](int finger, RobotJoint joint, double value, double lo, double hi) {
    const double applied = std::clamp(value, lo, hi);
    if (applied != value && diagnostics) diagnostics->clamps.push_back({finger, joint, value, applied});
    return applied;
  };

  for (int fi = 0; fi < kRobotFingerCount; ++fi) {
    const FingerLayout& f = layout.fingers[fi];

    const JointAxes& mcp_axes = f.axes[kMcp];
    const Rotation mcp = Rotation::from_rotation_vector(m.joint_rots[f.mano_joints[kMcp]]);
    const SwingTwist mcp_bend = swing_twist(mcp, mcp_axes.bend);
    const SwingTwist mcp_spread = swing_twist(mcp_bend.swing, mcp_axes.spread);

    const Rotation pip = Rotation::from_rotation_vector(m.joint_rots[f.mano_joints[kPip]]);
    const SwingTwist pip_bend = swing_twist(pip, f.axes[kPip].bend);

    const Rotation dip = Rotation::from_rotation_vector(m.joint_rots[f.mano_joints[kDip]]);
    const SwingTwist dip_bend = swing_twist(dip, f.axes[kDip].bend);

    if (diagnostics) {
      diagnostics->discarded_twist[fi] = {mcp_spread.swing.angle(), pip_bend.swing.angle(),
                                          dip_bend.swing.angle()};
      diagnostics->measured_dip[fi] = dip_bend.twist_angle;
    }

    out.at(fi, kMcpSpread) = clamp_into(fi, kMcpSpread, mcp_spread.twist_angle,
                                        f.limits[kMcpSpread].lo, f.limits[kMcpSpread].hi);
    out.at(fi, kMcpBend) = clamp_into(fi, kMcpBend, mcp_bend.twist_angle, f.limits[kMcpBend].lo,
                                      f.limits[kMcpBend].hi);
    const auto [pip_lo, pip_hi] = HandLayout::coupled_pip_range(f);
    const double pip_angle = clamp_into(fi, kPipBend, pip_bend.twist_angle, pip_lo, pip_hi);
    out.at(fi, kPipBend) = pip_angle;
    out.at(fi, kDipBend) = f.coupling_ratio * pip_angle;
  }
  return out;
}

/// Clamp an arbitrary 16-vector into the layout's joint limits.
inline HandJoints clamp_to_limits(const HandJoints& angles, const HandLayout& layout) {
  HandJoints out;
  for (int i = 0; i < kHandJointDim; ++i) {
    const JointLimit l = layout.limit(i);
    out[i] = std::clamp(angles[i], l.lo, l.hi);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Post-grasp trajectories

inline constexpr int kPostGraspSteps = 40;

struct WristPose {
  Vec3 position = Vec3::Zero();
  Rotation orientation;
};

/// Relative transform from one wrist pose to the next, in the earlier pose's frame.
struct WristDelta {
  Vec3 translation = Vec3::Zero();
  Rotation rotation;
};

inline WristDelta relative_delta(const WristPose& from, const WristPose& to) {
  const Rotation inv = from.orientation.inverse();
  return {inv.rotate(to.position - from.position), inv * to.orientation};
}

inline WristPose apply_delta(const WristPose& pose, const WristDelta& d) {
  return {pose.position + pose.orientation.rotate(d.translation), pose.orientation * d.rotation};
}

/// Deltas between the first kPostGraspSteps + 1 poses.
inline std::vector<WristDelta> extract_post_grasp(std::span<const WristPose> poses) {
  if (poses.size() < static_cast<std::size_t>(kPostGraspSteps + 1)) {
    throw Error(ErrorKind::kInsufficientTrajectory,
                "post-grasp extraction needs at least " + std::to_string(kPostGraspSteps + 1) +
                    " poses, got " + std::to_string(poses.size()));
  }
  std::vector<WristDelta> deltas;
  deltas.reserve(kPostGraspSteps);
  for (int t = 0; t < kPostGraspSteps; ++t) deltas.push_back(relative_delta(poses[t], poses[t + 1]));
  return deltas;
}

/// Replay deltas from `start`; returns the poses after each delta (start excluded).
inline std::vector<WristPose> apply_deltas(const WristPose& start, std::span<const WristDelta> deltas) {
  std::vector<WristPose> out;
  out.reserve(deltas.size());
  WristPose current = start;
  for (const auto& d : deltas) {
    if (!d.translation.allFinite()) {
      throw Error(ErrorKind::kPrecondition, "apply_deltas: non-finite translation");
    }
    current = apply_delta(current, d);
    out.push_back(current);
  }
  return out;
}

/// Endpoint of a delta chain started at the identity pose.
inline WristPose trajectory_endpoint(std::span<const WristDelta> deltas) {
  WristPose current;
  for (const auto& d : deltas) current = apply_delta(current, d);
  return current;
}

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline Vec3 vec3_from_json(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) {
    throw Error(ErrorKind::kParse, std::string(what) + ": expected array of 3 numbers");
  }
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

inline nlohmann::json vec3_to_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

inline const char* robot_joint_key(int j) {
  static constexpr std::array<const char*, 4> kKeys{"mcp_spread", "mcp_bend", "pip_bend", "dip_bend"};
  return kKeys[j];
}

inline const char* finger_joint_key(int j) {
  static constexpr std::array<const char*, 3> kKeys{"mcp", "pip", "dip"};
  return kKeys[j];
}

}  // namespace detail

inline nlohmann::json to_json(const HandLayout& layout) {
  nlohmann::json fingers = nlohmann::json::array();
  for (const auto& f : layout.fingers) {
    nlohmann::json jf;
    jf["name"] = f.name;
    jf["mano_joints"] = f.mano_joints;
    for (int j = 0; j < 3; ++j) {
      jf["axes"][detail::finger_joint_key(j)] = {{"bend", detail::vec3_to_json(f.axes[j].bend)},
                                                 {"spread", detail::vec3_to_json(f.axes[j].spread)},
                                                 {"twist", detail::vec3_to_json(f.axes[j].twist)}};
    }
    for (int j = 0; j < 4; ++j) {
      jf["limits"][detail::robot_joint_key(j)] = {f.limits[j].lo, f.limits[j].hi};
    }
    jf["coupling_ratio"] = f.coupling_ratio;
    fingers.push_back(jf);
  }
  return {{"schema_version", 1}, {"fingers", fingers}};
}

/// Parse and validate a layout document (schema in docs/hand_layout.md).
inline HandLayout hand_layout_from_json(const nlohmann::json& j) {
  HandLayout layout;
  try {
    const auto& fingers = j.at("fingers");
    if (!fingers.is_array() || fingers.size() != kRobotFingerCount) {
      throw Error(ErrorKind::kParse, "HandLayout: expected exactly 4 fingers");
    }
    for (int fi = 0; fi < kRobotFingerCount; ++fi) {
      const auto& jf = fingers[fi];
      FingerLayout& f = layout.fingers[fi];
      f.name = jf.at("name").get<std::string>();
      f.mano_joints = jf.at("mano_joints").get<std::array<int, 3>>();
      for (int k = 0; k < 3; ++k) {
        const auto& ja = jf.at("axes").at(detail::finger_joint_key(k));
        f.axes[k].bend = detail::vec3_from_json(ja.at("bend"), "bend");
        f.axes[k].spread = detail::vec3_from_json(ja.at("spread"), "spread");
        f.axes[k].twist = detail::vec3_from_json(ja.at("twist"), "twist");
      }
      for (int k = 0; k < 4; ++k) {
        const auto lim = jf.at("limits").at(detail::robot_joint_key(k)).get<std::array<double, 2>>();
        f.limits[k] = {lim[0], lim[1]};
      }
      f.coupling_ratio = jf.value("coupling_ratio", 1.0);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("HandLayout: ") + e.what());
  }
  layout.validate();
  return layout;
}

inline HandLayout load_hand_layout(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open hand layout " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, path + ": " + e.what());
  }
  return hand_layout_from_json(j);
}

inline nlohmann::json to_json(const WristPose& p) {
  const auto& q = p.orientation;
  return {{"position", detail::vec3_to_json(p.position)}, {"orientation", {q.w(), q.x(), q.y(), q.z()}}};
}

inline WristPose wrist_pose_from_json(const nlohmann::json& j) {
  WristPose p;
  p.position = detail::vec3_from_json(j.at("position"), "position");
  const auto q = j.at("orientation").get<std::array<double, 4>>();
  p.orientation = Rotation(q[0], q[1], q[2], q[3]);
  return p;
}

/// One WristPose object per line; blank lines are skipped.
inline std::vector<WristPose> parse_wrist_jsonl(std::istream& in, const std::string& source = "<stream>") {
  std::vector<WristPose> poses;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      poses.push_back(wrist_pose_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::kParse, source + ": line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorKind::kParse, source + ": line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return poses;
}

inline std::vector<WristPose> load_wrist_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open trajectory " + path);
  return parse_wrist_jsonl(in, path);
}

}  // namespace deft::kinematics
