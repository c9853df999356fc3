#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lilac/util.hpp"

namespace lilac::data {

struct FormatVersionMismatch : Error {
  explicit FormatVersionMismatch(const std::string& m)
      : Error("FormatVersionMismatch: " + m) {}
};
struct CorruptPayload : Error {
  explicit CorruptPayload(const std::string& m)
      : Error("CorruptPayload: " + m) {}
};
struct MissingField : Error {
  explicit MissingField(const std::string& m) : Error("MissingField: " + m) {}
};

// ---------------------------------------------------------------------------
// Quaternion / rotation helpers (w,x,y,z convention, row-major 3x3).
// ---------------------------------------------------------------------------

using Vec3 = std::array<double, 3>;
using Quat = std::array<double, 4>;
using Mat3 = std::array<double, 9>;

Quat quat_normalize(const Quat& q);
Quat quat_mul(const Quat& a, const Quat& b);
Quat quat_conj(const Quat& q);
/// Rotation matrix from q; normalizes inside the formula, so the result is
/// orthonormal even when q carries float32 rounding.
Mat3 quat_to_matrix(const Quat& q);
Quat matrix_to_quat(const Mat3& r);
Vec3 quat_to_axis_angle(const Quat& q);
Quat axis_angle_to_quat(const Vec3& aa);
Vec3 mat_apply(const Mat3& r, const Vec3& v);

// ---------------------------------------------------------------------------
// Core domain types
// ---------------------------------------------------------------------------

/// Pinhole camera; pixel coordinates have x right, y down, origin top-left.
struct CameraModel {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  std::array<double, 2> project(const Vec3& p) const {
    return {fx * p[0] / p[2] + cx, fy * p[1] / p[2] + cy};
  }
  bool operator==(const CameraModel&) const = default;
};

/// n tracking points over `horizon` steps, pixel coordinates, step 0 first.
struct FlowSequence {
  int horizon = 0;
  int n_points = 0;
  std::vector<double> coords;  // [t][i][(x,y)]

  FlowSequence() = default;
  FlowSequence(int t, int n)
      : horizon(t), n_points(n),
        coords(static_cast<std::size_t>(t) * static_cast<std::size_t>(n) * 2,
               0.0) {}

  std::size_t idx(int t, int i) const {
    return (static_cast<std::size_t>(t) * static_cast<std::size_t>(n_points) +
            static_cast<std::size_t>(i)) * 2;
  }
  double x(int t, int i) const { return coords[idx(t, i)]; }
  double y(int t, int i) const { return coords[idx(t, i) + 1]; }
  void set(int t, int i, double px, double py) {
    coords[idx(t, i)] = px;
    coords[idx(t, i) + 1] = py;
  }
  bool operator==(const FlowSequence&) const = default;
};

/// Arrow + target box rendered as the visual prompt. The bbox is half-open:
/// [x0,x1) x [y0,y1), so x1/y1 may equal the image dimension.
struct VisualPrompt {
  std::array<double, 2> start{0, 0};
  std::array<double, 2> end{0, 0};
  std::array<double, 4> bbox{0, 0, 0, 0};  // x0,y0,x1,y1
  bool operator==(const VisualPrompt&) const = default;
};

/// Rigid pose, camera frame. Stored as translation + quaternion; the
/// quaternion keeps whatever precision it was built or loaded with, and the
/// rotation-matrix accessor renormalizes, so matrices are always orthonormal.
struct Pose6DoF {
  Vec3 translation{0, 0, 0};
  Quat rotation{1, 0, 0, 0};

  static Pose6DoF identity() { return {}; }
  static Pose6DoF from_matrix(const Mat3& r, const Vec3& t);
  static Pose6DoF from_axis_angle(const Vec3& aa, const Vec3& t);

  Mat3 matrix() const { return quat_to_matrix(rotation); }
  Vec3 axis_angle() const { return quat_to_axis_angle(rotation); }
  Vec3 apply(const Vec3& p) const;
  Pose6DoF compose(const Pose6DoF& rhs) const;  // this after rhs: T = this*rhs
  Pose6DoF inverse() const;
  bool operator==(const Pose6DoF&) const = default;
};

/// One sample: everything the pipeline consumes and the supervision targets.
struct Episode {
  std::string id;
  std::vector<std::uint8_t> rgb;  // width*height*3, row-major, RGB
  std::string instruction;
  std::vector<float> depth;       // width*height, meters
  CameraModel camera;
  FlowSequence gt_flow;
  std::vector<Pose6DoF> gt_trajectory;  // length == gt_flow.horizon
  std::optional<VisualPrompt> prompt;

  std::uint8_t* pixel(int x, int y) {
    return rgb.data() + (static_cast<std::size_t>(y) * camera.width + x) * 3;
  }
  const std::uint8_t* pixel(int x, int y) const {
    return rgb.data() + (static_cast<std::size_t>(y) * camera.width + x) * 3;
  }
  /// Depth sampled at the pixel nearest to (u,v) (round half up), clamped.
  float depth_at(double u, double v) const;

  bool operator==(const Episode&) const = default;
};

// ---------------------------------------------------------------------------
// Serialization: magic "LFLW", little-endian, version 1, length-prefixed
// sections (header, rgb, depth f32, flow f32 [T][n][2], trajectory f32
// [T][7] tx ty tz qw qx qy qz, instruction, optional prompt).
// ---------------------------------------------------------------------------

std::string serialize_episode(const Episode& e);
Episode deserialize_episode(std::string_view bytes);
void save_episode(const Episode& e, const std::filesystem::path& path);
Episode load_episode(const std::filesystem::path& path);

/// Stable content digest of the serialized record.
std::uint64_t episode_digest(const Episode& e);

/// Returns human-readable invariant violations; empty means valid.
std::vector<std::string> validate(const Episode& e);

}  // namespace lilac::data
