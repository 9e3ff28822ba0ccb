// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

// Camera and ego-motion math.
//
// Conventions:
//   camera frame: +z forward (optical axis), +x right, +y down.
//   ego frame:    +x forward, +y left, +z up; the origin sits on the ground.
// Pixel coordinates are continuous; pixel (col, row) has its center at
// (col + 0.5, row + 0.5).

#pragma once

#include <Eigen/Geometry>

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

namespace mim4d::geometry {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Rigid = Eigen::Isometry3d;

/// Throws if the rotation part is not orthonormal with det +1 (to 1e-6).
void validate_rigid(const Rigid& t, const char* what);

Rigid make_rigid(const Mat3& rotation, const Vec3& translation);

/// Rotation taking ego axes to camera axes for a camera mounted with the given
/// yaw (about ego +z, positive turns left) and pitch (positive tilts down).
Mat3 camera_rotation_from_ego(double yaw, double pitch);

struct Camera {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  Rigid cam_from_ego = Rigid::Identity();
  int width = 1, height = 1;

  void validate() const;
  Vec3 center_in_ego() const { return cam_from_ego.inverse().translation(); }
};

struct EgoPose {
  Rigid world_from_ego = Rigid::Identity();
  int timestamp = 0;
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  std::vector<double> depths;
  Vec2 pixel = Vec2::Zero();

  Vec3 at(double t) const { return origin + t * direction; }
};

Ray generate_ray(const Camera& camera, const Vec2& pixel, const EgoPose& ego_pose);

/// Stratified depths on [near, far]: bin midpoints, or one uniform draw per bin
/// when `rng` is given. Writes ray.depths and returns the sample positions.
std::vector<Vec3> sample_along_ray(Ray& ray, double near, double far, int count, std::mt19937_64* rng = nullptr);

struct Projection {
  Vec2 pixel = Vec2::Zero();
  double depth = 0.0;
  bool behind = false;
};

Projection project_point(const Camera& camera, const EgoPose& ego_pose, const Vec3& world_point);

/// Maps BEV metric points expressed in ego frame a into ego frame b (z = 0 plane).
std::vector<Vec2> warp_reference_points(const std::vector<Vec2>& points, const EgoPose& pose_a, const EgoPose& pose_b);

/// Axis-aligned ego-centric lattice: nx cells along x (columns), ny along y
/// (rows), nz along z. Cell centers sit at min + (i + 0.5) * cell.
struct GridExtent {
  double x_min = -8.0, x_max = 8.0;
  double y_min = -8.0, y_max = 8.0;
  double z_min = -1.0, z_max = 3.0;
  int nx = 32, ny = 32, nz = 4;

  double cell_x() const { return (x_max - x_min) / nx; }
  double cell_y() const { return (y_max - y_min) / ny; }
  double cell_z() const { return (z_max - z_min) / nz; }
  std::int64_t cells_bev() const { return static_cast<std::int64_t>(nx) * ny; }
  std::int64_t cells() const { return cells_bev() * nz; }

  bool contains(const Vec3& p) const;
  /// Continuous cell-index coordinates (x, y, z); centers map to integers.
  Vec3 to_index(const Vec3& p) const;
  Vec2 to_index(const Vec2& p) const;
  /// Flat index z*ny*nx + y*nx + x of the containing cell, or -1.
  std::int64_t voxel_of(const Vec3& p) const;
  void validate() const;
};

/// BEV reference points at cell centers, row-major (y outer, x inner).
std::vector<Vec2> bev_reference_points(const GridExtent& extent);

}  // namespace mim4d::geometry
