// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mim4d/geometry.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mim4d::geometry {

void validate_rigid(const Rigid& t, const char* what) {
  const Mat3 r = t.linear();
  if ((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6 || std::fabs(r.determinant() - 1.0) > 1e-6) {
    throw std::invalid_argument(std::string(what) + ": rotation is not orthonormal with det +1");
  }
  if (!t.translation().allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite translation");
}

Rigid make_rigid(const Mat3& rotation, const Vec3& translation) {
  Rigid t = Rigid::Identity();
  t.linear() = rotation;
  t.translation() = translation;
  return t;
}

Mat3 camera_rotation_from_ego(double yaw, double pitch) {
  // Camera axes expressed in ego coordinates for a level camera looking along +x.
  Mat3 ego_from_cam_level;
  ego_from_cam_level.col(0) = Vec3(0, -1, 0);  // right
  ego_from_cam_level.col(1) = Vec3(0, 0, -1);  // down
  ego_from_cam_level.col(2) = Vec3(1, 0, 0);   // forward
  const Mat3 yaw_r = Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
  const Mat3 pitch_r = Eigen::AngleAxisd(pitch, Vec3::UnitY()).toRotationMatrix();
  const Mat3 ego_from_cam = yaw_r * pitch_r * ego_from_cam_level;
  return ego_from_cam.transpose();
}

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0) || !std::isfinite(cx) || !std::isfinite(cy)) {
    throw std::invalid_argument("camera: degenerate intrinsics");
  }
  if (width <= 0 || height <= 0) throw std::invalid_argument("camera: non-positive image size");
  validate_rigid(cam_from_ego, "camera extrinsic");
}

Ray generate_ray(const Camera& camera, const Vec2& pixel, const EgoPose& ego_pose) {
  camera.validate();
  if (pixel.x() < 0.0 || pixel.y() < 0.0 || pixel.x() > camera.width || pixel.y() > camera.height) {
    throw std::out_of_range("generate_ray: pixel outside the image");
  }
  const Rigid world_from_cam = ego_pose.world_from_ego * camera.cam_from_ego.inverse();
  const Vec3 dir_cam((pixel.x() - camera.cx) / camera.fx, (pixel.y() - camera.cy) / camera.fy, 1.0);
  Ray ray;
  ray.origin = world_from_cam.translation();
  ray.direction = (world_from_cam.linear() * dir_cam).normalized();
  ray.pixel = pixel;
  return ray;
}

std::vector<Vec3> sample_along_ray(Ray& ray, double near, double far, int count, std::mt19937_64* rng) {
  if (!(near > 0.0) || !(near < far)) throw std::invalid_argument("sample_along_ray: need 0 < near < far");
  if (count < 2) throw std::invalid_argument("sample_along_ray: need at least two samples");
  const double bin = (far - near) / count;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ray.depths.resize(static_cast<std::size_t>(count));
  std::vector<Vec3> points(static_cast<std::size_t>(count));
  for (int j = 0; j < count; ++j) {
    // A draw of exactly 0 would tie with the previous bin's upper edge; keep it open.
    double u = 0.5;
    if (rng) {
      do {
        u = unit(*rng);
      } while (u <= 0.0);
    }
    const double t = near + (j + u) * bin;
    ray.depths[static_cast<std::size_t>(j)] = t;
    points[static_cast<std::size_t>(j)] = ray.at(t);
  }
  return points;
}

Projection project_point(const Camera& camera, const EgoPose& ego_pose, const Vec3& world_point) {
  const Vec3 p = camera.cam_from_ego * (ego_pose.world_from_ego.inverse() * world_point);
  Projection out;
  out.depth = p.z();
  if (p.z() <= 0.0) {
    out.behind = true;
    return out;
  }
  out.pixel = Vec2(camera.fx * p.x() / p.z() + camera.cx, camera.fy * p.y() / p.z() + camera.cy);
  return out;
}

std::vector<Vec2> warp_reference_points(const std::vector<Vec2>& points, const EgoPose& pose_a, const EgoPose& pose_b) {
  const Rigid b_from_a = pose_b.world_from_ego.inverse() * pose_a.world_from_ego;
  std::vector<Vec2> out;
  out.reserve(points.size());
  for (const auto& p : points) {
    const Vec3 q = b_from_a * Vec3(p.x(), p.y(), 0.0);
    out.emplace_back(q.x(), q.y());
  }
  return out;
}

bool GridExtent::contains(const Vec3& p) const {
  return p.x() >= x_min && p.x() < x_max && p.y() >= y_min && p.y() < y_max && p.z() >= z_min && p.z() < z_max;
}

Vec3 GridExtent::to_index(const Vec3& p) const {
  return Vec3((p.x() - x_min) / cell_x() - 0.5, (p.y() - y_min) / cell_y() - 0.5, (p.z() - z_min) / cell_z() - 0.5);
}

Vec2 GridExtent::to_index(const Vec2& p) const {
  return Vec2((p.x() - x_min) / cell_x() - 0.5, (p.y() - y_min) / cell_y() - 0.5);
}

std::int64_t GridExtent::voxel_of(const Vec3& p) const {
  if (!contains(p)) return -1;
  const auto ix = std::min<std::int64_t>(nx - 1, static_cast<std::int64_t>((p.x() - x_min) / cell_x()));
  const auto iy = std::min<std::int64_t>(ny - 1, static_cast<std::int64_t>((p.y() - y_min) / cell_y()));
  const auto iz = std::min<std::int64_t>(nz - 1, static_cast<std::int64_t>((p.z() - z_min) / cell_z()));
  return (iz * ny + iy) * nx + ix;
}

void GridExtent::validate() const {
  if (!(x_max > x_min) || !(y_max > y_min) || !(z_max > z_min)) throw std::invalid_argument("grid extent is empty");
  if (nx <= 0 || ny <= 0 || nz <= 0) throw std::invalid_argument("grid resolution must be positive");
}

std::vector<Vec2> bev_reference_points(const GridExtent& extent) {
  std::vector<Vec2> pts;
  pts.reserve(static_cast<std::size_t>(extent.cells_bev()));
  for (int iy = 0; iy < extent.ny; ++iy)
    for (int ix = 0; ix < extent.nx; ++ix)
      pts.emplace_back(extent.x_min + (ix + 0.5) * extent.cell_x(), extent.y_min + (iy + 0.5) * extent.cell_y());
  return pts;
}

}  // namespace mim4d::geometry
