// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mim4d/geometry.hpp"

namespace mim4d::geometry {
namespace {

Camera unit_camera() {
  Camera c;
  c.fx = c.fy = 1.0;
  c.cx = c.cy = 0.0;
  c.width = c.height = 4;
  return c;
}

Camera mounted_camera() {
  Camera c;
  c.fx = 60.0;
  c.fy = 62.0;
  c.cx = 32.0;
  c.cy = 24.0;
  c.width = 64;
  c.height = 48;
  c.cam_from_ego = make_rigid(camera_rotation_from_ego(0.3, 0.1), Vec3::Zero());
  c.cam_from_ego = c.cam_from_ego * make_rigid(Mat3::Identity(), -Vec3(1.5, 0.2, 1.2));
  return c;
}

EgoPose pose_at(const Vec3& t, double yaw) {
  EgoPose p;
  p.world_from_ego = make_rigid(Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix(), t);
  return p;
}

TEST(GenerateRay, PrincipalPixelLooksDownTheAxis) {
  const Ray r = generate_ray(unit_camera(), Vec2(0, 0), EgoPose{});
  EXPECT_NEAR((r.direction - Vec3(0, 0, 1)).norm(), 0.0, 1e-15);
  EXPECT_NEAR(r.origin.norm(), 0.0, 1e-15);
}

TEST(GenerateRay, OffsetPixelBackProjects) {
  const Ray r = generate_ray(unit_camera(), Vec2(1, 0), EgoPose{});
  EXPECT_NEAR((r.direction - Vec3(1, 0, 1) / std::sqrt(2.0)).norm(), 0.0, 1e-15);
}

TEST(GenerateRay, EgoTranslationShiftsOriginOnly) {
  const Camera cam = mounted_camera();
  const Ray a = generate_ray(cam, Vec2(10.5, 7.5), EgoPose{});
  const Ray b = generate_ray(cam, Vec2(10.5, 7.5), pose_at(Vec3(2, 0, 0), 0.0));
  EXPECT_NEAR((b.direction - a.direction).norm(), 0.0, 1e-15);
  EXPECT_NEAR((b.origin - a.origin - Vec3(2, 0, 0)).norm(), 0.0, 1e-15);
}

TEST(GenerateRay, CameraAxesFollowConvention) {
  // A level camera facing ego +x: image right is ego -y, image down is ego -z.
  Camera cam = unit_camera();
  cam.cam_from_ego = make_rigid(camera_rotation_from_ego(0.0, 0.0), Vec3::Zero());
  EXPECT_NEAR((generate_ray(cam, Vec2(0, 0), EgoPose{}).direction - Vec3(1, 0, 0)).norm(), 0.0, 1e-15);
  EXPECT_LT(generate_ray(cam, Vec2(1, 0), EgoPose{}).direction.y(), 0.0);
  EXPECT_LT(generate_ray(cam, Vec2(0, 1), EgoPose{}).direction.z(), 0.0);
}

TEST(SampleAlongRay, BinMidpoints) {
  Ray r;
  sample_along_ray(r, 1.0, 5.0, 4);
  EXPECT_EQ(r.depths, (std::vector<double>{1.5, 2.5, 3.5, 4.5}));
  sample_along_ray(r, 0.5, 1.0, 2);
  EXPECT_EQ(r.depths, (std::vector<double>{0.625, 0.875}));
}

TEST(SampleAlongRay, JitterStaysInsideBins) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.1, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    const double near = u(rng), far = near + u(rng);
    const int k = 2 + trial % 40;
    Ray r;
    const auto pts = sample_along_ray(r, near, far, k, &rng);
    const double bin = (far - near) / k;
    for (int j = 0; j < k; ++j) {
      const double t = r.depths[static_cast<std::size_t>(j)];
      EXPECT_GE(t, near + j * bin - 1e-12);
      EXPECT_LE(t, near + (j + 1) * bin + 1e-12);
      if (j > 0) {
        EXPECT_GT(t, r.depths[static_cast<std::size_t>(j - 1)]);
      }
      EXPECT_NEAR((pts[static_cast<std::size_t>(j)] - r.at(t)).norm(), 0.0, 1e-12);
    }
  }
}

TEST(SampleAlongRay, RejectsBadRange) {
  Ray r;
  EXPECT_THROW(sample_along_ray(r, 2.0, 1.0, 4), std::invalid_argument);
  EXPECT_THROW(sample_along_ray(r, 0.0, 1.0, 4), std::invalid_argument);
}

TEST(ProjectPoint, AxisPointLandsOnPrincipalPoint) {
  Camera cam = unit_camera();
  cam.cx = 2.0;
  cam.cy = 1.5;
  const auto p = project_point(cam, EgoPose{}, Vec3(0, 0, 4));
  EXPECT_FALSE(p.behind);
  EXPECT_DOUBLE_EQ(p.depth, 4.0);
  EXPECT_DOUBLE_EQ(p.pixel.x(), 2.0);
  EXPECT_DOUBLE_EQ(p.pixel.y(), 1.5);
  EXPECT_TRUE(project_point(cam, EgoPose{}, Vec3(0, 0, -1)).behind);
}

TEST(ProjectPoint, InvertsGenerateRay) {
  const Camera cam = mounted_camera();
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> px(0.0, 64.0), py(0.0, 48.0), t(0.5, 30.0), yaw(-3.0, 3.0);
  for (int i = 0; i < 500; ++i) {
    const EgoPose pose = pose_at(Vec3(px(rng), py(rng), 0.0), yaw(rng));
    const Vec2 pixel(px(rng), py(rng));
    const Ray r = generate_ray(cam, pixel, pose);
    const double depth = t(rng);
    const auto p = project_point(cam, pose, r.at(depth));
    ASSERT_FALSE(p.behind);
    EXPECT_NEAR((p.pixel - pixel).norm(), 0.0, 1e-6);
  }
}

TEST(Warp, IdentityMotion) {
  const std::vector<Vec2> pts = {{0.25, -3.0}, {7.0, 2.0}};
  const auto out = warp_reference_points(pts, pose_at(Vec3(3, 1, 0), 0.4), pose_at(Vec3(3, 1, 0), 0.4));
  for (std::size_t i = 0; i < pts.size(); ++i) EXPECT_NEAR((out[i] - pts[i]).norm(), 0.0, 1e-12);
}

TEST(Warp, OneMetreForwardIsTwoCells) {
  GridExtent e;
  e.x_min = -8;
  e.x_max = 8;
  e.nx = 32;  // 0.5 m cells
  const auto pts = bev_reference_points(e);
  const auto out = warp_reference_points(pts, EgoPose{}, pose_at(Vec3(1, 0, 0), 0.0));
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const Vec2 a = e.to_index(pts[i]), b = e.to_index(out[i]);
    EXPECT_DOUBLE_EQ(b.x() - a.x(), -2.0);
    EXPECT_DOUBLE_EQ(b.y(), a.y());
  }
}

TEST(Warp, InverseCompositionIsIdentity) {
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> u(-20.0, 20.0), yaw(-3.1, 3.1);
  for (int i = 0; i < 100; ++i) {
    const EgoPose a = pose_at(Vec3(u(rng), u(rng), 0), yaw(rng)), b = pose_at(Vec3(u(rng), u(rng), 0), yaw(rng));
    const std::vector<Vec2> pts = {{u(rng), u(rng)}, {u(rng), u(rng)}};
    const auto back = warp_reference_points(warp_reference_points(pts, a, b), b, a);
    for (std::size_t k = 0; k < pts.size(); ++k) EXPECT_LT((back[k] - pts[k]).norm(), 1e-9);
  }
}

TEST(Rigid, PreservesDistances) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  for (int i = 0; i < 100; ++i) {
    const Rigid t = make_rigid(Eigen::AngleAxisd(u(rng), Vec3(u(rng), u(rng), u(rng)).normalized()).toRotationMatrix(),
                               Vec3(u(rng), u(rng), u(rng)));
    const Vec3 a(u(rng), u(rng), u(rng)), b(u(rng), u(rng), u(rng));
    EXPECT_NEAR(((t * a) - (t * b)).norm(), (a - b).norm(), 1e-9);
  }
}

TEST(Rigid, RejectsNonOrthonormal) {
  Camera cam = unit_camera();
  cam.cam_from_ego.linear() = 2.0 * Mat3::Identity();
  EXPECT_THROW(cam.validate(), std::invalid_argument);
}

TEST(GridExtent, CentersMapToIntegers) {
  GridExtent e;
  const auto pts = bev_reference_points(e);
  ASSERT_EQ(static_cast<std::int64_t>(pts.size()), e.cells_bev());
  const Vec2 i0 = e.to_index(pts[0]), ilast = e.to_index(pts.back());
  EXPECT_NEAR(i0.x(), 0.0, 1e-12);
  EXPECT_NEAR(i0.y(), 0.0, 1e-12);
  EXPECT_NEAR(ilast.x(), e.nx - 1, 1e-12);
  EXPECT_NEAR(ilast.y(), e.ny - 1, 1e-12);
  EXPECT_EQ(e.voxel_of(Vec3(e.x_min + 0.01, e.y_min + 0.01, e.z_min + 0.01)), 0);
  EXPECT_EQ(e.voxel_of(Vec3(e.x_max, 0, 0)), -1);
}

}  // namespace
}  // namespace mim4d::geometry
