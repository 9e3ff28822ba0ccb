// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

// Procedural multi-view video clips over analytic signed distance fields.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <variant>
#include <vector>

#include "mim4d/geometry.hpp"
#include "mim4d/tensor.hpp"

namespace mim4d::scene {

using geometry::Camera;
using geometry::EgoPose;
using geometry::Ray;
using geometry::Vec3;

struct Sphere {
  Vec3 center = Vec3::Zero();
  double radius = 1.0;
};

struct Box {
  Vec3 center = Vec3::Zero();
  Vec3 half_extents = Vec3::Ones();
};

struct GroundPlane {
  double height = 0.0;
};

struct Primitive {
  std::variant<Sphere, Box, GroundPlane> shape;
  Vec3 albedo = Vec3::Constant(0.5);
  Vec3 velocity = Vec3::Zero();  // m/s, ignored for the ground plane
};

struct AnalyticScene {
  std::vector<Primitive> primitives;
  Vec3 background = Vec3(0.55, 0.7, 0.9);
};

/// Exact signed distance of one primitive at `time`.
double primitive_sdf(const Primitive& prim, const Vec3& p, double time);

/// Scene SDF: minimum over primitives. +inf for an empty scene.
double scene_sdf(const AnalyticScene& scene, const Vec3& p, double time);

/// Index of the primitive with the smallest distance at p, or -1.
int nearest_primitive(const AnalyticScene& scene, const Vec3& p, double time);

struct Hit {
  double depth = 0.0;
  Vec3 albedo = Vec3::Zero();
  int primitive = -1;
};

/// Sphere tracing from the ray origin; nullopt when nothing is hit before `far`.
std::optional<Hit> trace_ray(const AnalyticScene& scene, const Ray& ray, double time, double far);

struct DepthSample {
  int col = 0, row = 0;
  double depth = 0.0;  // distance along the pixel-center ray
};

struct Frame {
  double time = 0.0;
  EgoPose pose;
  std::vector<Tensor> images;                    // per view, (H, W, 3) in [0, 1]
  std::vector<std::vector<DepthSample>> depths;  // per view
};

struct MultiViewClip {
  int height = 0, width = 0;
  double frame_dt = 0.5;
  double max_depth = 12.0;
  std::uint64_t seed = 0;
  geometry::GridExtent extent;
  std::vector<Camera> cameras;
  std::vector<Frame> frames;

  int views() const { return static_cast<int>(cameras.size()); }
  int window() const { return static_cast<int>(frames.size()); }
};

struct RenderSettings {
  int window = 5;  // N + 1 frames
  int height = 48, width = 64;
  int lidar_samples_per_view = 400;
  double frame_dt = 0.5;
  double max_depth = 12.0;    // depth samples beyond this are not stored
  double color_range = 60.0;  // image tracing distance
  std::uint64_t seed = 0;
  int threads = 1;
  geometry::GridExtent extent;
};

/// Renders frames 0..window-1 using trajectory[0..window-1]. Deterministic in the seed.
MultiViewClip render_clip(const AnalyticScene& scene, const std::vector<Camera>& cameras,
                          const std::vector<EgoPose>& trajectory, const RenderSettings& settings);

/// Ground plane plus `objects` spheres and boxes resting on it in front of the ego.
AnalyticScene random_scene(std::uint64_t seed, int objects, bool moving = false);

/// Forward-facing cameras fanned in yaw, 1.2 m above the ground, pitched down.
std::vector<Camera> default_cameras(int views, int height, int width);

/// Straight-line ego motion along ego +x with an optional constant yaw rate.
std::vector<EgoPose> straight_trajectory(int count, double step_m, double yaw_step_rad = 0.0);

// ---- clip files ----

void write_clip(const std::filesystem::path& dir, const MultiViewClip& clip,
                const AnalyticScene* scene = nullptr);
MultiViewClip read_clip(const std::filesystem::path& dir);
std::optional<AnalyticScene> read_clip_scene(const std::filesystem::path& dir);

/// Binary PPM (P6) of an (H, W, 3) image in [0, 1].
void write_ppm(const std::filesystem::path& path, const Tensor& image);

}  // namespace mim4d::scene
