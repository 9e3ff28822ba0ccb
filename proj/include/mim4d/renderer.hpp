// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

// SDF volume rendering from a voxel grid.
//
// Samples along each supervision ray read a trilinear feature from the grid,
// an SDF head maps (feature, position) to a signed distance plus a geometry
// feature, and a color head maps (feature, position, direction, normal,
// geometry feature) to RGB. Opacity between consecutive samples follows the
// sigmoid-of-SDF rule with learnable sharpness a = exp(log_a); weights are
// T_j * alpha_j with T the running product of (1 - alpha).

#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mim4d/diff.hpp"
#include "mim4d/geometry.hpp"
#include "mim4d/masking.hpp"
#include "mim4d/params.hpp"

namespace mim4d::render {

enum class SdfInit { kRandom, kPlane };

SdfInit parse_sdf_init(const std::string& name);
std::string to_string(SdfInit init);

struct RendererConfig {
  int samples = 32;  // K per ray
  double near = 0.5;
  double far = 12.0;
  double lambda_rgb = 10.0;
  double lambda_depth = 10.0;
  double a_init = 10.0;
  int hidden = 32;
  int geo_features = 8;
  bool jitter = true;
  SdfInit sdf_init = SdfInit::kPlane;

  void validate() const;
};

/// Registers "renderer.sdf.*", "renderer.rgb.*" and "renderer.log_a".
void init_renderer_params(ParameterSet& params, const RendererConfig& cfg, int channels,
                          const geometry::GridExtent& extent, std::mt19937_64& rng);

/// grid: (C, nz, ny, nx). Returns (N, C): trilinear features at metric positions,
/// zero outside the extent. Inside the extent but past the outermost cell centers
/// the border value is held.
diff::Var interpolate_feature(const diff::Var& grid, const geometry::GridExtent& extent,
                              const std::vector<geometry::Vec3>& positions);

/// Positions mapped to [-1, 1] over the extent, as an (N, 3) tensor.
Tensor normalized_positions(const geometry::GridExtent& extent, const std::vector<geometry::Vec3>& positions);

struct SdfOutput {
  diff::Var sdf;       // (N, 1)
  diff::Var geometry;  // (N, G)
};

/// features: (N, C); positions: (N, 3) normalized.
SdfOutput sdf_head(const diff::Var& features, const diff::Var& positions, const BoundParams& params);

/// Returns (N, 3) in [0, 1].
diff::Var rgb_head(const diff::Var& features, const diff::Var& positions, const diff::Var& directions,
                   const diff::Var& normals, const diff::Var& geometry, const BoundParams& params);

/// Signed distance at many points at once.
using ScalarField = std::function<std::vector<double>(const std::vector<geometry::Vec3>&)>;

/// Central-difference gradient of `field`, normalized; zero where its norm < 1e-8.
std::vector<geometry::Vec3> normals(const ScalarField& field, const std::vector<geometry::Vec3>& points, double eps);

/// The learned SDF of a grid evaluated without gradient tracking.
ScalarField learned_sdf(const Tensor& grid, const geometry::GridExtent& extent, const ParameterSet& params);

/// sdf: (R, K). a: shape (1). alpha_j = max((sig(a s_j) - sig(a s_{j+1})) / sig(a s_j), 0),
/// with a virtual s_{K+1} = 0 and sig(a s_j) clamped to at least 1e-12.
diff::Var opacity(const diff::Var& sdf, const diff::Var& a);

struct Accumulated {
  diff::Var weights;        // (R, K)
  diff::Var transmittance;  // (R, K)
  diff::Var color;          // (R, 3)
  diff::Var depth;          // (R)
};

/// alpha: (R, K); colors: (R, K, 3); depths: (R, K).
Accumulated accumulate(const diff::Var& alpha, const diff::Var& colors, const Tensor& depths);

/// One ray per supervision pixel, built in the ego frame at identity pose.
struct RayBatch {
  std::vector<geometry::Ray> rays;
  std::vector<geometry::Vec3> positions;   // R*K, ray-major
  std::vector<geometry::Vec3> directions;  // R*K
  Tensor depths;                            // (R, K)
  Tensor target_color;                      // (R, 3)
  Tensor target_depth;                      // (R)
  int samples = 0;

  std::int64_t ray_count() const { return static_cast<std::int64_t>(rays.size()); }
};

RayBatch make_ray_batch(const std::vector<masking::SupervisionSet>& supervision,
                        const std::vector<geometry::Camera>& cameras, const RendererConfig& cfg,
                        std::mt19937_64* jitter_rng);

struct RenderResult {
  diff::Var loss;
  diff::Var rgb_term;
  diff::Var depth_term;
  Accumulated accumulated;
};

/// Ray colors and depths from the learned heads on `grid`. When `normal_cache`
/// is given, an empty cache is filled with this call's normals and a filled one
/// is used as is, which pins the normals across repeated evaluations.
Accumulated render_rays(const diff::Var& grid, const geometry::GridExtent& extent, const RayBatch& batch,
                        const BoundParams& params, std::vector<geometry::Vec3>* normal_cache = nullptr);

/// (lambda_rgb / M) * sum |C_hat - C|_1 + (lambda_depth / M) * sum |D_hat - D|.
RenderResult render_loss(const diff::Var& grid, const geometry::GridExtent& extent, const RayBatch& batch,
                         const BoundParams& params, const RendererConfig& cfg,
                         std::vector<geometry::Vec3>* normal_cache = nullptr);

/// The loss terms for given predictions; exposed for oracle rendering.
RenderResult loss_from(const Accumulated& acc, const RayBatch& batch, const RendererConfig& cfg);

struct ViewRender {
  Tensor color;  // (H, W, 3)
  Tensor depth;  // (H, W)
};

/// Every pixel of one camera rendered through `grid` without jitter, in chunks
/// of `chunk_rows` image rows.
ViewRender render_view(const Tensor& grid, const geometry::GridExtent& extent, const geometry::Camera& camera,
                       const ParameterSet& params, RendererConfig cfg, int chunk_rows = 4);

}  // namespace mim4d::render
