// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mim4d/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mim4d::render {

using diff::Var;
using geometry::Vec3;

SdfInit parse_sdf_init(const std::string& name) {
  if (name == "random") return SdfInit::kRandom;
  if (name == "plane") return SdfInit::kPlane;
  throw std::invalid_argument("unknown sdf init: " + name);
}

std::string to_string(SdfInit init) { return init == SdfInit::kPlane ? "plane" : "random"; }

void RendererConfig::validate() const {
  if (samples < 2) throw std::invalid_argument("renderer needs at least two samples per ray");
  if (!(near > 0.0 && near < far)) throw std::invalid_argument("renderer needs 0 < near < far");
  if (lambda_rgb < 0.0 || lambda_depth < 0.0) throw std::invalid_argument("loss weights must be non-negative");
  if (!(a_init > 0.0)) throw std::invalid_argument("sharpness a must be positive");
  if (hidden < 1 || geo_features < 0) throw std::invalid_argument("invalid head sizes");
}

namespace {

Var linear(const Var& x, const Var& w, const Var& b) { return diff::add(diff::matmul(x, w), b); }

Var cat(std::initializer_list<Var> parts) {
  const std::vector<Var> v(parts);
  return diff::concat(v, 1);
}

Tensor rows_of(const std::vector<Vec3>& v) {
  Tensor t(Shape{static_cast<std::int64_t>(v.size()), 3});
  for (std::size_t i = 0; i < v.size(); ++i)
    for (int k = 0; k < 3; ++k) t[static_cast<std::int64_t>(3 * i) + k] = v[i][k];
  return t;
}

double half_cell(const geometry::GridExtent& e) { return 0.5 * std::min({e.cell_x(), e.cell_y(), e.cell_z()}); }

}  // namespace

void init_renderer_params(ParameterSet& params, const RendererConfig& cfg, int channels,
                          const geometry::GridExtent& extent, std::mt19937_64& rng) {
  cfg.validate();
  const int sdf_in = channels + 3;
  const int sdf_out = 1 + cfg.geo_features;
  Tensor w1 = xavier_uniform(Shape{sdf_in, cfg.hidden}, sdf_in, cfg.hidden, rng);
  Tensor b1(Shape{cfg.hidden}, 0.0);
  Tensor w2 = xavier_uniform(Shape{cfg.hidden, sdf_out}, cfg.hidden, sdf_out, rng);
  Tensor b2(Shape{sdf_out}, 0.0);
  if (cfg.sdf_init == SdfInit::kPlane) {
    // Hidden unit 0 carries z + 10 (kept positive by the offset); the SDF output
    // reads it back as z, the distance to the ground plane.
    const double half_z = 0.5 * (extent.z_max - extent.z_min);
    const double mid_z = 0.5 * (extent.z_max + extent.z_min);
    for (int i = 0; i < sdf_in; ++i) w1[i * cfg.hidden] = 0.0;
    w1[(channels + 2) * cfg.hidden] = half_z;
    b1[0] = mid_z + 10.0;
    for (int j = 0; j < cfg.hidden; ++j) w2[j * sdf_out] = 0.0;
    w2[0] = 1.0;
    b2[0] = -10.0;
  }
  params.add("renderer.sdf.w1", std::move(w1));
  params.add("renderer.sdf.b1", std::move(b1));
  params.add("renderer.sdf.w2", std::move(w2));
  params.add("renderer.sdf.b2", std::move(b2));
  const int rgb_in = channels + 9 + cfg.geo_features;
  params.add("renderer.rgb.w1", xavier_uniform(Shape{rgb_in, cfg.hidden}, rgb_in, cfg.hidden, rng));
  params.add("renderer.rgb.b1", Tensor(Shape{cfg.hidden}, 0.0));
  params.add("renderer.rgb.w2", xavier_uniform(Shape{cfg.hidden, 3}, cfg.hidden, 3, rng));
  params.add("renderer.rgb.b2", Tensor(Shape{3}, 0.0));
  params.add("renderer.log_a", Tensor(Shape{1}, std::log(cfg.a_init)));
}

Var interpolate_feature(const Var& grid, const geometry::GridExtent& extent, const std::vector<Vec3>& positions) {
  const auto& s = grid.shape();
  if (s.size() != 4 || s[1] != extent.nz || s[2] != extent.ny || s[3] != extent.nx) {
    throw ShapeError("interpolate_feature: grid " + shape_string(s) + " does not match the extent");
  }
  const auto n = static_cast<std::int64_t>(positions.size());
  Tensor coords(Shape{n, 3});
  Tensor inside(Shape{n, 1}, 0.0);
  const double hi[3] = {extent.nx - 1.0, extent.ny - 1.0, extent.nz - 1.0};
  for (std::int64_t i = 0; i < n; ++i) {
    const Vec3& p = positions[static_cast<std::size_t>(i)];
    if (!extent.contains(p)) continue;
    inside[i] = 1.0;
    const Vec3 idx = extent.to_index(p);
    for (int k = 0; k < 3; ++k) coords[3 * i + k] = std::clamp(idx[k], 0.0, hi[k]);
  }
  auto& tape = *grid.tape();
  return diff::mul(diff::trilinear_sample_3d(grid, tape.constant(std::move(coords))), tape.constant(std::move(inside)));
}

Tensor normalized_positions(const geometry::GridExtent& e, const std::vector<Vec3>& positions) {
  const Vec3 mid(0.5 * (e.x_max + e.x_min), 0.5 * (e.y_max + e.y_min), 0.5 * (e.z_max + e.z_min));
  const Vec3 half(0.5 * (e.x_max - e.x_min), 0.5 * (e.y_max - e.y_min), 0.5 * (e.z_max - e.z_min));
  std::vector<Vec3> out(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) out[i] = (positions[i] - mid).cwiseQuotient(half);
  return rows_of(out);
}

SdfOutput sdf_head(const Var& features, const Var& positions, const BoundParams& params) {
  const Var h = diff::relu(linear(cat({features, positions}), params["renderer.sdf.w1"], params["renderer.sdf.b1"]));
  const Var out = linear(h, params["renderer.sdf.w2"], params["renderer.sdf.b2"]);
  const auto width = out.dim(1);
  SdfOutput r;
  r.sdf = diff::slice(out, 1, 0, 1);
  r.geometry = width > 1 ? diff::slice(out, 1, 1, width) : Var{};
  return r;
}

Var rgb_head(const Var& features, const Var& positions, const Var& directions, const Var& normals,
             const Var& geometry, const BoundParams& params) {
  const Var in = geometry.valid() ? cat({features, positions, directions, normals, geometry})
                                  : cat({features, positions, directions, normals});
  const Var h = diff::relu(linear(in, params["renderer.rgb.w1"], params["renderer.rgb.b1"]));
  return diff::sigmoid(linear(h, params["renderer.rgb.w2"], params["renderer.rgb.b2"]));
}

std::vector<Vec3> normals(const ScalarField& field, const std::vector<Vec3>& points, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("normals: eps must be positive");
  std::vector<Vec3> probes;
  probes.reserve(points.size() * 6);
  for (const Vec3& p : points) {
    for (int axis = 0; axis < 3; ++axis) {
      const Vec3 d = Vec3::Unit(axis) * eps;
      probes.push_back(p + d);
      probes.push_back(p - d);
    }
  }
  const auto values = field(probes);
  if (values.size() != probes.size()) throw std::runtime_error("normals: field returned the wrong number of values");
  std::vector<Vec3> out(points.size(), Vec3::Zero());
  for (std::size_t i = 0; i < points.size(); ++i) {
    Vec3 g;
    for (int axis = 0; axis < 3; ++axis) {
      g[axis] = (values[6 * i + 2 * axis] - values[6 * i + 2 * axis + 1]) / (2.0 * eps);
    }
    const double norm = g.norm();
    if (std::isfinite(norm) && norm >= 1e-8) out[i] = g / norm;
  }
  return out;
}

ScalarField learned_sdf(const Tensor& grid, const geometry::GridExtent& extent, const ParameterSet& params) {
  ParameterSet heads;
  for (const auto& [name, t] : params.items()) {
    if (name.rfind("renderer.sdf.", 0) == 0) heads.add(name, t);
  }
  return [grid, extent, heads](const std::vector<Vec3>& points) {
    diff::Tape scratch;
    const BoundParams bound(scratch, heads, false);
    const Var g = scratch.constant(grid);
    const Var f = interpolate_feature(g, extent, points);
    const SdfOutput out = sdf_head(f, scratch.constant(normalized_positions(extent, points)), bound);
    const auto& v = out.sdf.value().storage();
    return std::vector<double>(v.begin(), v.end());
  };
}

Var opacity(const Var& sdf, const Var& a) {
  if (sdf.shape().size() != 2 || sdf.dim(1) < 1) throw ShapeError("opacity expects (R, K) SDF values");
  auto& tape = *sdf.tape();
  const auto r = sdf.dim(0), k = sdf.dim(1);
  const Var tail = tape.constant(Tensor(Shape{r, 1}, 0.0));
  const Var next = k > 1 ? cat({diff::slice(sdf, 1, 1, k), tail}) : tail;
  const Var here_sig = diff::sigmoid(diff::mul(sdf, a));
  const Var next_sig = diff::sigmoid(diff::mul(next, a));
  return diff::relu(diff::div(diff::sub(here_sig, next_sig), diff::clamp_min(here_sig, 1e-12)));
}

Accumulated accumulate(const Var& alpha, const Var& colors, const Tensor& depths) {
  const auto r = alpha.dim(0), k = alpha.dim(1);
  if (colors.shape() != Shape{r, k, 3} || depths.shape() != Shape{r, k}) {
    throw ShapeError("accumulate: alpha " + shape_string(alpha.shape()) + " colors " + shape_string(colors.shape()) +
                     " depths " + shape_string(depths.shape()));
  }
  auto& tape = *alpha.tape();
  Accumulated acc;
  acc.transmittance = diff::exclusive_cumprod(diff::add_scalar(diff::mul_scalar(alpha, -1.0), 1.0), 1);
  acc.weights = diff::mul(acc.transmittance, alpha);
  acc.color = diff::reduce_sum(diff::mul(diff::reshape(acc.weights, Shape{r, k, 1}), colors), 1);
  acc.depth = diff::reduce_sum(diff::mul(acc.weights, tape.constant(depths)), 1);
  return acc;
}

RayBatch make_ray_batch(const std::vector<masking::SupervisionSet>& supervision,
                        const std::vector<geometry::Camera>& cameras, const RendererConfig& cfg,
                        std::mt19937_64* jitter_rng) {
  cfg.validate();
  if (supervision.size() != cameras.size()) throw std::invalid_argument("one supervision set per camera required");
  std::int64_t m = 0;
  for (const auto& s : supervision) m += static_cast<std::int64_t>(s.size());
  if (m == 0) throw std::invalid_argument("render_loss: no supervision pixels");
  RayBatch batch;
  batch.samples = cfg.samples;
  batch.depths = Tensor(Shape{m, cfg.samples});
  batch.target_color = Tensor(Shape{m, 3});
  batch.target_depth = Tensor(Shape{m});
  const geometry::EgoPose identity;
  std::int64_t i = 0;
  for (std::size_t v = 0; v < cameras.size(); ++v) {
    for (const auto& px : supervision[v]) {
      geometry::Ray ray = geometry::generate_ray(cameras[v], geometry::Vec2(px.col + 0.5, px.row + 0.5), identity);
      const auto points = geometry::sample_along_ray(ray, cfg.near, cfg.far, cfg.samples, cfg.jitter ? jitter_rng : nullptr);
      for (int j = 0; j < cfg.samples; ++j) {
        batch.positions.push_back(points[static_cast<std::size_t>(j)]);
        batch.directions.push_back(ray.direction);
        batch.depths[i * cfg.samples + j] = ray.depths[static_cast<std::size_t>(j)];
      }
      for (int c = 0; c < 3; ++c) batch.target_color[3 * i + c] = px.color[c];
      batch.target_depth[i] = px.depth;
      batch.rays.push_back(std::move(ray));
      ++i;
    }
  }
  return batch;
}

Accumulated render_rays(const Var& grid, const geometry::GridExtent& extent, const RayBatch& batch,
                        const BoundParams& params, std::vector<Vec3>* normal_cache) {
  auto& tape = *grid.tape();
  const auto r = batch.ray_count();
  const auto k = static_cast<std::int64_t>(batch.samples);
  const Var f = interpolate_feature(grid, extent, batch.positions);
  const Var pos = tape.constant(normalized_positions(extent, batch.positions));
  const SdfOutput sdf = sdf_head(f, pos, params);

  std::vector<Vec3> n;
  if (normal_cache && !normal_cache->empty()) {
    if (normal_cache->size() != batch.positions.size()) throw std::invalid_argument("normal cache size mismatch");
    n = *normal_cache;
  } else {
    ParameterSet sdf_params;
    for (const char* name : {"renderer.sdf.w1", "renderer.sdf.b1", "renderer.sdf.w2", "renderer.sdf.b2"}) {
      sdf_params.add(name, params[name].value());
    }
    n = normals(learned_sdf(grid.value(), extent, sdf_params), batch.positions, half_cell(extent));
    if (normal_cache) *normal_cache = n;
  }

  const Var color = rgb_head(f, pos, tape.constant(rows_of(batch.directions)), tape.constant(rows_of(n)), sdf.geometry,
                             params);
  const Var alpha = opacity(diff::reshape(sdf.sdf, Shape{r, k}), diff::exp(params["renderer.log_a"]));
  return accumulate(alpha, diff::reshape(color, Shape{r, k, 3}), batch.depths);
}

RenderResult loss_from(const Accumulated& acc, const RayBatch& batch, const RendererConfig& cfg) {
  auto& tape = *acc.color.tape();
  const double m = static_cast<double>(batch.ray_count());
  RenderResult out;
  out.accumulated = acc;
  out.rgb_term = diff::mul_scalar(
      diff::reduce_sum(diff::abs(diff::sub(acc.color, tape.constant(batch.target_color)))), cfg.lambda_rgb / m);
  out.depth_term = diff::mul_scalar(
      diff::reduce_sum(diff::abs(diff::sub(acc.depth, tape.constant(batch.target_depth)))), cfg.lambda_depth / m);
  out.loss = diff::add(out.rgb_term, out.depth_term);
  return out;
}

RenderResult render_loss(const Var& grid, const geometry::GridExtent& extent, const RayBatch& batch,
                         const BoundParams& params, const RendererConfig& cfg, std::vector<Vec3>* normal_cache) {
  return loss_from(render_rays(grid, extent, batch, params, normal_cache), batch, cfg);
}

ViewRender render_view(const Tensor& grid, const geometry::GridExtent& extent, const geometry::Camera& camera,
                       const ParameterSet& params, RendererConfig cfg, int chunk_rows) {
  if (chunk_rows < 1) throw std::invalid_argument("render_view: chunk_rows must be positive");
  cfg.jitter = false;
  const int h = camera.height, w = camera.width;
  ViewRender out{Tensor(Shape{h, w, 3}), Tensor(Shape{h, w})};
  for (int r0 = 0; r0 < h; r0 += chunk_rows) {
    const int r1 = std::min(h, r0 + chunk_rows);
    masking::SupervisionSet pixels;
    for (int r = r0; r < r1; ++r)
      for (int c = 0; c < w; ++c) pixels.push_back({c, r, Vec3::Zero(), 0.0});
    const RayBatch batch = make_ray_batch({pixels}, {camera}, cfg, nullptr);
    diff::Tape tape;
    const BoundParams bound(tape, params, false);
    const Accumulated acc = render_rays(tape.constant(grid), extent, batch, bound);
    const auto& color = acc.color.value();
    const auto& depth = acc.depth.value();
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      const auto flat = static_cast<std::int64_t>(pixels[i].row) * w + pixels[i].col;
      const auto ii = static_cast<std::int64_t>(i);
      for (int k = 0; k < 3; ++k) out.color[flat * 3 + k] = color[ii * 3 + k];
      out.depth[flat] = depth[ii];
    }
  }
  return out;
}

}  // namespace mim4d::render
