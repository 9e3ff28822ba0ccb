// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mim4d/temporal.hpp"

#include <cmath>
#include <stdexcept>

namespace mim4d::temporal {

using diff::Var;

Strategy parse_strategy(const std::string& name) {
  if (name == "none") return Strategy::kNone;
  if (name == "warp-cat") return Strategy::kWarpCat;
  if (name == "short") return Strategy::kShort;
  if (name == "long") return Strategy::kLong;
  if (name == "both") return Strategy::kBoth;
  throw std::invalid_argument("unknown temporal strategy: " + name);
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kNone:
      return "none";
    case Strategy::kWarpCat:
      return "warp-cat";
    case Strategy::kShort:
      return "short";
    case Strategy::kLong:
      return "long";
    case Strategy::kBoth:
      return "both";
  }
  return "?";
}

void TemporalConfig::validate() const {
  extent.validate();
  if (window < 1) throw std::invalid_argument("temporal window must be >= 1");
  if (strategy != Strategy::kNone && window < 2) {
    throw std::invalid_argument("strategy " + to_string(strategy) + " needs a window of at least 2 frames");
  }
  if (heads < 1 || points < 1 || query_dim < 2 || channels < 1) throw std::invalid_argument("invalid decoder sizes");
  const int cb = bev_channels();
  if (cb % heads != 0 || (cb / 2) % heads != 0 || cb % 2 != 0) {
    throw std::invalid_argument("BEV width and its half must be divisible by the head count");
  }
}

Var height_to_channel(const Var& voxel) {
  const auto& s = voxel.shape();
  if (s.size() != 4) throw ShapeError("height_to_channel expects (C, Z, H, W), got " + shape_string(s));
  return diff::reshape(voxel, Shape{s[0] * s[1], s[2], s[3]});
}

Var channel_to_height(const Var& bev, int z) {
  const auto& s = bev.shape();
  if (s.size() != 3) throw ShapeError("channel_to_height expects (C', H, W), got " + shape_string(s));
  if (z <= 0 || s[0] % z != 0) {
    throw ShapeError("channel_to_height: " + std::to_string(s[0]) + " channels not divisible by Z=" + std::to_string(z));
  }
  return diff::reshape(bev, Shape{s[0] / z, z, s[1], s[2]});
}

namespace {

Var linear(const Var& x, const Var& w, const Var& b) { return diff::add(diff::matmul(x, w), b); }

Var grid_to_rows(const Var& g) {
  const auto& s = g.shape();
  return diff::transpose(diff::reshape(g, Shape{s[0], s[1] * s[2]}));
}

Var rows_to_grid(const Var& r, std::int64_t h, std::int64_t w) {
  return diff::reshape(diff::transpose(r), Shape{r.dim(1), h, w});
}

Tensor identity(std::int64_t n, double noise, std::mt19937_64& rng) {
  Tensor t = diff::random_tensor(Shape{n, n}, rng, -noise, noise);
  for (std::int64_t i = 0; i < n; ++i) t[i * n + i] += 1.0;
  return t;
}

void add_mlp(ParameterSet& params, const std::string& prefix, int in, int hidden, int out, std::mt19937_64& rng) {
  params.add(prefix + ".w1", xavier_uniform(Shape{in, hidden}, in, hidden, rng));
  params.add(prefix + ".b1", Tensor(Shape{hidden}, 0.0));
  params.add(prefix + ".w2", xavier_uniform(Shape{hidden, out}, hidden, out, rng));
  params.add(prefix + ".b2", Tensor(Shape{out}, 0.0));
}

Var run_mlp(const Var& x, const BoundParams& params, const std::string& prefix) {
  const Var h = diff::relu(linear(x, params[prefix + ".w1"], params[prefix + ".b1"]));
  return linear(h, params[prefix + ".w2"], params[prefix + ".b2"]);
}

}  // namespace

DeformAttnWeights bind_deform_weights(const BoundParams& params, const std::string& prefix, int heads, int points,
                                      int slots) {
  DeformAttnWeights w;
  w.offset_w = params[prefix + ".offset_w"];
  w.offset_b = params[prefix + ".offset_b"];
  w.weight_w = params[prefix + ".weight_w"];
  w.weight_b = params[prefix + ".weight_b"];
  w.value_w = params[prefix + ".value_w"];
  w.value_b = params[prefix + ".value_b"];
  w.out_w = params[prefix + ".out_w"];
  w.out_b = params[prefix + ".out_b"];
  w.heads = heads;
  w.points = points;
  w.slots = slots;
  return w;
}

void init_deform_params(ParameterSet& params, const std::string& prefix, int query_dim, int value_dim, int out_dim,
                        int heads, int points, int slots, std::mt19937_64& rng) {
  constexpr double kPi = 3.14159265358979323846;
  const int n = heads * slots * points;
  params.add(prefix + ".offset_w", Tensor(Shape{query_dim, n * 2}, 0.0));
  // Each head fans its points out along its own direction, point k at k/2 cells.
  Tensor offset_b(Shape{n * 2});
  for (int h = 0; h < heads; ++h) {
    const double angle = 2.0 * kPi * h / heads;
    for (int s = 0; s < slots; ++s) {
      for (int k = 0; k < points; ++k) {
        const int col = ((h * slots + s) * points + k) * 2;
        offset_b[col] = 0.5 * k * std::cos(angle);
        offset_b[col + 1] = 0.5 * k * std::sin(angle);
      }
    }
  }
  params.add(prefix + ".offset_b", std::move(offset_b));
  params.add(prefix + ".weight_w", diff::random_tensor(Shape{query_dim, n}, rng, -0.01, 0.01));
  params.add(prefix + ".weight_b", Tensor(Shape{n}, 0.0));
  params.add(prefix + ".value_w", identity(value_dim, 0.01, rng));
  params.add(prefix + ".value_b", Tensor(Shape{value_dim}, 0.0));
  if (out_dim == value_dim) {
    params.add(prefix + ".out_w", identity(value_dim, 0.01, rng));
  } else {
    params.add(prefix + ".out_w", xavier_uniform(Shape{value_dim, out_dim}, value_dim, out_dim, rng));
  }
  params.add(prefix + ".out_b", Tensor(Shape{out_dim}, 0.0));
}

Var attention_weights(const Var& query_rows, const std::vector<int>& slots, const DeformAttnWeights& w, int head) {
  const Var logits = linear(query_rows, w.weight_w, w.weight_b);
  std::vector<Var> cols;
  for (int s : slots) {
    const std::int64_t begin = static_cast<std::int64_t>(head * w.slots + s) * w.points;
    cols.push_back(diff::slice(logits, 1, begin, begin + w.points));
  }
  return diff::softmax(cols.size() == 1 ? cols[0] : diff::concat(cols, 1), 1);
}

Var deform_attn_rows(const Var& query_rows, int grid_h, int grid_w, const std::vector<Tensor>& refs,
                     const std::vector<Var>& sources, const std::vector<int>& slots, const DeformAttnWeights& w) {
  if (sources.empty()) throw std::invalid_argument("deform_attn: empty source list");
  if (refs.size() != sources.size() || slots.size() != sources.size()) {
    throw std::invalid_argument("deform_attn: refs, sources and slots must align");
  }
  auto& tape = *query_rows.tape();
  const std::int64_t p = static_cast<std::int64_t>(grid_h) * grid_w;
  if (query_rows.dim(0) != p) throw ShapeError("deform_attn: query rows do not match the grid");
  const std::int64_t cv = w.value_w.dim(0);
  if (cv % w.heads != 0) throw ShapeError("deform_attn: value width not divisible by heads");
  const std::int64_t hd = cv / w.heads;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (sources[i].shape() != Shape{cv, grid_h, grid_w}) {
      throw ShapeError("deform_attn: source " + shape_string(sources[i].shape()) + " does not match value width");
    }
    if (refs[i].shape() != Shape{p, 2}) throw ShapeError("deform_attn: reference points must be (P, 2)");
    if (slots[i] < 0 || slots[i] >= w.slots) throw std::out_of_range("deform_attn: slot out of range");
  }

  const Var offsets = linear(query_rows, w.offset_w, w.offset_b);
  std::vector<Var> values;
  std::vector<Var> ref_vars;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    values.push_back(rows_to_grid(linear(grid_to_rows(sources[i]), w.value_w, w.value_b), grid_h, grid_w));
    ref_vars.push_back(tape.constant(refs[i]));
  }

  std::vector<Var> head_out;
  for (int h = 0; h < w.heads; ++h) {
    const Var attn = attention_weights(query_rows, slots, w, h);
    Var acc;
    for (std::size_t i = 0; i < sources.size(); ++i) {
      const Var field = diff::slice(values[i], 0, h * hd, (h + 1) * hd);
      for (int k = 0; k < w.points; ++k) {
        const std::int64_t col = ((static_cast<std::int64_t>(h) * w.slots + slots[i]) * w.points + k) * 2;
        const Var coords = diff::add(ref_vars[i], diff::slice(offsets, 1, col, col + 2));
        const Var sampled = diff::bilinear_sample_2d(field, coords);
        const std::int64_t wcol = static_cast<std::int64_t>(i) * w.points + k;
        const Var term = diff::mul(diff::slice(attn, 1, wcol, wcol + 1), sampled);
        acc = acc.valid() ? diff::add(acc, term) : term;
      }
    }
    head_out.push_back(acc);
  }
  const Var merged = head_out.size() == 1 ? head_out[0] : diff::concat(head_out, 1);
  return linear(merged, w.out_w, w.out_b);
}

Var deform_attn(const Var& query, const std::vector<Tensor>& refs, const std::vector<Var>& sources,
                const std::vector<int>& slots, const DeformAttnWeights& w) {
  const auto& s = query.shape();
  if (s.size() != 3) throw ShapeError("deform_attn: query must be (Cq, H, W)");
  const Var rows = deform_attn_rows(grid_to_rows(query), static_cast<int>(s[1]), static_cast<int>(s[2]), refs,
                                    sources, slots, w);
  return rows_to_grid(rows, s[1], s[2]);
}

Tensor warped_reference_coords(const geometry::GridExtent& extent, const geometry::EgoPose& from,
                               const geometry::EgoPose& to) {
  const auto warped = geometry::warp_reference_points(geometry::bev_reference_points(extent), from, to);
  Tensor coords(Shape{static_cast<std::int64_t>(warped.size()), 2});
  for (std::size_t i = 0; i < warped.size(); ++i) {
    const auto idx = extent.to_index(warped[i]);
    coords[static_cast<std::int64_t>(2 * i)] = idx.x();
    coords[static_cast<std::int64_t>(2 * i + 1)] = idx.y();
  }
  return coords;
}

void init_temporal_params(ParameterSet& params, const TemporalConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (cfg.strategy == Strategy::kNone) return;
  const int cb = cfg.bev_channels();
  const int ny = cfg.extent.ny, nx = cfg.extent.nx;
  const bool use_short = cfg.strategy == Strategy::kShort || cfg.strategy == Strategy::kBoth;
  const bool use_long = cfg.strategy == Strategy::kLong || cfg.strategy == Strategy::kBoth;
  if (cfg.strategy == Strategy::kWarpCat) {
    const int sources = cfg.window - 1;
    const int in = sources * cb;
    if (cfg.warpcat_identity_init) {
      Tensor w1(Shape{in, cb}, 0.0);
      for (int s = 0; s < sources; ++s)
        for (int c = 0; c < cb; ++c) w1[(s * cb + c) * cb + c] = 1.0 / sources;
      Tensor w2(Shape{cb, cb}, 0.0);
      for (int c = 0; c < cb; ++c) w2[c * cb + c] = 1.0;
      params.add("temporal.warpcat.w1", std::move(w1));
      params.add("temporal.warpcat.b1", Tensor(Shape{cb}, 0.0));
      params.add("temporal.warpcat.w2", std::move(w2));
      params.add("temporal.warpcat.b2", Tensor(Shape{cb}, 0.0));
    } else {
      add_mlp(params, "temporal.warpcat", in, cb, cb, rng);
    }
    return;
  }
  int fused_in = 0;
  if (use_short) {
    params.add("temporal.short.query", diff::random_tensor(Shape{cfg.query_dim, ny, nx}, rng, -0.5, 0.5));
    init_deform_params(params, "temporal.short", cfg.query_dim, cb, cb, cfg.heads, cfg.points, 2, rng);
    fused_in += cb;
  }
  if (use_long) {
    const int qd = cfg.query_dim / 2, vd = cb / 2;
    params.add("temporal.long.query", diff::random_tensor(Shape{qd, ny, nx}, rng, -0.5, 0.5));
    params.add("temporal.long.reduce_w", xavier_uniform(Shape{cb, vd}, cb, vd, rng));
    params.add("temporal.long.reduce_b", Tensor(Shape{vd}, 0.0));
    init_deform_params(params, "temporal.long", qd, vd, vd, cfg.heads, cfg.points, cfg.window - 1, rng);
    fused_in += vd;
  }
  add_mlp(params, "temporal.fuse", fused_in, cb, cb, rng);
}

Var reconstruct_dropped(const std::vector<Var>& voxels, int drop, const std::vector<geometry::EgoPose>& poses,
                        const BoundParams& params, const TemporalConfig& cfg) {
  const int n = static_cast<int>(voxels.size());
  if (drop < 0 || drop >= n) throw std::out_of_range("drop index out of range");
  if (cfg.strategy == Strategy::kNone) return voxels[static_cast<std::size_t>(drop)];
  if (n < 2) throw std::invalid_argument("temporal reconstruction needs at least two frames");
  if (n != cfg.window) throw std::invalid_argument("voxel sequence length does not match the configured window");
  if (static_cast<int>(poses.size()) != n) throw std::invalid_argument("one ego pose per frame required");

  const auto& shape = voxels[static_cast<std::size_t>(drop)].shape();
  const std::int64_t c = shape[0], z = shape[1], h = shape[2], w = shape[3];
  const std::int64_t cb = c * z;
  const auto& target_pose = poses[static_cast<std::size_t>(drop)];
  auto& tape = params.tape();

  auto bev = [&](int j) { return height_to_channel(voxels[static_cast<std::size_t>(j)]); };
  auto refs_for = [&](int j) {
    return warped_reference_coords(cfg.extent, target_pose, poses[static_cast<std::size_t>(j)]);
  };

  Var fused_rows;
  if (cfg.strategy == Strategy::kWarpCat) {
    std::vector<Var> parts;
    for (int j = 0; j < n; ++j) {
      if (j == drop) continue;
      parts.push_back(diff::bilinear_sample_2d(bev(j), tape.constant(refs_for(j))));
    }
    fused_rows = run_mlp(parts.size() == 1 ? parts[0] : diff::concat(parts, 1), params, "temporal.warpcat");
  } else {
    std::vector<Var> branches;
    if (cfg.strategy == Strategy::kShort || cfg.strategy == Strategy::kBoth) {
      std::vector<Tensor> refs;
      std::vector<Var> sources;
      std::vector<int> slots;
      for (int slot = 0; slot < 2; ++slot) {
        const int j = slot == 0 ? drop - 1 : drop + 1;
        if (j < 0 || j >= n) continue;
        refs.push_back(refs_for(j));
        sources.push_back(bev(j));
        slots.push_back(slot);
      }
      const auto weights = bind_deform_weights(params, "temporal.short", cfg.heads, cfg.points, 2);
      const Var query = grid_to_rows(params["temporal.short.query"]);
      branches.push_back(deform_attn_rows(query, static_cast<int>(h), static_cast<int>(w), refs, sources, slots, weights));
    }
    if (cfg.strategy == Strategy::kLong || cfg.strategy == Strategy::kBoth) {
      std::vector<Tensor> refs;
      std::vector<Var> sources;
      std::vector<int> slots;
      int slot = 0;
      for (int j = 0; j < n; ++j) {
        if (j == drop) continue;
        refs.push_back(refs_for(j));
        const Var reduced = linear(grid_to_rows(bev(j)), params["temporal.long.reduce_w"], params["temporal.long.reduce_b"]);
        sources.push_back(rows_to_grid(reduced, h, w));
        slots.push_back(slot++);
      }
      const auto weights = bind_deform_weights(params, "temporal.long", cfg.heads, cfg.points, n - 1);
      const Var query = grid_to_rows(params["temporal.long.query"]);
      branches.push_back(deform_attn_rows(query, static_cast<int>(h), static_cast<int>(w), refs, sources, slots, weights));
    }
    fused_rows = run_mlp(branches.size() == 1 ? branches[0] : diff::concat(branches, 1), params, "temporal.fuse");
  }
  if (fused_rows.dim(1) != cb) throw ShapeError("decoder output width does not match C*Z");
  return channel_to_height(rows_to_grid(fused_rows, h, w), static_cast<int>(z));
}

int choose_drop_index(int window, std::mt19937_64& rng) {
  if (window < 1) throw std::invalid_argument("window must be >= 1");
  std::uniform_int_distribution<int> pick(0, window - 1);
  return pick(rng);
}

}  // namespace mim4d::temporal
