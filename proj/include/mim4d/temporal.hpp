// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

// Voxel decoder: drop one frame's voxel grid and reconstruct it from the rest.
//
// Voxel grids (C, Z, H, W) fold into BEV grids (C*Z, H, W) with channel index
// c*Z + z, which is a plain row-major reshape. Short-term and long-term
// deformable attention read the remaining BEV grids at ego-motion-warped
// reference points; a small perceptron fuses the branches.

#pragma once

#include <random>
#include <string>
#include <vector>

#include "mim4d/diff.hpp"
#include "mim4d/geometry.hpp"
#include "mim4d/params.hpp"

namespace mim4d::temporal {

enum class Strategy { kNone, kWarpCat, kShort, kLong, kBoth };

Strategy parse_strategy(const std::string& name);
std::string to_string(Strategy s);

struct TemporalConfig {
  Strategy strategy = Strategy::kBoth;
  int window = 5;     // N + 1
  int heads = 2;
  int points = 4;     // sampling points per source per head
  int query_dim = 16; // short-term query width; the long-term query uses half
  int channels = 16;  // C of the voxel grid
  geometry::GridExtent extent;
  bool warpcat_identity_init = false;

  int bev_channels() const { return channels * extent.nz; }
  void validate() const;
};

diff::Var height_to_channel(const diff::Var& voxel);
diff::Var channel_to_height(const diff::Var& bev, int z);

struct DeformAttnWeights {
  diff::Var offset_w, offset_b;  // query -> heads*slots*points*2 offsets (cells)
  diff::Var weight_w, weight_b;  // query -> heads*slots*points logits
  diff::Var value_w, value_b;    // per-cell value projection, Cv -> Cv
  diff::Var out_w, out_b;        // Cv -> Cout
  int heads = 1, points = 1, slots = 1;
};

DeformAttnWeights bind_deform_weights(const BoundParams& params, const std::string& prefix, int heads, int points,
                                      int slots);
void init_deform_params(ParameterSet& params, const std::string& prefix, int query_dim, int value_dim, int out_dim,
                        int heads, int points, int slots, std::mt19937_64& rng);

/// query: (Cq, H, W). refs[i]: (H*W, 2) reference points in source i's cell-index
/// coordinates. sources[i]: (Cv, H, W) occupying attention slot slots[i]. For
/// every cell and head, each source is sampled bilinearly at ref + offset for
/// every point; softmax weights over the present slots' points combine them.
/// Samples outside the grid read zero. Returns (Cout, H, W).
diff::Var deform_attn(const diff::Var& query, const std::vector<Tensor>& refs, const std::vector<diff::Var>& sources,
                      const std::vector<int>& slots, const DeformAttnWeights& weights);

/// Same as deform_attn but on row layout: query (P, Cq) -> (P, Cout).
diff::Var deform_attn_rows(const diff::Var& query_rows, int grid_h, int grid_w, const std::vector<Tensor>& refs,
                           const std::vector<diff::Var>& sources, const std::vector<int>& slots,
                           const DeformAttnWeights& weights);

/// Softmax attention weights (P, heads * present_slots * points) for inspection.
diff::Var attention_weights(const diff::Var& query_rows, const std::vector<int>& slots,
                            const DeformAttnWeights& weights, int head);

/// Reference points of frame `from` warped into frame `to`, as cell-index coords (P, 2).
Tensor warped_reference_coords(const geometry::GridExtent& extent, const geometry::EgoPose& from,
                               const geometry::EgoPose& to);

void init_temporal_params(ParameterSet& params, const TemporalConfig& cfg, std::mt19937_64& rng);

/// voxels: the encoded window; voxels[drop] is read only by Strategy::kNone.
diff::Var reconstruct_dropped(const std::vector<diff::Var>& voxels, int drop,
                              const std::vector<geometry::EgoPose>& poses, const BoundParams& params,
                              const TemporalConfig& cfg);

int choose_drop_index(int window, std::mt19937_64& rng);

}  // namespace mim4d::temporal
