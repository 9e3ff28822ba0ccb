// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

// Voxel encoder: a mask-respecting convolutional backbone followed by a
// lift-splat view transform into an ego-centric voxel grid.

#pragma once

#include <algorithm>
#include <random>
#include <vector>

#include "mim4d/diff.hpp"
#include "mim4d/geometry.hpp"
#include "mim4d/masking.hpp"
#include "mim4d/params.hpp"
#include "mim4d/scenegen.hpp"

namespace mim4d::encoder {

struct EncoderConfig {
  int channels = 16;         // C of the voxel grid
  int backbone_width = 16;   // stage widths: w/2, w, w, w
  int depth_bins = 16;       // D
  double depth_min = 0.5;
  double depth_max = 12.0;
  geometry::GridExtent extent;

  static constexpr int kStages = 4;
  static constexpr int kInputChannels = 4;  // masked RGB + visibility
  static constexpr int kStageStrides[kStages] = {2, 2, 1, 1};

  int stage_width(int stage) const { return stage == 0 ? std::max(1, backbone_width / 2) : backbone_width; }
  int total_stride() const;
  std::vector<double> bin_depths() const;
};

/// Registers backbone, mask token, depth head and context head under "encoder.".
void init_encoder_params(ParameterSet& params, const EncoderConfig& cfg, std::mt19937_64& rng);

struct FeatureMap {
  diff::Var features;  // (Cf, h, w)
  masking::Mask2d mask;
  int stride = 1;
};

/// Input is the masked image plus its visibility channel. After every
/// convolution, cells masked in the mask downsampled to that stage's stride are
/// zeroed, so nothing computed from hidden pixels reaches later stages.
FeatureMap masked_backbone(diff::Tape& tape, const masking::MaskedImage& input, const masking::Mask2d& mask,
                           const BoundParams& params, const EncoderConfig& cfg);

/// Masked cells take the learned token; visible cells pass through.
diff::Var densify(const diff::Var& features, const masking::Mask2d& mask, const diff::Var& token);

/// depth_probs: (D, h, w), each pixel a distribution over bins; context: (C, h, w).
/// Lifts the outer product to bin depths along each feature pixel's ray and
/// sum-pools it into the grid. Returns (C, nz, ny, nx); out-of-extent points drop.
diff::Var lift_splat(const diff::Var& depth_probs, const diff::Var& context, const geometry::Camera& camera,
                     int stride, const std::vector<double>& bin_depths, const geometry::GridExtent& extent);

/// Flat voxel index per (feature pixel, bin), row = pixel * D + bin; -1 when outside.
std::vector<std::int64_t> lift_indices(const geometry::Camera& camera, int height, int width, int stride,
                                       const std::vector<double>& bin_depths, const geometry::GridExtent& extent);

/// One image to its voxel contribution (C, nz, ny, nx).
diff::Var encode_image(diff::Tape& tape, const Tensor& image, const masking::Mask2d& mask,
                       const geometry::Camera& camera, const BoundParams& params, const EncoderConfig& cfg);

struct VoxelGrid {
  diff::Var features;  // (C, Z, H, W)
  geometry::GridExtent extent;
  int timestamp = 0;
};

/// masks[f][v] for every frame and view. Views of one frame sum into one grid.
std::vector<VoxelGrid> encode_clip(diff::Tape& tape, const scene::MultiViewClip& clip,
                                   const std::vector<std::vector<masking::Mask2d>>& masks, const BoundParams& params,
                                   const EncoderConfig& cfg);

}  // namespace mim4d::encoder
