// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

// Depth-aware supervision sampling and two-stage patch masking of input images.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mim4d/blob.hpp"
#include "mim4d/geometry.hpp"
#include "mim4d/scenegen.hpp"
#include "mim4d/tensor.hpp"

namespace mim4d::masking {

/// Boolean grid, true = masked (invisible).
struct Mask2d {
  int height = 0, width = 0;
  std::vector<std::uint8_t> masked;

  Mask2d() = default;
  Mask2d(int h, int w, bool value = false)
      : height(h), width(w), masked(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), value ? 1 : 0) {}

  bool at(int row, int col) const { return masked[static_cast<std::size_t>(row * width + col)] != 0; }
  void set(int row, int col, bool v) { masked[static_cast<std::size_t>(row * width + col)] = v ? 1 : 0; }
  double masked_fraction() const;
  /// (H, W) tensor with 1 for visible cells, 0 for masked.
  Tensor visibility() const;

  friend bool operator==(const Mask2d&, const Mask2d&) = default;
};

struct PixelMask : Mask2d {
  int s_ray = 4, s_fill = 8;
  double ratio = 0.3;
  int eligible_cells = 0;  // stage-2 cells untouched by stage 1
  int stage2_cells = 0;    // stage-2 cells masked
  int total_cells = 0;
};

struct SupervisionPixel {
  int col = 0, row = 0;
  geometry::Vec3 color = geometry::Vec3::Zero();
  double depth = 0.0;
};

using SupervisionSet = std::vector<SupervisionPixel>;

/// Uniform draw of M sparse-depth pixels with depth < tau, without replacement.
/// Takes all candidates (with a warning) when fewer than M exist; throws when none do.
SupervisionSet select_supervision_pixels(const scene::Frame& frame, int view, double tau, int count,
                                         std::uint64_t seed);

/// Stage 1 masks an s_ray patch centered on every supervision pixel. Stage 2 tiles
/// the image with s_fill cells, drops cells touching stage-1 patches, and masks
/// round(ratio * eligible) of the rest uniformly at random.
PixelMask build_mask(const SupervisionSet& supervision, int height, int width, int s_ray, int s_fill, double ratio,
                     std::uint64_t seed);

struct MaskedImage {
  Tensor image;       // (H, W, 3), masked pixels zeroed
  Tensor visibility;  // (H, W), 1 visible / 0 masked
};

MaskedImage apply_mask(const Tensor& image, const Mask2d& mask);

/// A cell of the strided grid is visible iff any pixel it covers is visible.
/// Border cells cover the clipped remainder (ceil division).
Mask2d downsample_mask(const Mask2d& mask, int stride);

void put_mask(io::Blob& blob, const std::string& name, const Mask2d& mask);
Mask2d get_mask(const io::Blob& blob, const std::string& name);

}  // namespace mim4d::masking
