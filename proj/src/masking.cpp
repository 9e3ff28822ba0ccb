// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mim4d/masking.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace mim4d::masking {

double Mask2d::masked_fraction() const {
  if (masked.empty()) return 0.0;
  const auto n = std::count(masked.begin(), masked.end(), std::uint8_t{1});
  return static_cast<double>(n) / static_cast<double>(masked.size());
}

Tensor Mask2d::visibility() const {
  Tensor vis(Shape{height, width});
  for (std::size_t i = 0; i < masked.size(); ++i) vis[static_cast<std::int64_t>(i)] = masked[i] ? 0.0 : 1.0;
  return vis;
}

SupervisionSet select_supervision_pixels(const scene::Frame& frame, int view, double tau, int count,
                                         std::uint64_t seed) {
  if (view < 0 || view >= static_cast<int>(frame.depths.size())) throw std::out_of_range("view index out of range");
  const auto& depths = frame.depths[static_cast<std::size_t>(view)];
  const auto& image = frame.images[static_cast<std::size_t>(view)];
  const auto w = image.dim(1);
  SupervisionSet candidates;
  for (const auto& d : depths) {
    if (!(d.depth < tau)) continue;
    const std::int64_t base = (static_cast<std::int64_t>(d.row) * w + d.col) * 3;
    candidates.push_back({d.col, d.row, geometry::Vec3(image[base], image[base + 1], image[base + 2]), d.depth});
  }
  if (candidates.empty()) {
    throw std::runtime_error("no sparse-depth pixels below the depth threshold; scene or threshold misconfigured");
  }
  if (count < 0) throw std::invalid_argument("supervision count must be non-negative");
  if (static_cast<std::size_t>(count) >= candidates.size()) {
    if (static_cast<std::size_t>(count) > candidates.size()) {
      std::cerr << "warning: only " << candidates.size() << " supervision candidates for " << count << " requested\n";
    }
    return candidates;
  }
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < static_cast<std::size_t>(count); ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, candidates.size() - 1);
    std::swap(candidates[i], candidates[pick(rng)]);
  }
  candidates.resize(static_cast<std::size_t>(count));
  return candidates;
}

PixelMask build_mask(const SupervisionSet& supervision, int height, int width, int s_ray, int s_fill, double ratio,
                     std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("mask ratio must lie in [0, 1]");
  if (height <= 0 || width <= 0 || s_ray <= 0 || s_fill <= 0) throw std::invalid_argument("mask sizes must be positive");
  PixelMask mask;
  static_cast<Mask2d&>(mask) = Mask2d(height, width);
  mask.s_ray = s_ray;
  mask.s_fill = s_fill;
  mask.ratio = ratio;

  // Stage 1: patch rows [row - s/2, row - s/2 + s), clipped at the border.
  for (const auto& px : supervision) {
    const int r0 = px.row - s_ray / 2, c0 = px.col - s_ray / 2;
    for (int r = std::max(0, r0); r < std::min(height, r0 + s_ray); ++r)
      for (int c = std::max(0, c0); c < std::min(width, c0 + s_ray); ++c) mask.set(r, c, true);
  }

  // Stage 2 over the fixed s_fill grid.
  const int rows = (height + s_fill - 1) / s_fill, cols = (width + s_fill - 1) / s_fill;
  mask.total_cells = rows * cols;
  std::vector<int> eligible;
  for (int cr = 0; cr < rows; ++cr) {
    for (int cc = 0; cc < cols; ++cc) {
      bool touched = false;
      for (int r = cr * s_fill; r < std::min(height, (cr + 1) * s_fill) && !touched; ++r)
        for (int c = cc * s_fill; c < std::min(width, (cc + 1) * s_fill) && !touched; ++c) touched = mask.at(r, c);
      if (!touched) eligible.push_back(cr * cols + cc);
    }
  }
  mask.eligible_cells = static_cast<int>(eligible.size());
  const auto target = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(eligible.size())));
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < target; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, eligible.size() - 1);
    std::swap(eligible[i], eligible[pick(rng)]);
  }
  for (std::size_t i = 0; i < target; ++i) {
    const int cr = eligible[i] / cols, cc = eligible[i] % cols;
    for (int r = cr * s_fill; r < std::min(height, (cr + 1) * s_fill); ++r)
      for (int c = cc * s_fill; c < std::min(width, (cc + 1) * s_fill); ++c) mask.set(r, c, true);
  }
  mask.stage2_cells = static_cast<int>(target);
  return mask;
}

MaskedImage apply_mask(const Tensor& image, const Mask2d& mask) {
  if (image.rank() != 3 || image.dim(0) != mask.height || image.dim(1) != mask.width) {
    throw ShapeError("apply_mask: image " + shape_string(image.shape()) + " vs mask " + std::to_string(mask.height) +
                     "x" + std::to_string(mask.width));
  }
  MaskedImage out{image, mask.visibility()};
  const auto ch = image.dim(2);
  for (std::int64_t i = 0; i < out.visibility.numel(); ++i) {
    if (out.visibility[i] == 0.0) {
      for (std::int64_t c = 0; c < ch; ++c) out.image[i * ch + c] = 0.0;
    }
  }
  return out;
}

Mask2d downsample_mask(const Mask2d& mask, int stride) {
  if (stride < 1) throw std::invalid_argument("stride must be >= 1");
  const int h = (mask.height + stride - 1) / stride, w = (mask.width + stride - 1) / stride;
  Mask2d out(h, w, true);
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c)
      if (!mask.at(r, c)) out.set(r / stride, c / stride, false);
  return out;
}

void put_mask(io::Blob& blob, const std::string& name, const Mask2d& mask) {
  blob.put_u8(name, mask.masked, Shape{mask.height, mask.width});
}

Mask2d get_mask(const io::Blob& blob, const std::string& name) {
  const auto& a = blob.at(name);
  if (a.extents.size() != 2) throw io::BlobError("mask array must be rank 2: " + name);
  Mask2d m(static_cast<int>(a.extents[0]), static_cast<int>(a.extents[1]));
  m.masked = blob.u8(name);
  return m;
}

}  // namespace mim4d::masking
