// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mim4d/encoder.hpp"

#include <stdexcept>
#include <string>

namespace mim4d::encoder {

using diff::Var;

int EncoderConfig::total_stride() const {
  int s = 1;
  for (int st : kStageStrides) s *= st;
  return s;
}

std::vector<double> EncoderConfig::bin_depths() const {
  if (depth_bins < 2) throw std::invalid_argument("need at least two depth bins");
  if (!(depth_min > 0.0 && depth_min < depth_max)) throw std::invalid_argument("depth bins need 0 < min < max");
  std::vector<double> d(static_cast<std::size_t>(depth_bins));
  const double step = (depth_max - depth_min) / depth_bins;
  for (int k = 0; k < depth_bins; ++k) d[static_cast<std::size_t>(k)] = depth_min + (k + 0.5) * step;
  return d;
}

namespace {

std::string stage_name(int s, const char* what) { return "encoder.stage" + std::to_string(s) + "." + what; }

Var mask_to_var(diff::Tape& tape, const masking::Mask2d& mask) {
  return tape.constant(mask.visibility().reshaped(Shape{1, mask.height, mask.width}));
}

}  // namespace

void init_encoder_params(ParameterSet& params, const EncoderConfig& cfg, std::mt19937_64& rng) {
  int cin = EncoderConfig::kInputChannels;
  for (int s = 0; s < EncoderConfig::kStages; ++s) {
    const int cout = cfg.stage_width(s);
    params.add(stage_name(s, "weight"), xavier_uniform(Shape{cout, cin, 3, 3}, cin * 9, cout * 9, rng));
    params.add(stage_name(s, "bias"), Tensor(Shape{cout}, 0.0));
    cin = cout;
  }
  params.add("encoder.mask_token", diff::random_tensor(Shape{cin}, rng, -0.1, 0.1));
  params.add("encoder.depth_head.weight",
             xavier_uniform(Shape{cfg.depth_bins, cin, 1, 1}, cin, cfg.depth_bins, rng));
  params.add("encoder.depth_head.bias", Tensor(Shape{cfg.depth_bins}, 0.0));
  params.add("encoder.context_head.weight", xavier_uniform(Shape{cfg.channels, cin, 1, 1}, cin, cfg.channels, rng));
  params.add("encoder.context_head.bias", Tensor(Shape{cfg.channels}, 0.0));
}

FeatureMap masked_backbone(diff::Tape& tape, const masking::MaskedImage& input, const masking::Mask2d& mask,
                           const BoundParams& params, const EncoderConfig& cfg) {
  const auto h = input.image.dim(0), w = input.image.dim(1);
  if (mask.height != h || mask.width != w || input.visibility.shape() != Shape{h, w}) {
    throw ShapeError("masked_backbone: mask does not match the input resolution");
  }
  // HWC image + visibility -> CHW input.
  Tensor x0(Shape{EncoderConfig::kInputChannels, h, w});
  for (std::int64_t i = 0; i < h * w; ++i) {
    for (int c = 0; c < 3; ++c) x0[c * h * w + i] = input.image[i * 3 + c];
    x0[3 * h * w + i] = input.visibility[i];
  }
  Var x = tape.constant(std::move(x0));
  int stride = 1;
  masking::Mask2d stage_mask = mask;
  for (int s = 0; s < EncoderConfig::kStages; ++s) {
    const int st = EncoderConfig::kStageStrides[s];
    stride *= st;
    const Var& weight = params[stage_name(s, "weight")];
    if (weight.dim(0) != cfg.stage_width(s)) throw ShapeError("masked_backbone: stage width differs from the config");
    x = diff::conv2d(x, weight, params[stage_name(s, "bias")], st, 1);
    stage_mask = masking::downsample_mask(mask, stride);
    if (stage_mask.height != x.dim(1) || stage_mask.width != x.dim(2)) {
      throw ShapeError("masked_backbone: image size must be divisible by the backbone stride");
    }
    x = diff::relu(diff::mul(x, mask_to_var(tape, stage_mask)));
  }
  return FeatureMap{x, stage_mask, stride};
}

Var densify(const Var& features, const masking::Mask2d& mask, const Var& token) {
  auto& tape = *features.tape();
  const auto c = features.dim(0);
  if (features.dim(1) != mask.height || features.dim(2) != mask.width || token.shape() != Shape{c}) {
    throw ShapeError("densify: shape mismatch");
  }
  Tensor hidden = mask.visibility();
  for (double& v : hidden.storage()) v = 1.0 - v;
  const Var visible = diff::mul(features, mask_to_var(tape, mask));
  const Var fill = diff::mul(diff::reshape(token, Shape{c, 1, 1}),
                             tape.constant(hidden.reshaped(Shape{1, mask.height, mask.width})));
  return diff::add(visible, fill);
}

std::vector<std::int64_t> lift_indices(const geometry::Camera& camera, int height, int width, int stride,
                                       const std::vector<double>& bin_depths, const geometry::GridExtent& extent) {
  const geometry::Rigid ego_from_cam = camera.cam_from_ego.inverse();
  const auto d = static_cast<std::int64_t>(bin_depths.size());
  std::vector<std::int64_t> index(static_cast<std::size_t>(height) * static_cast<std::size_t>(width) *
                                  static_cast<std::size_t>(d));
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double u = (x + 0.5) * stride, v = (y + 0.5) * stride;
      const geometry::Vec3 ray((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
      for (std::int64_t k = 0; k < d; ++k) {
        const geometry::Vec3 p = ego_from_cam * (ray * bin_depths[static_cast<std::size_t>(k)]);
        index[static_cast<std::size_t>((static_cast<std::int64_t>(y) * width + x) * d + k)] = extent.voxel_of(p);
      }
    }
  }
  return index;
}

Var lift_splat(const Var& depth_probs, const Var& context, const geometry::Camera& camera, int stride,
               const std::vector<double>& bin_depths, const geometry::GridExtent& extent) {
  const auto d = depth_probs.dim(0), h = depth_probs.dim(1), w = depth_probs.dim(2);
  const auto c = context.dim(0);
  if (context.dim(1) != h || context.dim(2) != w || d != static_cast<std::int64_t>(bin_depths.size())) {
    throw ShapeError("lift_splat: depth " + shape_string(depth_probs.shape()) + " context " +
                     shape_string(context.shape()));
  }
  const auto p = h * w;
  const auto index = lift_indices(camera, static_cast<int>(h), static_cast<int>(w), stride, bin_depths, extent);
  const Var probs = diff::reshape(diff::transpose(diff::reshape(depth_probs, Shape{d, p})), Shape{p, d, 1});
  const Var ctx = diff::reshape(diff::transpose(diff::reshape(context, Shape{c, p})), Shape{p, 1, c});
  const Var lifted = diff::reshape(diff::mul(probs, ctx), Shape{p * d, c});
  const Var pooled = diff::scatter_add(lifted, index, extent.cells());
  return diff::reshape(diff::transpose(pooled), Shape{c, extent.nz, extent.ny, extent.nx});
}

Var encode_image(diff::Tape& tape, const Tensor& image, const masking::Mask2d& mask, const geometry::Camera& camera,
                 const BoundParams& params, const EncoderConfig& cfg) {
  const auto masked = masking::apply_mask(image, mask);
  const FeatureMap fm = masked_backbone(tape, masked, mask, params, cfg);
  const Var dense = densify(fm.features, fm.mask, params["encoder.mask_token"]);
  const Var logits = diff::conv2d(dense, params["encoder.depth_head.weight"], params["encoder.depth_head.bias"], 1, 0);
  const Var context =
      diff::conv2d(dense, params["encoder.context_head.weight"], params["encoder.context_head.bias"], 1, 0);
  return lift_splat(diff::softmax(logits, 0), context, camera, fm.stride, cfg.bin_depths(), cfg.extent);
}

std::vector<VoxelGrid> encode_clip(diff::Tape& tape, const scene::MultiViewClip& clip,
                                   const std::vector<std::vector<masking::Mask2d>>& masks, const BoundParams& params,
                                   const EncoderConfig& cfg) {
  if (masks.size() != clip.frames.size()) throw std::invalid_argument("encode_clip: one mask list per frame required");
  std::vector<VoxelGrid> out;
  for (std::size_t f = 0; f < clip.frames.size(); ++f) {
    const auto& frame = clip.frames[f];
    if (masks[f].size() != static_cast<std::size_t>(clip.views())) {
      throw std::invalid_argument("encode_clip: one mask per view required");
    }
    Var grid;
    for (int v = 0; v < clip.views(); ++v) {
      const Var part = encode_image(tape, frame.images[static_cast<std::size_t>(v)], masks[f][static_cast<std::size_t>(v)],
                                    clip.cameras[static_cast<std::size_t>(v)], params, cfg);
      grid = grid.valid() ? diff::add(grid, part) : part;
    }
    out.push_back(VoxelGrid{grid, cfg.extent, frame.pose.timestamp});
  }
  return out;
}

}  // namespace mim4d::encoder
