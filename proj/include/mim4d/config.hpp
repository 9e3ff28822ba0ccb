// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mim4d/encoder.hpp"
#include "mim4d/renderer.hpp"
#include "mim4d/scenegen.hpp"
#include "mim4d/temporal.hpp"

namespace mim4d {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Every tunable of a run. Text form is one `section.key=value` per line.
struct Config {
  // scene
  int views = 2;
  int height = 48;
  int width = 64;
  int objects = 4;
  double ego_step = 0.5;
  double yaw_step = 0.0;
  bool moving_objects = false;
  int lidar_samples = 400;
  int clips = 1;
  double frame_dt = 0.5;
  double max_depth = 12.0;
  // masking
  int supervision = 64;
  double tau = 10.8;
  int s_ray = 4;
  int s_fill = 8;
  double ratio = 0.3;
  // encoder
  int channels = 16;
  int backbone_width = 16;
  int nx = 32, ny = 32, nz = 4;
  double x_min = -2.0, x_max = 14.0;
  double y_min = -8.0, y_max = 8.0;
  double z_min = -1.0, z_max = 3.0;
  int depth_bins = 16;
  double depth_min = 0.5;
  double depth_max = 12.0;
  // temporal
  std::string strategy = "both";
  int window = 5;
  int heads = 2;
  int points = 4;
  int query_dim = 16;
  bool warpcat_identity = false;
  // renderer
  int samples = 32;
  double near = 0.5;
  double far = 12.0;
  double lambda_rgb = 10.0;
  double lambda_depth = 10.0;
  double a_init = 10.0;
  int hidden = 32;
  int geo_features = 8;
  bool jitter = true;
  std::string sdf_init = "plane";
  // optim
  double lr = 2e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int steps = 100;
  int batch_clips = 1;
  int checkpoint_every = 0;
  // train
  std::uint64_t seed = 0;
  int threads = 1;
  int ablate_steps = 50;

  /// Throws ConfigError naming the first offending key.
  void validate() const;

  geometry::GridExtent extent() const;
  encoder::EncoderConfig encoder() const;
  temporal::TemporalConfig temporal() const;
  render::RendererConfig renderer() const;
  scene::RenderSettings render_settings() const;

  /// Sets one key from text; unknown keys and out-of-range values throw.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  std::string serialize() const;
  static Config parse(const std::string& text);
  static Config load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// FNV-1a over the serialized form.
  std::uint64_t hash() const;

  friend bool operator==(const Config&, const Config&) = default;
};

}  // namespace mim4d
