// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

// Pre-training pipeline: mask every frame of a window, encode each to a voxel
// grid, drop one, reconstruct it from the others and render the dropped frame's
// supervision rays through the reconstruction.

#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mim4d/config.hpp"
#include "mim4d/params.hpp"
#include "mim4d/scenegen.hpp"

namespace mim4d::train {

/// SplitMix64 finalizer over the pair; used to derive independent seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

std::vector<scene::MultiViewClip> generate_dataset(const Config& cfg);
/// Writes clip_000, clip_001, ... under `dir` plus a copy of the config.
void write_dataset(const std::filesystem::path& dir, const Config& cfg);
std::vector<scene::MultiViewClip> load_dataset(const std::filesystem::path& dir);
std::vector<std::filesystem::path> clip_dirs(const std::filesystem::path& dir);

/// The last `window` frames of a clip.
scene::MultiViewClip window_clip(const scene::MultiViewClip& clip, int window);

/// Checks a clip against the configured resolution, views and window.
void check_clip(const scene::MultiViewClip& clip, const Config& cfg);

ParameterSet init_params(const Config& cfg);

struct Diagnostics {
  double loss = 0.0;
  double rgb_term = 0.0;
  double depth_term = 0.0;
  double weight_sum_mean = 0.0;
  double weight_sum_min = 0.0;
  double weight_sum_max = 0.0;
  double masked_fraction = 0.0;
  double depth_mae = 0.0;
  int drop = 0;
  std::int64_t rays = 0;
};

struct PipelineOutput {
  diff::Var loss;
  diff::Var reconstruction;  // (C, Z, Y, X)
  Diagnostics diagnostics;
};

class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Runs one clip on `params` (already bound to a tape). `seed` fixes masks,
/// supervision pixels, ray jitter and, unless `drop` is given, the dropped frame.
/// A non-finite value raises PipelineError naming the stage. `normal_cache`
/// is passed to the renderer.
PipelineOutput forward_pipeline(const scene::MultiViewClip& clip, const Config& cfg, const BoundParams& params,
                                std::uint64_t seed, std::optional<int> drop = std::nullopt,
                                std::vector<geometry::Vec3>* normal_cache = nullptr);

struct StepMetrics {
  int step = 0;
  double loss = 0.0;
  double rgb_term = 0.0;
  double depth_term = 0.0;
  double grad_norm = 0.0;
  double wall_time = 0.0;
  double depth_mae = 0.0;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Trainer {
 public:
  /// Clips are windowed to cfg.window frames.
  Trainer(Config cfg, const std::vector<scene::MultiViewClip>& clips);

  /// One optimizer step over cfg.batch_clips clips; loss > 1e6 throws DivergenceError.
  StepMetrics step();

  const Config& config() const { return cfg_; }
  const ParameterSet& params() const { return params_; }
  ParameterSet& params() { return params_; }
  const AdamW& optimizer() const { return adam_; }
  int step_count() const { return step_; }

  void save(const std::filesystem::path& path) const;
  /// Restores parameters, optimizer moments, step and RNG; the config hash must match.
  void load(const std::filesystem::path& path);

 private:
  Config cfg_;
  std::vector<scene::MultiViewClip> clips_;
  ParameterSet params_;
  AdamW adam_;
  std::mt19937_64 rng_;
  int step_ = 0;
  std::chrono::steady_clock::time_point start_;
};

/// Config stored in a checkpoint.
Config checkpoint_config(const std::filesystem::path& path);
ParameterSet checkpoint_params(const std::filesystem::path& path);

inline constexpr const char* kMetricsHeader = "step,loss,rgb_term,depth_term,grad_norm,wall_time";
void write_metrics_row(std::ostream& out, const StepMetrics& m);

struct TrainOptions {
  std::filesystem::path out_dir;
  int steps = 0;
  std::optional<std::filesystem::path> resume;
  bool verbose = false;
};

/// Trains for `steps` more steps, appending metrics.csv rows and writing
/// checkpoints (every cfg.checkpoint_every steps and at the end) to out_dir.
std::vector<StepMetrics> train(const Config& cfg, const std::vector<scene::MultiViewClip>& clips,
                               const TrainOptions& options);

struct EvalResult {
  double loss = 0.0;
  double depth_mae = 0.0;
  double weight_sum_mean = 0.0;
};

/// Deterministic loss over every clip and every drop index, without ray jitter.
EvalResult evaluate(const Config& cfg, const std::vector<scene::MultiViewClip>& clips, const ParameterSet& params);

struct AblationRow {
  std::string setting;
  int window = 0;
  std::string strategy;
  int steps = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double eval_loss = 0.0;
  double eval_depth_mae = 0.0;
};

inline constexpr const char* kAblationHeader =
    "setting,window,strategy,steps,initial_loss,final_loss,eval_loss,eval_depth_mae";

/// axis "window": windows 1, 3, 4, 5; axis "strategy": none, warp-cat, short, long, both.
std::vector<AblationRow> ablate(const Config& cfg, const std::vector<scene::MultiViewClip>& clips,
                                const std::string& axis);
void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);

}  // namespace mim4d::train
