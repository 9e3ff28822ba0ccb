// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mim4d/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <thread>

#include "mim4d/blob.hpp"
#include "mim4d/encoder.hpp"
#include "mim4d/masking.hpp"
#include "mim4d/renderer.hpp"
#include "mim4d/temporal.hpp"

namespace mim4d::train {

namespace fs = std::filesystem;
using diff::Var;

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---- data ----------------------------------------------------------------

namespace {

struct GeneratedClip {
  scene::MultiViewClip clip;
  scene::AnalyticScene scene;
};

GeneratedClip generate_one(const Config& cfg, int index) {
  const std::uint64_t seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(index));
  GeneratedClip g;
  g.scene = scene::random_scene(seed, cfg.objects, cfg.moving_objects);
  const auto cameras = scene::default_cameras(cfg.views, cfg.height, cfg.width);
  const auto trajectory = scene::straight_trajectory(cfg.window, cfg.ego_step, cfg.yaw_step);
  auto settings = cfg.render_settings();
  settings.seed = seed;
  g.clip = scene::render_clip(g.scene, cameras, trajectory, settings);
  return g;
}

std::string clip_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "clip_%03d", index);
  return buf;
}

}  // namespace

std::vector<scene::MultiViewClip> generate_dataset(const Config& cfg) {
  cfg.validate();
  std::vector<scene::MultiViewClip> clips;
  for (int c = 0; c < cfg.clips; ++c) clips.push_back(generate_one(cfg, c).clip);
  return clips;
}

void write_dataset(const fs::path& dir, const Config& cfg) {
  cfg.validate();
  fs::create_directories(dir);
  for (int c = 0; c < cfg.clips; ++c) {
    const auto g = generate_one(cfg, c);
    scene::write_clip(dir / clip_name(c), g.clip, &g.scene);
  }
  cfg.save(dir / "config.cfg");
}

std::vector<fs::path> clip_dirs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("dataset directory not found: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.txt")) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  if (fs::exists(dir / "manifest.txt")) out.insert(out.begin(), dir);
  if (out.empty()) throw std::runtime_error("no clips under " + dir.string());
  return out;
}

std::vector<scene::MultiViewClip> load_dataset(const fs::path& dir) {
  std::vector<scene::MultiViewClip> clips;
  for (const auto& p : clip_dirs(dir)) clips.push_back(scene::read_clip(p));
  return clips;
}

scene::MultiViewClip window_clip(const scene::MultiViewClip& clip, int window) {
  if (window < 1 || window > clip.window()) {
    throw std::invalid_argument("clip has " + std::to_string(clip.window()) + " frames, window " +
                                std::to_string(window) + " requested");
  }
  scene::MultiViewClip out = clip;
  out.frames.erase(out.frames.begin(), out.frames.begin() + (clip.window() - window));
  return out;
}

void check_clip(const scene::MultiViewClip& clip, const Config& cfg) {
  if (clip.views() != cfg.views || clip.height != cfg.height || clip.width != cfg.width) {
    throw std::invalid_argument("clip is " + std::to_string(clip.views()) + " views of " + std::to_string(clip.width) +
                                "x" + std::to_string(clip.height) + ", config expects " + std::to_string(cfg.views) +
                                " views of " + std::to_string(cfg.width) + "x" + std::to_string(cfg.height));
  }
  if (clip.window() != cfg.window) {
    throw std::invalid_argument("clip window " + std::to_string(clip.window()) + " differs from temporal.window " +
                                std::to_string(cfg.window));
  }
}

ParameterSet init_params(const Config& cfg) {
  cfg.validate();
  ParameterSet params;
  std::mt19937_64 enc_rng(mix_seed(cfg.seed, 101));
  std::mt19937_64 tmp_rng(mix_seed(cfg.seed, 102));
  std::mt19937_64 ren_rng(mix_seed(cfg.seed, 103));
  encoder::init_encoder_params(params, cfg.encoder(), enc_rng);
  temporal::init_temporal_params(params, cfg.temporal(), tmp_rng);
  render::init_renderer_params(params, cfg.renderer(), cfg.channels, cfg.extent(), ren_rng);
  return params;
}

// ---- pipeline ------------------------------------------------------------

namespace {

template <class F>
auto run_stage(const char* stage, F&& f) {
  try {
    return f();
  } catch (const NonFiniteError& e) {
    throw PipelineError(std::string("non-finite value in ") + stage + ": " + e.what());
  }
}

}  // namespace

PipelineOutput forward_pipeline(const scene::MultiViewClip& clip, const Config& cfg, const BoundParams& params,
                                std::uint64_t seed, std::optional<int> drop,
                                std::vector<geometry::Vec3>* normal_cache) {
  check_clip(clip, cfg);
  auto& tape = params.tape();
  const int frames = clip.window();
  const int views = clip.views();
  std::mt19937_64 rng(seed);
  const int m = drop ? *drop : temporal::choose_drop_index(frames, rng);
  if (m < 0 || m >= frames) throw std::out_of_range("drop index out of range");

  std::vector<std::vector<masking::Mask2d>> masks(static_cast<std::size_t>(frames));
  std::vector<masking::SupervisionSet> supervision;
  double masked = 0.0;
  for (int f = 0; f < frames; ++f) {
    for (int v = 0; v < views; ++v) {
      const auto slot = static_cast<std::uint64_t>(f * views + v);
      auto sup = masking::select_supervision_pixels(clip.frames[static_cast<std::size_t>(f)], v, cfg.tau,
                                                    cfg.supervision, mix_seed(seed, 2 * slot + 1));
      auto mask = masking::build_mask(sup, cfg.height, cfg.width, cfg.s_ray, cfg.s_fill, cfg.ratio,
                                      mix_seed(seed, 2 * slot + 2));
      masked += mask.masked_fraction();
      masks[static_cast<std::size_t>(f)].push_back(std::move(mask));
      if (f == m) supervision.push_back(std::move(sup));
    }
  }

  const auto voxels = run_stage("encoder", [&] { return encoder::encode_clip(tape, clip, masks, params, cfg.encoder()); });
  std::vector<Var> grids;
  std::vector<geometry::EgoPose> poses;
  for (std::size_t f = 0; f < voxels.size(); ++f) {
    grids.push_back(voxels[f].features);
    poses.push_back(clip.frames[f].pose);
  }
  const Var recon = run_stage("decoder", [&] {
    return temporal::reconstruct_dropped(grids, m, poses, params, cfg.temporal());
  });

  const auto rcfg = cfg.renderer();
  std::mt19937_64 jitter(mix_seed(seed, 0x7177e5));
  const auto batch = render::make_ray_batch(supervision, clip.cameras, rcfg, &jitter);
  const auto result = run_stage("renderer", [&] { return render::render_loss(recon, cfg.extent(), batch, params, rcfg, normal_cache); });

  PipelineOutput out;
  out.loss = result.loss;
  out.reconstruction = recon;
  auto& d = out.diagnostics;
  d.loss = result.loss.value().item();
  d.rgb_term = result.rgb_term.value().item();
  d.depth_term = result.depth_term.value().item();
  d.masked_fraction = masked / (frames * views);
  d.drop = m;
  d.rays = batch.ray_count();
  const auto& w = result.accumulated.weights.value();
  const auto& depth = result.accumulated.depth.value();
  const auto k = w.dim(1);
  d.weight_sum_min = std::numeric_limits<double>::infinity();
  d.weight_sum_max = -std::numeric_limits<double>::infinity();
  for (std::int64_t r = 0; r < d.rays; ++r) {
    double s = 0.0;
    for (std::int64_t j = 0; j < k; ++j) s += w[r * k + j];
    d.weight_sum_mean += s;
    d.weight_sum_min = std::min(d.weight_sum_min, s);
    d.weight_sum_max = std::max(d.weight_sum_max, s);
    d.depth_mae += std::abs(depth[r] - batch.target_depth[r]);
  }
  d.weight_sum_mean /= static_cast<double>(d.rays);
  d.depth_mae /= static_cast<double>(d.rays);
  return out;
}

// ---- training ------------------------------------------------------------

Trainer::Trainer(Config cfg, const std::vector<scene::MultiViewClip>& clips)
    : cfg_(std::move(cfg)), start_(std::chrono::steady_clock::now()) {
  cfg_.validate();
  if (clips.empty()) throw std::invalid_argument("trainer needs at least one clip");
  for (const auto& c : clips) {
    clips_.push_back(window_clip(c, cfg_.window));
    check_clip(clips_.back(), cfg_);
  }
  params_ = init_params(cfg_);
  adam_.lr = cfg_.lr;
  adam_.beta1 = cfg_.beta1;
  adam_.beta2 = cfg_.beta2;
  adam_.eps = cfg_.eps;
  adam_.weight_decay = cfg_.weight_decay;
  rng_.seed(mix_seed(cfg_.seed, 104));
}

StepMetrics Trainer::step() {
  const std::uint64_t step_seed = rng_();
  const int batch = cfg_.batch_clips;
  const auto n = static_cast<int>(clips_.size());

  struct ClipResult {
    ParameterSet grads;
    Diagnostics diag;
    std::exception_ptr error;
  };
  std::vector<ClipResult> results(static_cast<std::size_t>(batch));
  auto work = [&](int b) {
    auto& r = results[static_cast<std::size_t>(b)];
    try {
      diff::Tape tape;
      const BoundParams bound(tape, params_);
      const auto& clip = clips_[static_cast<std::size_t>((step_ * batch + b) % n)];
      const auto out = forward_pipeline(clip, cfg_, bound, mix_seed(step_seed, static_cast<std::uint64_t>(b)));
      r.grads = bound.gradients(diff::backward(tape, out.loss));
      r.diag = out.diagnostics;
    } catch (...) {
      r.error = std::current_exception();
    }
  };
  const int workers = std::min(cfg_.threads, batch);
  if (workers <= 1) {
    for (int b = 0; b < batch; ++b) work(b);
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < workers; ++t) {
      pool.emplace_back([&, t] {
        for (int b = t; b < batch; b += workers) work(b);
      });
    }
  }

  StepMetrics metrics;
  ParameterSet total = params_.zeros_like();
  for (const auto& r : results) {
    if (r.error) std::rethrow_exception(r.error);
    total.accumulate(r.grads, 1.0 / batch);
    metrics.loss += r.diag.loss / batch;
    metrics.rgb_term += r.diag.rgb_term / batch;
    metrics.depth_term += r.diag.depth_term / batch;
    metrics.depth_mae += r.diag.depth_mae / batch;
  }
  if (!std::isfinite(metrics.loss) || metrics.loss > 1e6) {
    throw DivergenceError("training diverged at step " + std::to_string(step_ + 1) + ": loss " +
                          std::to_string(metrics.loss));
  }
  metrics.grad_norm = std::sqrt(total.squared_norm());
  adam_.step(params_, total);
  ++step_;
  metrics.step = step_;
  metrics.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  return metrics;
}

namespace {

constexpr const char* kCheckpointFormat = "MV4D-checkpoint";

void put_params(io::Blob& blob, const std::string& prefix, const ParameterSet& p) {
  for (const auto& [name, t] : p.items()) blob.put(prefix + name, t);
}

void get_params(const io::Blob& blob, const std::string& prefix, ParameterSet& into) {
  for (auto& [name, t] : into.items()) {
    if (!blob.has(prefix + name)) throw io::BlobError("checkpoint is missing " + prefix + name);
    Tensor loaded = blob.tensor(prefix + name);
    if (loaded.shape() != t.shape()) throw io::BlobError("checkpoint shape mismatch for " + prefix + name);
    t = std::move(loaded);
  }
}

io::Blob read_checkpoint(const fs::path& path) {
  io::Blob blob = io::Blob::read(path);
  if (!blob.has("format") || blob.string("format") != kCheckpointFormat) {
    throw io::BlobError(path.string() + " is not a checkpoint");
  }
  return blob;
}

}  // namespace

void Trainer::save(const fs::path& path) const {
  io::Blob blob;
  blob.put_string("format", kCheckpointFormat);
  blob.put_string("config", cfg_.serialize());
  blob.put_i64("config_hash", {static_cast<std::int64_t>(cfg_.hash())});
  blob.put_i64("step", {step_});
  blob.put_i64("adam_step", {adam_.step_count});
  std::ostringstream rng_state;
  rng_state << rng_;
  blob.put_string("rng", rng_state.str());
  put_params(blob, "param/", params_);
  if (adam_.m.size() != 0) {
    put_params(blob, "adam_m/", adam_.m);
    put_params(blob, "adam_v/", adam_.v);
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  blob.write(path);
}

void Trainer::load(const fs::path& path) {
  const io::Blob blob = read_checkpoint(path);
  const auto hash = static_cast<std::uint64_t>(blob.i64("config_hash").at(0));
  if (hash != cfg_.hash()) throw io::BlobError("checkpoint " + path.string() + " was written with a different config");
  ParameterSet params = params_;
  get_params(blob, "param/", params);
  AdamW adam = adam_;
  adam.step_count = blob.i64("adam_step").at(0);
  if (adam.step_count > 0) {
    adam.m = params.zeros_like();
    adam.v = params.zeros_like();
    get_params(blob, "adam_m/", adam.m);
    get_params(blob, "adam_v/", adam.v);
  } else {
    adam.m = ParameterSet{};
    adam.v = ParameterSet{};
  }
  std::istringstream rng_state(blob.string("rng"));
  std::mt19937_64 rng;
  rng_state >> rng;
  if (!rng_state) throw io::BlobError("checkpoint has a corrupt rng state");
  params_ = std::move(params);
  adam_ = std::move(adam);
  rng_ = rng;
  step_ = static_cast<int>(blob.i64("step").at(0));
}

Config checkpoint_config(const fs::path& path) { return Config::parse(read_checkpoint(path).string("config")); }

ParameterSet checkpoint_params(const fs::path& path) {
  const io::Blob blob = read_checkpoint(path);
  ParameterSet params;
  const std::string prefix = "param/";
  for (const auto& a : blob.arrays()) {
    if (a.name.rfind(prefix, 0) == 0) params.add(a.name.substr(prefix.size()), blob.tensor(a.name));
  }
  return params;
}

void write_metrics_row(std::ostream& out, const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.3f\n", m.step, m.loss, m.rgb_term, m.depth_term,
                m.grad_norm, m.wall_time);
  out << buf;
}

std::vector<StepMetrics> train(const Config& cfg, const std::vector<scene::MultiViewClip>& clips,
                               const TrainOptions& options) {
  Trainer trainer(cfg, clips);
  if (options.resume) trainer.load(*options.resume);
  fs::create_directories(options.out_dir);
  cfg.save(options.out_dir / "config.cfg");
  const fs::path metrics_path = options.out_dir / "metrics.csv";
  const bool append = options.resume.has_value() && fs::exists(metrics_path);
  std::ofstream metrics(metrics_path, append ? std::ios::binary | std::ios::app : std::ios::binary);
  if (!metrics) throw std::runtime_error("cannot write " + metrics_path.string());
  if (!append) metrics << kMetricsHeader << '\n';

  std::vector<StepMetrics> rows;
  for (int i = 0; i < options.steps; ++i) {
    const auto m = trainer.step();
    write_metrics_row(metrics, m);
    metrics.flush();
    if (!metrics) throw std::runtime_error("failed writing " + metrics_path.string());
    if (options.verbose) {
      std::fprintf(stderr, "step %d loss %.6f rgb %.6f depth %.6f |g| %.4g depth-mae %.3f\n", m.step, m.loss,
                   m.rgb_term, m.depth_term, m.grad_norm, m.depth_mae);
    }
    rows.push_back(m);
    if (cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0) {
      trainer.save(options.out_dir / ("checkpoint_" + std::to_string(m.step) + ".bin"));
    }
  }
  trainer.save(options.out_dir / "checkpoint.bin");
  return rows;
}

EvalResult evaluate(const Config& cfg, const std::vector<scene::MultiViewClip>& clips, const ParameterSet& params) {
  Config eval_cfg = cfg;
  eval_cfg.jitter = false;
  EvalResult r;
  int count = 0;
  for (std::size_t c = 0; c < clips.size(); ++c) {
    const auto clip = window_clip(clips[c], cfg.window);
    for (int m = 0; m < cfg.window; ++m) {
      diff::Tape tape;
      const BoundParams bound(tape, params, false);
      const auto out = forward_pipeline(clip, eval_cfg, bound, mix_seed(cfg.seed ^ 0xe7a1ULL, c), m);
      r.loss += out.diagnostics.loss;
      r.depth_mae += out.diagnostics.depth_mae;
      r.weight_sum_mean += out.diagnostics.weight_sum_mean;
      ++count;
    }
  }
  r.loss /= count;
  r.depth_mae /= count;
  r.weight_sum_mean /= count;
  return r;
}

std::vector<AblationRow> ablate(const Config& cfg, const std::vector<scene::MultiViewClip>& clips,
                                const std::string& axis) {
  std::vector<Config> settings;
  std::vector<std::string> labels;
  if (axis == "window") {
    for (int w : {1, 3, 4, 5}) {
      Config c = cfg;
      c.window = w;
      if (w == 1) c.strategy = "none";
      settings.push_back(c);
      labels.push_back("window=" + std::to_string(w));
    }
  } else if (axis == "strategy") {
    for (const char* s : {"none", "warp-cat", "short", "long", "both"}) {
      Config c = cfg;
      c.strategy = s;
      settings.push_back(c);
      labels.push_back(std::string("strategy=") + s);
    }
  } else {
    throw std::invalid_argument("unknown ablation axis '" + axis + "' (expected window or strategy)");
  }

  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < settings.size(); ++i) {
    const Config& c = settings[i];
    c.validate();
    Trainer trainer(c, clips);
    std::vector<scene::MultiViewClip> windowed;
    for (const auto& clip : clips) windowed.push_back(window_clip(clip, c.window));
    AblationRow row;
    row.setting = labels[i];
    row.window = c.window;
    row.strategy = c.temporal().strategy == temporal::Strategy::kNone ? "none" : c.strategy;
    row.steps = c.ablate_steps;
    row.initial_loss = evaluate(c, windowed, trainer.params()).loss;
    row.final_loss = row.initial_loss;
    for (int s = 0; s < c.ablate_steps; ++s) row.final_loss = trainer.step().loss;
    const auto ev = evaluate(c, windowed, trainer.params());
    row.eval_loss = ev.loss;
    row.eval_depth_mae = ev.depth_mae;
    rows.push_back(row);
  }
  return rows;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << kAblationHeader << '\n';
  for (const auto& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, ",%d,%s,%d,%.17g,%.17g,%.17g,%.17g\n", r.window, r.strategy.c_str(), r.steps,
                  r.initial_loss, r.final_loss, r.eval_loss, r.eval_depth_mae);
    out << r.setting << buf;
  }
}

}  // namespace mim4d::train
