// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: gen | pretrain | gradcheck | render | ablate.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mim4d/config.hpp"
#include "mim4d/gradsuite.hpp"
#include "mim4d/renderer.hpp"
#include "mim4d/scenegen.hpp"
#include "mim4d/trainer.hpp"

namespace fs = std::filesystem;
using namespace mim4d;

namespace {

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<int> steps;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_steps) {
  cmd->add_option("--config", o.config, "config file (section.key=value lines)");
  cmd->add_option("--set", o.overrides, "override one config key, e.g. --set renderer.samples=64");
  cmd->add_option("--seed", o.seed, "overrides train.seed");
  cmd->add_option("--threads", o.threads, "overrides train.threads");
  if (with_steps) cmd->add_option("--steps", o.steps, "overrides the step budget");
}

Config resolve(const CommonOptions& o) {
  Config cfg = o.config.empty() ? Config{} : Config::load(o.config);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) cfg.seed = *o.seed;
  if (o.threads) cfg.threads = *o.threads;
  cfg.validate();
  return cfg;
}

std::vector<scene::MultiViewClip> clips_for(const Config& cfg, const std::string& clip_dir) {
  return clip_dir.empty() ? train::generate_dataset(cfg) : train::load_dataset(clip_dir);
}

int cmd_gradcheck(bool all, int instances) {
  if (instances < 1) throw std::invalid_argument("--instances must be positive");
  std::vector<gradsuite::Outcome> rows;
  for (int i = 0; i < instances; ++i) {
    const auto outcomes = gradsuite::run(gradsuite::op_cases(static_cast<std::uint64_t>(i)));
    if (rows.empty()) {
      rows = outcomes;
      continue;
    }
    for (std::size_t k = 0; k < rows.size(); ++k) {
      auto& acc = rows[k].result;
      const auto& r = outcomes[k].result;
      acc.checked += r.checked;
      acc.kinks += r.kinks;
      rows[k].seconds += outcomes[k].seconds;
      if (r.max_rel_error > acc.max_rel_error) {
        acc.max_rel_error = r.max_rel_error;
        acc.worst_input = r.worst_input;
        acc.worst_element = r.worst_element;
        acc.worst_analytic = r.worst_analytic;
        acc.worst_numeric = r.worst_numeric;
      }
    }
  }
  if (all) {
    const auto comp = gradsuite::run(gradsuite::composition_cases());
    rows.insert(rows.end(), comp.begin(), comp.end());
  }
  bool ok = true;
  std::printf("%-42s %-12s %8s %6s %14s %10s %8s\n", "case", "kind", "checked", "kinks", "max_rel_error", "tolerance",
              "status");
  for (const auto& o : rows) {
    ok = ok && o.passed();
    std::printf("%-42s %-12s %8lld %6lld %14.3e %10.0e %8s\n", o.name.c_str(), o.composition ? "composition" : "op",
                static_cast<long long>(o.result.checked), static_cast<long long>(o.result.kinks),
                o.result.max_rel_error, o.tolerance, o.passed() ? "pass" : "FAIL");
    if (!o.passed()) {
      std::printf("  worst: input %lld element %lld analytic %.9g numeric %.9g\n",
                  static_cast<long long>(o.result.worst_input), static_cast<long long>(o.result.worst_element),
                  o.result.worst_analytic, o.result.worst_numeric);
    }
  }
  return ok ? 0 : 1;
}

void write_depth_ppm(const fs::path& path, const Tensor& depth, double far) {
  Tensor img(Shape{depth.dim(0), depth.dim(1), 3});
  for (std::int64_t i = 0; i < depth.numel(); ++i) {
    const double v = std::clamp(depth[i] / far, 0.0, 1.0);
    for (int k = 0; k < 3; ++k) img[i * 3 + k] = v;
  }
  scene::write_ppm(path, img);
}

int cmd_render(const std::string& checkpoint, const std::string& clip_dir, const std::string& out_dir,
               std::optional<int> drop, std::uint64_t seed) {
  const Config cfg = train::checkpoint_config(checkpoint);
  const ParameterSet params = train::checkpoint_params(checkpoint);
  const auto clip = train::window_clip(scene::read_clip(clip_dir), cfg.window);
  const int m = drop.value_or(cfg.window - 1);
  Tensor grid;
  {
    diff::Tape tape;
    const BoundParams bound(tape, params, false);
    Config eval_cfg = cfg;
    eval_cfg.jitter = false;
    grid = train::forward_pipeline(clip, eval_cfg, bound, seed, m).reconstruction.value();
  }
  fs::create_directories(out_dir);
  const auto& frame = clip.frames[static_cast<std::size_t>(m)];
  std::ofstream csv(fs::path(out_dir) / "rays.csv", std::ios::binary);
  csv << "view,col,row,pred_r,pred_g,pred_b,pred_depth,r,g,b,depth\n";
  for (int v = 0; v < clip.views(); ++v) {
    const auto view = render::render_view(grid, cfg.extent(), clip.cameras[static_cast<std::size_t>(v)], params,
                                          cfg.renderer());
    const std::string stem = "view" + std::to_string(v);
    scene::write_ppm(fs::path(out_dir) / (stem + "_color.ppm"), view.color);
    write_depth_ppm(fs::path(out_dir) / (stem + "_depth.ppm"), view.depth, cfg.far);
    scene::write_ppm(fs::path(out_dir) / (stem + "_target.ppm"), frame.images[static_cast<std::size_t>(v)]);
    const auto& image = frame.images[static_cast<std::size_t>(v)];
    for (const auto& s : frame.depths[static_cast<std::size_t>(v)]) {
      const std::int64_t flat = static_cast<std::int64_t>(s.row) * clip.width + s.col;
      char buf[256];
      std::snprintf(buf, sizeof buf, "%d,%d,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", v, s.col, s.row,
                    view.color[flat * 3], view.color[flat * 3 + 1], view.color[flat * 3 + 2], view.depth[flat],
                    image[flat * 3], image[flat * 3 + 1], image[flat * 3 + 2], s.depth);
      csv << buf;
    }
  }
  if (!csv) throw std::runtime_error("failed writing rays.csv");
  std::printf("rendered %d views of frame %d to %s\n", clip.views(), m, out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked multi-frame voxel pre-training on synthetic driving clips"};
  app.require_subcommand(1);

  CommonOptions gen_opts;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen", "render synthetic clips into a dataset directory");
  add_common(gen, gen_opts, false);
  gen->add_option("--out", gen_out, "dataset directory")->required();

  CommonOptions pre_opts;
  std::string pre_out, pre_clip, pre_ckpt;
  bool pre_verbose = false;
  auto* pre = app.add_subcommand(
      "pretrain", "train on a dataset; writes metrics.csv (" + std::string(train::kMetricsHeader) +
                      ") and checkpoint.bin to --out");
  add_common(pre, pre_opts, true);
  pre->add_option("--clip", pre_clip, "dataset or clip directory (default: generate from the config)");
  pre->add_option("--out", pre_out, "run directory")->required();
  pre->add_option("--checkpoint", pre_ckpt, "resume from this checkpoint (its stored config is used)");
  pre->add_flag("--verbose", pre_verbose, "print one line per step");

  bool grad_all = false;
  int grad_instances = 10;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable operation");
  grad->add_flag("--all", grad_all, "also check the composed encoder, attention, renderer and pipeline paths");
  grad->add_option("--instances", grad_instances, "random input draws per operation");

  std::string ren_ckpt, ren_clip, ren_out;
  std::optional<int> ren_drop;
  std::uint64_t ren_seed = 0;
  auto* ren = app.add_subcommand("render", "render the reconstructed dropped frame of a clip");
  ren->add_option("--checkpoint", ren_ckpt, "trained checkpoint")->required();
  ren->add_option("--clip", ren_clip, "clip directory")->required();
  ren->add_option("--out", ren_out, "output directory for PPM images and rays.csv")->required();
  ren->add_option("--drop", ren_drop, "frame to drop and reconstruct (default: last)");
  ren->add_option("--seed", ren_seed, "mask seed");

  CommonOptions abl_opts;
  std::string abl_out, abl_clip, abl_axis = "both";
  auto* abl = app.add_subcommand("ablate", "window-length and temporal-strategy comparison (" +
                                               std::string(train::kAblationHeader) + ")");
  add_common(abl, abl_opts, true);
  abl->add_option("--clip", abl_clip, "dataset directory (default: generate from the config)");
  abl->add_option("--out", abl_out, "output directory")->required();
  abl->add_option("--axis", abl_axis, "window, strategy or both")->check(CLI::IsMember({"window", "strategy", "both"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const Config cfg = resolve(gen_opts);
      train::write_dataset(gen_out, cfg);
      std::printf("wrote %d clips to %s\n", cfg.clips, gen_out.c_str());
      return 0;
    }
    if (*pre) {
      const Config cfg = pre_ckpt.empty() ? resolve(pre_opts) : train::checkpoint_config(pre_ckpt);
      const auto clips = clips_for(cfg, pre_clip);
      train::TrainOptions opts;
      opts.out_dir = pre_out;
      opts.steps = pre_opts.steps.value_or(cfg.steps);
      opts.verbose = pre_verbose;
      if (!pre_ckpt.empty()) opts.resume = fs::path(pre_ckpt);
      const auto rows = train::train(cfg, clips, opts);
      if (!rows.empty()) {
        std::printf("step %d loss %.6f (first %.6f)\n", rows.back().step, rows.back().loss, rows.front().loss);
      }
      return 0;
    }
    if (*grad) return cmd_gradcheck(grad_all, grad_instances);
    if (*ren) return cmd_render(ren_ckpt, ren_clip, ren_out, ren_drop, ren_seed);
    if (*abl) {
      Config cfg = resolve(abl_opts);
      if (abl_opts.steps) cfg.ablate_steps = *abl_opts.steps;
      const auto clips = clips_for(cfg, abl_clip);
      fs::create_directories(abl_out);
      for (const std::string axis : {"window", "strategy"}) {
        if (abl_axis != "both" && abl_axis != axis) continue;
        const auto rows = train::ablate(cfg, clips, axis);
        const fs::path path = fs::path(abl_out) / ("ablation_" + axis + ".csv");
        std::ofstream out(path, std::ios::binary);
        train::write_ablation_csv(out, rows);
        if (!out) throw std::runtime_error("failed writing " + path.string());
        train::write_ablation_csv(std::cout, rows);
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
