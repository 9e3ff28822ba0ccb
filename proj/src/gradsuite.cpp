// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mim4d/gradsuite.hpp"

#include <chrono>
#include <map>
#include <random>

#include "mim4d/config.hpp"
#include "mim4d/renderer.hpp"
#include "mim4d/temporal.hpp"
#include "mim4d/trainer.hpp"

namespace mim4d::gradsuite {

using diff::Tape;
using diff::Var;

namespace {

using Inputs = std::span<const Var>;

Tensor rnd(const Shape& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  return diff::random_tensor(s, rng, lo, hi);
}

Case op(std::string name, diff::OpInstance fn, std::vector<Tensor> inputs) {
  Case c;
  c.name = std::move(name);
  c.run = [fn = std::move(fn), inputs = std::move(inputs)] { return diff::gradcheck(fn, inputs); };
  return c;
}

Config tiny_config(int window, const std::string& strategy) {
  Config c;
  c.views = 1;
  c.height = 16;
  c.width = 16;
  c.objects = 2;
  c.lidar_samples = 60;
  c.supervision = 2;
  c.s_ray = 2;
  c.s_fill = 4;
  c.channels = 2;
  c.backbone_width = 4;
  c.nx = 4;
  c.ny = 4;
  c.nz = 2;
  c.x_min = 0.0;
  c.x_max = 10.0;
  c.y_min = -5.0;
  c.y_max = 5.0;
  c.z_min = -1.0;
  c.z_max = 2.0;
  c.depth_bins = 4;
  c.depth_min = 1.0;
  c.depth_max = 10.0;
  c.window = window;
  c.strategy = strategy;
  c.heads = 2;
  c.points = 2;
  c.query_dim = 4;
  c.samples = 6;
  c.near = 1.0;
  c.far = 10.0;
  c.hidden = 4;
  c.geo_features = 2;
  c.seed = 11;
  c.validate();
  return c;
}

Case pipeline_case(std::string name, const Config& cfg, int drop) {
  Case c;
  c.name = std::move(name);
  c.composition = true;
  c.tolerance = 1e-3;
  c.run = [cfg, drop] {
    const auto clip = train::generate_dataset(cfg).at(0);
    ParameterSet params = train::init_params(cfg);
    std::vector<std::string> names;
    std::vector<Tensor> inputs;
    std::mt19937_64 nudge(55);
    for (const auto& [n, t] : params.items()) {
      names.push_back(n);
      Tensor moved = t;
      moved += diff::random_tensor(t.shape(), nudge, -0.02, 0.02);
      inputs.push_back(std::move(moved));
    }
    auto normals = std::make_shared<std::vector<geometry::Vec3>>();
    auto fn = [cfg, clip, names, drop, normals](Tape& tape, Inputs in) {
      std::map<std::string, Var> vars;
      for (std::size_t i = 0; i < names.size(); ++i) vars.emplace(names[i], in[i]);
      const BoundParams bound(tape, std::move(vars));
      return train::forward_pipeline(clip, cfg, bound, 5, drop, normals.get()).loss;
    };
    return diff::gradcheck(fn, inputs);
  };
  return c;
}

}  // namespace

std::vector<Case> op_cases(std::uint64_t instance) {
  auto r = [instance](const Shape& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    return rnd(s, seed + 1000 * instance, lo, hi);
  };
  std::vector<Case> cases;
  cases.push_back(op("add", [](Tape&, Inputs v) { return diff::add(v[0], v[1]); }, {r({3, 4}, 1), r({3, 4}, 2)}));
  cases.push_back(op("add (broadcast)", [](Tape&, Inputs v) { return diff::add(v[0], v[1]); },
                     {r({2, 3, 4}, 3), r({3, 1}, 4)}));
  cases.push_back(op("sub", [](Tape&, Inputs v) { return diff::sub(v[0], v[1]); }, {r({3, 4}, 5), r({4}, 6)}));
  cases.push_back(op("mul", [](Tape&, Inputs v) { return diff::mul(v[0], v[1]); }, {r({3, 4}, 7), r({3, 1}, 8)}));
  cases.push_back(
      op("div", [](Tape&, Inputs v) { return diff::div(v[0], v[1]); }, {r({3, 4}, 9), r({3, 4}, 10, 0.5, 1.5)}));
  cases.push_back(op("add_scalar", [](Tape&, Inputs v) { return diff::add_scalar(v[0], 0.7); }, {r({5}, 11)}));
  cases.push_back(op("mul_scalar", [](Tape&, Inputs v) { return diff::mul_scalar(v[0], -1.3); }, {r({5}, 12)}));
  cases.push_back(op("relu", [](Tape&, Inputs v) { return diff::relu(v[0]); }, {r({4, 5}, 13)}));
  cases.push_back(op("sigmoid", [](Tape&, Inputs v) { return diff::sigmoid(v[0]); }, {r({4, 5}, 14, -4.0, 4.0)}));
  cases.push_back(op("exp", [](Tape&, Inputs v) { return diff::exp(v[0]); }, {r({4, 5}, 15)}));
  cases.push_back(op("abs", [](Tape&, Inputs v) { return diff::abs(v[0]); }, {r({4, 5}, 16)}));
  cases.push_back(op("clamp_min", [](Tape&, Inputs v) { return diff::clamp_min(v[0], 0.1); }, {r({4, 5}, 17)}));
  cases.push_back(op("matmul", [](Tape&, Inputs v) { return diff::matmul(v[0], v[1]); }, {r({3, 4}, 18), r({4, 2}, 19)}));
  cases.push_back(op("transpose", [](Tape&, Inputs v) { return diff::transpose(v[0]); }, {r({3, 4}, 20)}));
  cases.push_back(op("conv2d (stride 1)", [](Tape&, Inputs v) { return diff::conv2d(v[0], v[1], v[2], 1, 1); },
                     {r({2, 5, 6}, 21), r({3, 2, 3, 3}, 22), r({3}, 23)}));
  cases.push_back(op("conv2d (stride 2)", [](Tape&, Inputs v) { return diff::conv2d(v[0], v[1], v[2], 2, 1); },
                     {r({2, 6, 6}, 24), r({3, 2, 3, 3}, 25), r({3}, 26)}));
  cases.push_back(op("conv2d (1x1)", [](Tape&, Inputs v) { return diff::conv2d(v[0], v[1], v[2], 1, 0); },
                     {r({3, 4, 4}, 27), r({2, 3, 1, 1}, 28), r({2}, 29)}));
  cases.push_back(op("softmax (axis 0)", [](Tape&, Inputs v) { return diff::softmax(v[0], 0); }, {r({4, 3}, 30, -3, 3)}));
  cases.push_back(op("softmax (axis 1)", [](Tape&, Inputs v) { return diff::softmax(v[0], 1); }, {r({4, 3}, 31, -3, 3)}));
  cases.push_back(op("concat", [](Tape&, Inputs v) { return diff::concat(v, 1); }, {r({2, 3}, 32), r({2, 1}, 33)}));
  cases.push_back(op("reshape", [](Tape&, Inputs v) { return diff::reshape(v[0], Shape{6, 2}); }, {r({3, 4}, 34)}));
  cases.push_back(op("slice", [](Tape&, Inputs v) { return diff::slice(v[0], 1, 1, 3); }, {r({3, 4}, 35)}));
  cases.push_back(op("reduce_sum", [](Tape&, Inputs v) { return diff::reduce_sum(v[0]); }, {r({3, 4}, 36)}));
  cases.push_back(op("reduce_sum (axis)", [](Tape&, Inputs v) { return diff::reduce_sum(v[0], 1); }, {r({3, 4, 2}, 37)}));
  cases.push_back(op("reduce_mean", [](Tape&, Inputs v) { return diff::reduce_mean(v[0]); }, {r({3, 4}, 38)}));
  cases.push_back(op("reduce_mean (axis)", [](Tape&, Inputs v) { return diff::reduce_mean(v[0], 0); }, {r({3, 4}, 39)}));
  cases.push_back(op("exclusive_cumprod", [](Tape&, Inputs v) { return diff::exclusive_cumprod(v[0], 1); },
                     {r({3, 5}, 40, 0.1, 1.0)}));
  cases.push_back(op("bilinear_sample_2d", [](Tape&, Inputs v) { return diff::bilinear_sample_2d(v[0], v[1]); },
                     {r({2, 4, 5}, 41), r({6, 2}, 42, -0.8, 3.8)}));
  cases.push_back(op("trilinear_sample_3d", [](Tape&, Inputs v) { return diff::trilinear_sample_3d(v[0], v[1]); },
                     {r({2, 3, 4, 5}, 43), r({6, 3}, 44, -0.8, 2.8)}));
  cases.push_back(op(
      "scatter_add",
      [](Tape&, Inputs v) {
        static const std::vector<std::int64_t> index = {2, 0, -1, 2, 4, 1};
        return diff::scatter_add(v[0], index, 5);
      },
      {r({6, 3}, 45)}));
  return cases;
}

std::vector<Case> composition_cases() {
  std::vector<Case> cases;
  cases.push_back(pipeline_case("encoder -> loss (strategy none)", tiny_config(1, "none"), 0));

  Case attn;
  attn.name = "deform_attn";
  attn.composition = true;
  attn.tolerance = 1e-3;
  attn.run = [] {
    const int heads = 2, points = 2, slots = 2;
    ParameterSet p;
    std::mt19937_64 rng(46);
    temporal::init_deform_params(p, "attn", 4, 4, 4, heads, points, slots, rng);
    p.at("attn.offset_w") = rnd(p.at("attn.offset_w").shape(), 47, -0.3, 0.3);
    std::vector<std::string> names;
    std::vector<Tensor> inputs = {rnd({4, 3, 3}, 48), rnd({4, 3, 3}, 49), rnd({4, 3, 3}, 50)};
    for (const auto& [n, t] : p.items()) {
      names.push_back(n);
      inputs.push_back(t);
    }
    const std::vector<Tensor> refs = {rnd({9, 2}, 51, 0.1, 1.9), rnd({9, 2}, 52, 0.1, 1.9)};
    auto fn = [names, refs](Tape& tape, Inputs in) {
      std::map<std::string, Var> vars;
      for (std::size_t i = 0; i < names.size(); ++i) vars.emplace(names[i], in[i + 3]);
      const BoundParams bound(tape, std::move(vars));
      const auto w = temporal::bind_deform_weights(bound, "attn", 2, 2, 2);
      return temporal::deform_attn(in[0], refs, {in[1], in[2]}, {0, 1}, w);
    };
    return diff::gradcheck(fn, inputs);
  };
  cases.push_back(attn);

  Case render;
  render.name = "render_loss (2 rays, K=6)";
  render.composition = true;
  render.tolerance = 1e-3;
  render.run = [] {
    geometry::GridExtent extent;
    extent.x_min = 0.0;
    extent.x_max = 8.0;
    extent.y_min = -4.0;
    extent.y_max = 4.0;
    extent.z_min = -1.0;
    extent.z_max = 2.0;
    extent.nx = 4;
    extent.ny = 4;
    extent.nz = 2;
    render::RendererConfig rcfg;
    rcfg.samples = 6;
    rcfg.near = 1.0;
    rcfg.far = 8.0;
    rcfg.hidden = 4;
    rcfg.geo_features = 2;
    rcfg.jitter = false;
    rcfg.a_init = 2.0;
    ParameterSet p;
    std::mt19937_64 rng(53);
    render::init_renderer_params(p, rcfg, 3, extent, rng);
    auto cams = scene::default_cameras(1, 16, 16);
    masking::SupervisionSet sup(2);
    sup[0] = {5, 9, geometry::Vec3(0.2, 0.4, 0.6), 4.0};
    sup[1] = {11, 12, geometry::Vec3(0.7, 0.3, 0.1), 2.5};
    const auto batch = render::make_ray_batch({sup}, cams, rcfg, nullptr);
    std::vector<std::string> names;
    std::vector<Tensor> inputs = {rnd({3, 2, 4, 4}, 54)};
    for (const auto& [n, t] : p.items()) {
      names.push_back(n);
      inputs.push_back(t);
    }
    auto normals = std::make_shared<std::vector<geometry::Vec3>>();
    auto fn = [names, batch, extent, rcfg, normals](Tape& tape, Inputs in) {
      std::map<std::string, Var> vars;
      for (std::size_t i = 0; i < names.size(); ++i) vars.emplace(names[i], in[i + 1]);
      const BoundParams bound(tape, std::move(vars));
      return render::render_loss(in[0], extent, batch, bound, rcfg, normals.get()).loss;
    };
    return diff::gradcheck(fn, inputs);
  };
  cases.push_back(render);

  cases.push_back(pipeline_case("full pipeline (strategy both, 2 frames)", tiny_config(2, "both"), 1));
  return cases;
}

std::vector<Outcome> run(const std::vector<Case>& cases) {
  std::vector<Outcome> out;
  for (const auto& c : cases) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    o.name = c.name;
    o.composition = c.composition;
    o.tolerance = c.tolerance;
    o.result = c.run();
    o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(o);
  }
  return out;
}

}  // namespace mim4d::gradsuite
