// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "mim4d/gradsuite.hpp"
#include "mim4d/temporal.hpp"

namespace mim4d::temporal {
namespace {

using diff::Tape;
using diff::Var;
using geometry::EgoPose;

Tensor identity_matrix(std::int64_t n) {
  Tensor t(Shape{n, n}, 0.0);
  for (std::int64_t i = 0; i < n; ++i) t[i * n + i] = 1.0;
  return t;
}

/// Identity value and output projections, zero offsets, given logit weights.
ParameterSet plain_attention(int qd, int cv, int heads, int points, int slots, double logit_scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterSet p;
  const int n = heads * slots * points;
  p.add("a.offset_w", Tensor(Shape{qd, n * 2}, 0.0));
  p.add("a.offset_b", Tensor(Shape{n * 2}, 0.0));
  p.add("a.weight_w", diff::random_tensor(Shape{qd, n}, rng, -logit_scale, logit_scale));
  p.add("a.weight_b", diff::random_tensor(Shape{n}, rng, -logit_scale, logit_scale));
  p.add("a.value_w", identity_matrix(cv));
  p.add("a.value_b", Tensor(Shape{cv}, 0.0));
  p.add("a.out_w", identity_matrix(cv));
  p.add("a.out_b", Tensor(Shape{cv}, 0.0));
  return p;
}

Tensor centers(int h, int w) {
  Tensor t(Shape{static_cast<std::int64_t>(h) * w, 2});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      t[(y * w + x) * 2] = x;
      t[(y * w + x) * 2 + 1] = y;
    }
  return t;
}

TEST(HeightChannel, LayoutShapeAndRoundtrip) {
  std::mt19937_64 rng(1);
  Tape tape;
  const Var v = tape.constant(diff::random_tensor({2, 3, 4, 5}, rng));
  const Var b = height_to_channel(v);
  EXPECT_EQ(b.shape(), (Shape{6, 4, 5}));
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 5; ++x) EXPECT_EQ(b.value()[(5 * 4 + y) * 5 + x], v.value()[((1 * 3 + 2) * 4 + y) * 5 + x]);
  EXPECT_EQ(channel_to_height(b, 3).value(), v.value());
  EXPECT_EQ(height_to_channel(channel_to_height(b, 3)).value(), b.value());
  EXPECT_THROW(channel_to_height(b, 4), ShapeError);
}

TEST(DeformAttn, ConstantSourcesGiveTheConstant) {
  const int h = 4, w = 5, cv = 4;
  const auto params = plain_attention(3, cv, 2, 3, 2, 1.0, 2);
  Tape tape;
  const BoundParams bound(tape, params, false);
  const auto weights = bind_deform_weights(bound, "a", 2, 3, 2);
  std::mt19937_64 rng(3);
  const Var query = tape.constant(diff::random_tensor({3, h, w}, rng));
  const Var src = tape.constant(Tensor(Shape{cv, h, w}, 2.5));
  const Var out = deform_attn(query, {centers(h, w), centers(h, w)}, {src, src}, {0, 1}, weights);
  EXPECT_EQ(out.shape(), (Shape{cv, h, w}));
  for (double v : out.value().storage()) EXPECT_NEAR(v, 2.5, 1e-12);
}

TEST(DeformAttn, ConstantSourcesIgnoreInBoundsOffsets) {
  const int h = 9, w = 9, cv = 2;
  auto params = plain_attention(3, cv, 2, 2, 1, 3.0, 4);
  std::mt19937_64 rng(5);
  params.at("a.offset_w") = diff::random_tensor(Shape{3, 8}, rng, -0.3, 0.3);
  params.at("a.offset_b") = diff::random_tensor(Shape{8}, rng, -1.0, 1.0);
  Tape tape;
  const BoundParams bound(tape, params, false);
  const Var query = tape.constant(diff::random_tensor({3, h, w}, rng, -1.0, 1.0));
  const Var out = deform_attn(query, {centers(h, w)}, {tape.constant(Tensor(Shape{cv, h, w}, -1.25))}, {0},
                              bind_deform_weights(bound, "a", 2, 2, 1));
  // Offsets stay within 2 cells, so the interior 5x5 never samples outside.
  for (int c = 0; c < cv; ++c)
    for (int y = 2; y < 7; ++y)
      for (int x = 2; x < 7; ++x) EXPECT_NEAR(out.value()[(c * h + y) * w + x], -1.25, 1e-12);
}

TEST(DeformAttn, UniformWeightsAverageTwoSources) {
  const int h = 3, w = 3;
  const auto params = plain_attention(2, 1, 1, 1, 2, 0.0, 6);
  Tape tape;
  const BoundParams bound(tape, params, false);
  const Var query = tape.constant(Tensor(Shape{2, h, w}, 0.3));
  const Var a = tape.constant(Tensor(Shape{1, h, w}, 1.0));
  const Var b = tape.constant(Tensor(Shape{1, h, w}, 4.0));
  const Var out = deform_attn(query, {centers(h, w), centers(h, w)}, {a, b}, {0, 1}, bind_deform_weights(bound, "a", 1, 1, 2));
  for (double v : out.value().storage()) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(DeformAttn, AttentionWeightsSumToOnePerHead) {
  const auto params = plain_attention(4, 4, 2, 3, 4, 5.0, 7);
  Tape tape;
  const BoundParams bound(tape, params, false);
  std::mt19937_64 rng(8);
  const Var rows = tape.constant(diff::random_tensor({10, 4}, rng, -3.0, 3.0));
  const auto weights = bind_deform_weights(bound, "a", 2, 3, 4);
  for (const std::vector<int>& slots : {std::vector<int>{0, 1, 2, 3}, std::vector<int>{1, 3}}) {
    for (int head = 0; head < 2; ++head) {
      const Var a = attention_weights(rows, slots, weights, head);
      ASSERT_EQ(a.dim(1), static_cast<std::int64_t>(slots.size()) * 3);
      for (std::int64_t r = 0; r < 10; ++r) {
        double sum = 0.0;
        for (std::int64_t c = 0; c < a.dim(1); ++c) sum += a.value()[r * a.dim(1) + c];
        EXPECT_NEAR(sum, 1.0, 1e-6);
      }
    }
  }
}

TEST(DeformAttn, OutsideSamplesContributeNothing) {
  const int h = 3, w = 3;
  const auto params = plain_attention(2, 2, 1, 2, 1, 1.0, 9);
  Tape tape;
  const BoundParams bound(tape, params, false);
  Tensor far = centers(h, w);
  for (double& v : far.storage()) v += 50.0;
  const Var src = tape.param(Tensor(Shape{2, h, w}, 3.0));
  const Var out = deform_attn(tape.constant(Tensor(Shape{2, h, w}, 0.1)), {far}, {src}, {0},
                              bind_deform_weights(bound, "a", 1, 2, 1));
  for (double v : out.value().storage()) EXPECT_EQ(v, 0.0);
  const auto g = backward(tape, diff::reduce_sum(out));
  for (const Tensor gv = g[src]; double v : gv.storage()) EXPECT_EQ(v, 0.0);
}

TEST(DeformAttn, EmptySourcesThrow) {
  const auto params = plain_attention(2, 2, 1, 1, 1, 1.0, 10);
  Tape tape;
  const BoundParams bound(tape, params, false);
  EXPECT_THROW(deform_attn(tape.constant(Tensor(Shape{2, 2, 2})), {}, {}, {}, bind_deform_weights(bound, "a", 1, 1, 1)),
               std::invalid_argument);
}

TEST(DeformAttn, GradientsMatchFiniteDifferences) {
  for (const auto& c : gradsuite::composition_cases()) {
    if (c.name != "deform_attn") continue;
    const auto out = gradsuite::run({c});
    EXPECT_LT(out[0].result.max_rel_error, 1e-3);
    EXPECT_GT(out[0].result.checked, 0);
  }
}

TemporalConfig small_config(Strategy s, int window) {
  TemporalConfig cfg;
  cfg.strategy = s;
  cfg.window = window;
  cfg.channels = 2;
  cfg.heads = 2;
  cfg.points = 2;
  cfg.query_dim = 4;
  cfg.extent.x_min = 0.0;
  cfg.extent.x_max = 4.0;
  cfg.extent.y_min = -2.0;
  cfg.extent.y_max = 2.0;
  cfg.extent.nx = cfg.extent.ny = 4;
  cfg.extent.nz = 2;
  return cfg;
}

std::vector<EgoPose> poses(int n, double step) {
  std::vector<EgoPose> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)].world_from_ego.translation() = geometry::Vec3(step * i, 0, 0);
  return out;
}

TEST(Reconstruct, NoneIsABypass) {
  auto cfg = small_config(Strategy::kNone, 3);
  ParameterSet params;
  std::mt19937_64 rng(11);
  init_temporal_params(params, cfg, rng);
  EXPECT_EQ(params.size(), 0u);
  Tape tape;
  const BoundParams bound(tape, params);
  std::vector<Var> voxels;
  for (int i = 0; i < 3; ++i) voxels.push_back(tape.constant(diff::random_tensor({2, 2, 4, 4}, rng)));
  EXPECT_EQ(reconstruct_dropped(voxels, 1, poses(3, 0.5), bound, cfg).value(), voxels[1].value());
}

TEST(Reconstruct, IdentityWarpCatOnStaticSequence) {
  auto cfg = small_config(Strategy::kWarpCat, 4);
  cfg.warpcat_identity_init = true;
  ParameterSet params;
  std::mt19937_64 rng(12);
  init_temporal_params(params, cfg, rng);
  Tape tape;
  const BoundParams bound(tape, params);
  const Tensor frame = diff::random_tensor({2, 2, 4, 4}, rng, 0.1, 1.0);
  const std::vector<Var> voxels(4, tape.constant(frame));
  for (int drop = 0; drop < 4; ++drop) {
    const Var out = reconstruct_dropped(voxels, drop, poses(4, 0.0), bound, cfg);
    for (std::int64_t i = 0; i < frame.numel(); ++i) EXPECT_NEAR(out.value()[i], frame[i], 1e-12);
  }
}

TEST(Reconstruct, OutputShapeForEveryStrategy) {
  for (Strategy s : {Strategy::kNone, Strategy::kWarpCat, Strategy::kShort, Strategy::kLong, Strategy::kBoth}) {
    const auto cfg = small_config(s, 5);
    ParameterSet params;
    std::mt19937_64 rng(13);
    init_temporal_params(params, cfg, rng);
    Tape tape;
    const BoundParams bound(tape, params);
    std::vector<Var> voxels;
    for (int i = 0; i < 5; ++i) voxels.push_back(tape.constant(diff::random_tensor({2, 2, 4, 4}, rng)));
    for (int drop : {0, 2, 4}) {
      EXPECT_EQ(reconstruct_dropped(voxels, drop, poses(5, 0.5), bound, cfg).shape(), (Shape{2, 2, 4, 4}))
          << to_string(s) << " drop " << drop;
    }
    EXPECT_THROW(reconstruct_dropped(voxels, 5, poses(5, 0.5), bound, cfg), std::out_of_range);
  }
}

TEST(Reconstruct, DroppedFrameIsNotRead) {
  for (Strategy s : {Strategy::kWarpCat, Strategy::kShort, Strategy::kLong, Strategy::kBoth}) {
    const auto cfg = small_config(s, 3);
    ParameterSet params;
    std::mt19937_64 rng(14);
    init_temporal_params(params, cfg, rng);
    Tape tape;
    const BoundParams bound(tape, params);
    std::vector<Var> voxels;
    for (int i = 0; i < 3; ++i) voxels.push_back(tape.param(diff::random_tensor({2, 2, 4, 4}, rng)));
    const auto g = backward(tape, diff::reduce_sum(reconstruct_dropped(voxels, 1, poses(3, 0.5), bound, cfg)));
    for (const Tensor gv = g[voxels[1]]; double v : gv.storage()) EXPECT_EQ(v, 0.0) << to_string(s);
    double other = 0.0;
    for (const Tensor gv = g[voxels[0]]; double v : gv.storage()) other += std::fabs(v);
    EXPECT_GT(other, 0.0) << to_string(s);
  }
}

TEST(Reconstruct, StrategyNeedsTwoFrames) {
  EXPECT_THROW(small_config(Strategy::kBoth, 1).validate(), std::invalid_argument);
  EXPECT_NO_THROW(small_config(Strategy::kNone, 1).validate());
  EXPECT_THROW(parse_strategy("fancy"), std::invalid_argument);
  EXPECT_EQ(parse_strategy("warp-cat"), Strategy::kWarpCat);
}

TEST(Reconstruct, BothBranchesGradcheckOnTwoFrames) {
  const auto cfg = small_config(Strategy::kBoth, 2);
  ParameterSet params;
  std::mt19937_64 rng(15);
  init_temporal_params(params, cfg, rng);
  std::vector<std::string> names;
  std::vector<Tensor> inputs;
  for (int i = 0; i < 2; ++i) inputs.push_back(diff::random_tensor({2, 2, 4, 4}, rng));
  for (const auto& [name, t] : params.items()) {
    names.push_back(name);
    Tensor nudged = t;
    for (double& v : nudged.storage()) v += std::uniform_real_distribution<double>(-0.02, 0.02)(rng);
    inputs.push_back(nudged);
  }
  const auto ego = poses(2, 0.3);
  const auto op = [&](Tape& tape, std::span<const Var> in) {
    std::map<std::string, Var> vars;
    for (std::size_t k = 0; k < names.size(); ++k) vars[names[k]] = in[k + 2];
    const BoundParams bound(tape, vars);
    return reconstruct_dropped({in[0], in[1]}, 1, ego, bound, cfg);
  };
  const auto r = diff::gradcheck(op, inputs);
  EXPECT_GT(r.checked, 100);
  EXPECT_LT(r.max_rel_error, 1e-3) << "input " << r.worst_input << " element " << r.worst_element;
}

TEST(DropIndex, RangeAndDeterminism) {
  std::mt19937_64 a(16), b(16);
  std::set<int> seen;
  for (int i = 0; i < 500; ++i) {
    const int m = choose_drop_index(5, a);
    EXPECT_EQ(m, choose_drop_index(5, b));
    EXPECT_GE(m, 0);
    EXPECT_LE(m, 4);
    seen.insert(m);
  }
  EXPECT_EQ(seen.size(), 5u);
  EXPECT_EQ(choose_drop_index(1, a), 0);
}

}  // namespace
}  // namespace mim4d::temporal
