// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "mim4d/config.hpp"
#include "mim4d/gradsuite.hpp"
#include "mim4d/trainer.hpp"

namespace mim4d::train {
namespace {

namespace fs = std::filesystem;

Config tiny(int window = 2, const std::string& strategy = "both") {
  Config c;
  c.views = 1;
  c.height = 16;
  c.width = 16;
  c.objects = 2;
  c.lidar_samples = 60;
  c.supervision = 8;
  c.s_ray = 2;
  c.s_fill = 4;
  c.channels = 2;
  c.backbone_width = 4;
  c.nx = c.ny = 4;
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
  c.samples = 8;
  c.near = 1.0;
  c.far = 10.0;
  c.hidden = 8;
  c.geo_features = 2;
  c.seed = 21;
  c.validate();
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mim4d_trainer_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::string loss_column(const std::string& csv) {
  std::string out;
  for (const auto& l : lines(csv)) {
    const auto a = l.find(','), b = l.find(',', a + 1);
    out += l.substr(a + 1, b - a - 1) + "\n";
  }
  return out;
}

TEST(Seeds, MixSeedSeparatesStreams) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 20; ++a)
    for (std::uint64_t b = 0; b < 20; ++b) seen.insert(mix_seed(a, b));
  EXPECT_EQ(seen.size(), 400u);
  EXPECT_EQ(mix_seed(3, 4), mix_seed(3, 4));
}

TEST(ConfigText, ParseSerializeFixedPoint) {
  Config c = tiny();
  c.lr = 1.0 / 3.0;
  c.strategy = "warp-cat";
  c.seed = 18446744073709551615ULL;
  c.jitter = false;
  const std::string text = c.serialize();
  const Config back = Config::parse(text);
  EXPECT_EQ(back, c);
  EXPECT_EQ(back.serialize(), text);
  EXPECT_EQ(back.hash(), c.hash());
  Config other = c;
  other.samples = 9;
  EXPECT_NE(other.hash(), c.hash());
}

TEST(ConfigText, CommentsBlankLinesAndErrors) {
  const Config c = Config::parse("# run\n\nrenderer.samples = 40\ntemporal.strategy=long\n");
  EXPECT_EQ(c.samples, 40);
  EXPECT_EQ(c.strategy, "long");
  EXPECT_THROW(Config::parse("renderer.unknown=1\n"), ConfigError);
  EXPECT_THROW(Config::parse("masking.ratio=1.5\n"), ConfigError);
  EXPECT_THROW(Config::parse("renderer.samples=ten\n"), ConfigError);
  EXPECT_THROW(Config::parse("renderer.samples=4\nrenderer.samples=5\n"), ConfigError);
  EXPECT_THROW(Config::parse("renderer.samples\n"), ConfigError);
  EXPECT_THROW(Config::parse("temporal.strategy=sideways\n"), ConfigError);
  EXPECT_THROW(Config::parse("scene.height=50\n"), ConfigError);
  for (const auto& key : Config::keys()) EXPECT_NO_THROW(Config{}.get(key)) << key;
}

TEST(ConfigText, FileRoundtrip) {
  const fs::path dir = scratch("cfg");
  fs::create_directories(dir);
  const Config c = tiny(3, "short");
  c.save(dir / "run.cfg");
  EXPECT_EQ(Config::load(dir / "run.cfg"), c);
  EXPECT_EQ(slurp(dir / "run.cfg").find('\r'), std::string::npos);
  fs::remove_all(dir);
}

TEST(Dataset, GenerateWriteLoad) {
  Config c = tiny(3);
  c.clips = 2;
  const fs::path dir = scratch("data");
  write_dataset(dir, c);
  const auto loaded = load_dataset(dir);
  const auto generated = generate_dataset(c);
  ASSERT_EQ(loaded.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(loaded[i].window(), 3);
    EXPECT_EQ(loaded[i].frames[2].images[0], generated[i].frames[2].images[0]);
  }
  EXPECT_NE(generated[0].frames[0].images[0], generated[1].frames[0].images[0]);
  EXPECT_EQ(load_dataset(dir / "clip_001").size(), 1u);
  EXPECT_EQ(Config::load(dir / "config.cfg"), c);
  fs::remove_all(dir);
}

TEST(Dataset, WindowKeepsTheLastFrames) {
  const auto clip = generate_dataset(tiny(4)).front();
  const auto w = window_clip(clip, 2);
  ASSERT_EQ(w.window(), 2);
  EXPECT_EQ(w.frames[0].time, clip.frames[2].time);
  EXPECT_THROW(window_clip(clip, 5), std::invalid_argument);
}

TEST(Pipeline, SameSeedSameLossToTheBit) {
  const Config c = tiny();
  const auto clip = generate_dataset(c).front();
  const auto params = init_params(c);
  auto run = [&](std::uint64_t seed) {
    diff::Tape tape;
    const BoundParams bound(tape, params);
    const auto out = forward_pipeline(clip, c, bound, seed);
    return std::make_pair(out.loss.value().item(), bound.gradients(diff::backward(tape, out.loss)));
  };
  const auto a = run(5), b = run(5);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_GT(a.first, 0.0);
}

TEST(Pipeline, ZeroLossScalesGiveZeroLoss) {
  Config c = tiny();
  c.lambda_rgb = 0.0;
  c.lambda_depth = 0.0;
  const auto clip = generate_dataset(c).front();
  diff::Tape tape;
  const BoundParams bound(tape, init_params(c));
  EXPECT_EQ(forward_pipeline(clip, c, bound, 3).loss.value().item(), 0.0);
}

TEST(Pipeline, SingleFrameWithoutDecoder) {
  const Config c = tiny(1, "none");
  const auto clip = generate_dataset(c).front();
  diff::Tape tape;
  const BoundParams bound(tape, init_params(c));
  const auto out = forward_pipeline(clip, c, bound, 4);
  EXPECT_EQ(out.diagnostics.drop, 0);
  EXPECT_EQ(out.reconstruction.shape(), (Shape{2, 2, 4, 4}));
  EXPECT_GT(out.diagnostics.masked_fraction, 0.0);
  EXPECT_LE(out.diagnostics.weight_sum_max, 1.0 + 1e-12);
  EXPECT_GT(out.diagnostics.rays, 0);
}

TEST(Pipeline, NonFiniteValueNamesTheStage) {
  const Config c = tiny();
  auto clip = generate_dataset(c).front();
  for (double& v : clip.frames.back().images.front().storage()) v = std::nan("");
  const auto params = init_params(c);
  diff::Tape tape;
  const BoundParams bound(tape, params);
  try {
    forward_pipeline(clip, c, bound, 1);
    FAIL() << "expected PipelineError";
  } catch (const PipelineError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder"), std::string::npos) << e.what();
  }
}

TEST(Pipeline, MismatchedClipIsRejected) {
  const Config c = tiny();
  Config other = c;
  other.width = 20;
  const auto clip = generate_dataset(other).front();
  diff::Tape tape;
  const BoundParams bound(tape, init_params(c));
  EXPECT_THROW(forward_pipeline(clip, c, bound, 1), std::invalid_argument);
}

TEST(Pipeline, GradientsMatchFiniteDifferences) {
  for (const auto& c : gradsuite::composition_cases()) {
    if (c.name.rfind("full pipeline", 0) != 0) continue;
    const auto out = gradsuite::run({c});
    EXPECT_GT(out[0].result.checked, 0);
    EXPECT_LT(out[0].result.max_rel_error, 1e-3);
  }
}

TEST(Training, OneStepWritesHeaderAndOneRow) {
  const Config c = tiny();
  const fs::path dir = scratch("one");
  TrainOptions o;
  o.out_dir = dir;
  o.steps = 1;
  train(c, generate_dataset(c), o);
  const std::string csv = slurp(dir / "metrics.csv");
  const auto rows = lines(csv);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], kMetricsHeader);
  EXPECT_EQ(rows[1].rfind("1,", 0), 0u);
  EXPECT_EQ(csv.find('\r'), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "checkpoint.bin"));
  EXPECT_EQ(checkpoint_config(dir / "checkpoint.bin"), c);
  fs::remove_all(dir);
}

TEST(Training, SameSeedRunsGiveIdenticalLosses) {
  const Config c = tiny();
  const auto clips = generate_dataset(c);
  std::string csv[2];
  for (int i = 0; i < 2; ++i) {
    const fs::path dir = scratch("det" + std::to_string(i));
    TrainOptions o;
    o.out_dir = dir;
    o.steps = 4;
    train(c, clips, o);
    csv[i] = slurp(dir / "metrics.csv");
    fs::remove_all(dir);
  }
  EXPECT_EQ(loss_column(csv[0]), loss_column(csv[1]));
}

TEST(Training, CheckpointRoundtripIsBitExact) {
  const Config c = tiny();
  const auto clips = generate_dataset(c);
  Trainer t(c, clips);
  t.step();
  t.step();
  const fs::path dir = scratch("ckpt");
  t.save(dir / "a.bin");
  Trainer u(c, clips);
  u.load(dir / "a.bin");
  EXPECT_EQ(u.params(), t.params());
  EXPECT_EQ(u.optimizer().m, t.optimizer().m);
  EXPECT_EQ(u.optimizer().v, t.optimizer().v);
  EXPECT_EQ(u.step_count(), 2);
  EXPECT_EQ(checkpoint_params(dir / "a.bin"), t.params());
  fs::remove_all(dir);
}

TEST(Training, ResumeReproducesTheNextLoss) {
  const Config c = tiny(3);
  const auto clips = generate_dataset(c);
  Trainer straight(c, clips);
  std::vector<double> losses;
  for (int i = 0; i < 4; ++i) losses.push_back(straight.step().loss);

  const fs::path dir = scratch("resume");
  Trainer first(c, clips);
  first.step();
  first.step();
  first.save(dir / "ck.bin");
  Trainer second(c, clips);
  second.load(dir / "ck.bin");
  const auto m3 = second.step();
  EXPECT_EQ(m3.step, 3);
  EXPECT_EQ(m3.loss, losses[2]);
  EXPECT_EQ(second.step().loss, losses[3]);
  fs::remove_all(dir);
}

TEST(Training, ResumeAppendsToMetrics) {
  const Config c = tiny();
  const auto clips = generate_dataset(c);
  const fs::path dir = scratch("append");
  TrainOptions o;
  o.out_dir = dir;
  o.steps = 2;
  train(c, clips, o);
  o.resume = dir / "checkpoint.bin";
  o.steps = 1;
  train(c, clips, o);
  const auto rows = lines(slurp(dir / "metrics.csv"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[3].rfind("3,", 0), 0u);
  fs::remove_all(dir);
}

TEST(Training, ForeignCheckpointIsRejected) {
  const Config c = tiny();
  const auto clips = generate_dataset(c);
  const fs::path dir = scratch("foreign");
  Trainer(c, clips).save(dir / "ck.bin");
  Config other = c;
  other.lr = 1e-3;
  Trainer t(other, clips);
  EXPECT_THROW(t.load(dir / "ck.bin"), io::BlobError);
  fs::remove_all(dir);
}

TEST(Training, WorkersMatchTheSerialReduction) {
  Config c = tiny();
  c.clips = 3;
  c.batch_clips = 3;
  const auto clips = generate_dataset(c);
  Config parallel = c;
  parallel.threads = 3;
  Trainer a(c, clips), b(parallel, clips);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(a.step().loss, b.step().loss);
  EXPECT_EQ(a.params(), b.params());
}

TEST(Training, DivergenceIsDetected) {
  Config c = tiny();
  c.lambda_rgb = 1e6;
  c.lambda_depth = 1e6;
  Trainer t(c, generate_dataset(c));
  EXPECT_THROW(t.step(), DivergenceError);
}

TEST(Training, OverfitsOneStaticClipWithoutDecoder) {
  Config c = tiny(1, "none");
  c.ego_step = 0.0;
  c.lr = 3e-3;
  c.jitter = false;
  const auto clips = generate_dataset(c);
  Trainer t(c, clips);
  const double initial = evaluate(c, clips, t.params()).loss;
  for (int i = 0; i < 500; ++i) t.step();
  const double final_loss = evaluate(c, clips, t.params()).loss;
  EXPECT_LT(final_loss, 0.2 * initial) << "initial " << initial << " final " << final_loss;
}

TEST(Ablation, RowCountsAndDeterminism) {
  Config c = tiny(5);
  c.ablate_steps = 1;
  const auto clips = generate_dataset(c);
  const auto w = ablate(c, clips, "window");
  ASSERT_EQ(w.size(), 4u);
  EXPECT_EQ(w[0].window, 1);
  EXPECT_EQ(w[0].strategy, "none");
  EXPECT_EQ(w[3].window, 5);
  const auto s = ablate(c, clips, "strategy");
  ASSERT_EQ(s.size(), 5u);
  EXPECT_EQ(s[1].strategy, "warp-cat");
  std::ostringstream a, b;
  write_ablation_csv(a, s);
  write_ablation_csv(b, ablate(c, clips, "strategy"));
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(lines(a.str()).size(), 6u);
  EXPECT_EQ(lines(a.str())[0], kAblationHeader);
  for (const auto& r : s) {
    EXPECT_TRUE(std::isfinite(r.eval_loss));
    EXPECT_GT(r.initial_loss, 0.0);
  }
  EXPECT_THROW(ablate(c, clips, "depth"), std::invalid_argument);
}

}  // namespace
}  // namespace mim4d::train
