// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance report: one PASS/FAIL line per criterion, details indented below.
// Exit status is nonzero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mim4d/config.hpp"
#include "mim4d/gradsuite.hpp"
#include "mim4d/masking.hpp"
#include "mim4d/temporal.hpp"
#include "mim4d/trainer.hpp"
#include "render_oracle.hpp"

using namespace mim4d;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Criterion {
  int id;
  std::string title;
  std::function<bool(std::vector<std::string>&)> check;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

bool gradient_suite(std::vector<std::string>& notes) {
  const auto t0 = Clock::now();
  bool ok = true;
  double worst_op = 0.0, worst_comp = 0.0;
  std::int64_t kinks = 0;
  int ops = 0;
  for (std::uint64_t instance = 0; instance < 10; ++instance) {
    const auto rows = gradsuite::run(gradsuite::op_cases(instance));
    ops = static_cast<int>(rows.size());
    for (const auto& o : rows) {
      worst_op = std::max(worst_op, o.result.max_rel_error);
      kinks += o.result.kinks;
      if (!o.passed() || o.result.max_rel_error >= 1e-4) {
        ok = false;
        notes.push_back(fmt("%s draw %llu: %.3e", o.name.c_str(), static_cast<unsigned long long>(instance),
                            o.result.max_rel_error));
      }
    }
  }
  for (const auto& o : gradsuite::run(gradsuite::composition_cases())) {
    worst_comp = std::max(worst_comp, o.result.max_rel_error);
    notes.push_back(fmt("%-40s %.3e (%lld elements)", o.name.c_str(), o.result.max_rel_error,
                        static_cast<long long>(o.result.checked)));
    if (o.result.checked == 0 || o.result.max_rel_error >= 1e-3) ok = false;
  }
  const double secs = seconds_since(t0);
  notes.push_back(fmt("%d ops x 10 draws: worst %.3e (limit 1e-4), %lld kinks skipped", ops, worst_op,
                      static_cast<long long>(kinks)));
  notes.push_back(fmt("compositions worst %.3e (limit 1e-3); %.1f s (limit 300 s)", worst_comp, secs));
  return ok && secs < 300.0;
}

bool rendering_oracle(std::vector<std::string>& notes) {
  const auto s = testing::analytic_oracle(32.0, 64);
  notes.push_back(fmt("%d hit rays, spacing %.4f m", s.hit_rays, s.spacing));
  notes.push_back(fmt("depth within 2 spacings: %.2f%% (need 95%%), mean |error| %.4f m", 100.0 * s.depth_fraction(),
                      s.mean_abs_depth_error));
  notes.push_back(fmt("color within 0.02 of albedo: %.2f%%", 100.0 * s.color_fraction()));
  double previous = 1e300;
  bool monotone = true;
  for (double a : {2.0, 8.0, 32.0}) {
    const auto sa = testing::analytic_oracle(a, 64);
    notes.push_back(fmt("a=%-4g mean |depth error| %.4f m, within 2 spacings %.2f%%", a, sa.mean_abs_depth_error,
                        100.0 * sa.depth_fraction()));
    monotone = monotone && sa.mean_abs_depth_error < previous;
    previous = sa.mean_abs_depth_error;
  }
  return s.hit_rays > 0 && s.depth_fraction() >= 0.95 && s.color_fraction() >= 0.95 && monotone;
}

bool neus_identities(std::vector<std::string>& notes) {
  std::mt19937_64 rng(20260101);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> length(1, 96);
  double worst_sum = 0.0;
  int transmittance_violations = 0;
  for (int seq = 0; seq < 1000; ++seq) {
    const int k = length(rng);
    Tensor alpha(Shape{1, k}), colors(Shape{1, k, 3}, 0.5), depths(Shape{1, k});
    for (int j = 0; j < k; ++j) {
      const double u = unit(rng);
      alpha[j] = seq % 10 == 0 ? (u < 0.5 ? 0.0 : 1.0) : u;
      depths[j] = j + 1.0;
    }
    diff::Tape tape;
    const auto acc = render::accumulate(tape.constant(alpha), tape.constant(colors), depths);
    double prod = 1.0, sum = 0.0;
    for (int j = 0; j < k; ++j) {
      prod *= 1.0 - alpha[j];
      sum += acc.weights.value()[j];
      if (j > 0 && acc.transmittance.value()[j] > acc.transmittance.value()[j - 1]) ++transmittance_violations;
      if (acc.transmittance.value()[j] < 0.0 || acc.transmittance.value()[j] > 1.0) ++transmittance_violations;
    }
    worst_sum = std::max(worst_sum, std::fabs(sum - (1.0 - prod)));
  }
  notes.push_back(fmt("1000 sequences: max |sum w - (1 - prod(1 - alpha))| = %.3e (limit 1e-6)", worst_sum));
  notes.push_back(fmt("transmittance violations: %d", transmittance_violations));

  std::uniform_real_distribution<double> sdf(-50.0, 50.0), log_a(std::log(1e-3), std::log(1e3));
  const double extremes[] = {-50.0, 50.0, 0.0};
  Tensor pairs(Shape{10000, 2});
  Tensor sharpness(Shape{10000});
  for (int i = 0; i < 10000; ++i) {
    pairs[2 * i] = i < 9 ? extremes[i / 3] : sdf(rng);
    pairs[2 * i + 1] = i < 9 ? extremes[i % 3] : sdf(rng);
    sharpness[i] = i < 9 ? (i % 2 ? 1e3 : 1e-3) : std::exp(log_a(rng));
  }
  int outside = 0;
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 10000; ++i) {
    diff::Tape tape;
    // The second column is the successor; the terminal alpha of the row is not part of the triple.
    const auto alpha = render::opacity(tape.constant(Tensor(Shape{1, 2}, {pairs[2 * i], pairs[2 * i + 1]})),
                                       tape.constant(Tensor(Shape{1}, sharpness[i])));
    const double a0 = alpha.value()[0];
    lo = std::min(lo, a0);
    hi = std::max(hi, a0);
    if (!(a0 >= 0.0 && a0 <= 1.0)) ++outside;
  }
  notes.push_back(fmt("10000 (s_j, s_j+1, a) triples incl. +-50: alpha range [%.3g, %.3g], %d outside [0, 1]", lo, hi,
                      outside));
  return worst_sum <= 1e-6 && transmittance_violations == 0 && outside == 0;
}

bool structural(std::vector<std::string>& notes) {
  std::mt19937_64 rng(44);
  bool ok = true;

  int h2c_bad = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> d(1, 6);
    const Shape s{d(rng), d(rng), d(rng), d(rng)};
    diff::Tape tape;
    const auto v = tape.constant(diff::random_tensor(s, rng));
    const auto back = temporal::channel_to_height(temporal::height_to_channel(v), static_cast<int>(s[1]));
    if (!(back.value() == v.value())) ++h2c_bad;
  }
  notes.push_back(fmt("Height2Channel/Channel2Height: %d of 50 random shapes not bit-exact", h2c_bad));
  ok = ok && h2c_bad == 0;

  double warp_err = 0.0;
  std::uniform_real_distribution<double> u(-30.0, 30.0), yaw(-3.1, 3.1);
  const geometry::GridExtent extent;
  const auto pts = geometry::bev_reference_points(extent);
  for (int trial = 0; trial < 100; ++trial) {
    geometry::EgoPose a, b;
    a.world_from_ego = geometry::make_rigid(Eigen::AngleAxisd(yaw(rng), geometry::Vec3::UnitZ()).toRotationMatrix(),
                                            geometry::Vec3(u(rng), u(rng), 0.0));
    b.world_from_ego = geometry::make_rigid(Eigen::AngleAxisd(yaw(rng), geometry::Vec3::UnitZ()).toRotationMatrix(),
                                            geometry::Vec3(u(rng), u(rng), 0.0));
    const auto back = geometry::warp_reference_points(geometry::warp_reference_points(pts, a, b), b, a);
    for (std::size_t i = 0; i < pts.size(); ++i) warp_err = std::max(warp_err, (back[i] - pts[i]).norm());
  }
  notes.push_back(fmt("warp then inverse warp: max error %.3e m (limit 1e-9)", warp_err));
  ok = ok && warp_err <= 1e-9;

  int count_bad = 0, unmasked = 0;
  std::uniform_real_distribution<double> ratio(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::uniform_int_distribution<int> n(0, 64), r(0, 47), c(0, 63);
    masking::SupervisionSet s;
    const int count = n(rng);
    for (int i = 0; i < count; ++i) s.push_back({c(rng), r(rng), {}, 1.0});
    const double rho = ratio(rng);
    const auto m = masking::build_mask(s, 48, 64, 4, 8, rho, static_cast<std::uint64_t>(trial));
    if (m.stage2_cells != std::lround(rho * m.eligible_cells)) ++count_bad;
    for (const auto& p : s) unmasked += m.at(p.row, p.col) ? 0 : 1;
  }
  notes.push_back(fmt("500 masks: %d stage-2 counts off round(rho * eligible), %d supervision pixels visible",
                      count_bad, unmasked));
  ok = ok && count_bad == 0 && unmasked == 0;

  double px_err = 0.0;
  const auto cams = scene::default_cameras(6, 48, 64);
  std::uniform_real_distribution<double> col(0.0, 64.0), row(0.0, 48.0), depth(0.5, 40.0);
  for (int trial = 0; trial < 5000; ++trial) {
    const auto& cam = cams[static_cast<std::size_t>(trial % 6)];
    geometry::EgoPose pose;
    pose.world_from_ego = geometry::make_rigid(Eigen::AngleAxisd(yaw(rng), geometry::Vec3::UnitZ()).toRotationMatrix(),
                                               geometry::Vec3(u(rng), u(rng), 0.0));
    const geometry::Vec2 pixel(col(rng), row(rng));
    const auto ray = geometry::generate_ray(cam, pixel, pose);
    const auto p = geometry::project_point(cam, pose, ray.at(depth(rng)));
    px_err = std::max(px_err, p.behind ? 1e9 : (p.pixel - pixel).norm());
  }
  notes.push_back(fmt("generate_ray then project_point: max error %.3e px (limit 1e-6)", px_err));
  return ok && px_err <= 1e-6;
}

constexpr int kOverfitSteps = 1000;

bool overfit(std::vector<std::string>& notes) {
  Config cfg;  // 2 views, 64x48, window 5, strategy both
  cfg.threads = 1;
  const auto clips = train::generate_dataset(cfg);
  const auto t0 = Clock::now();
  train::Trainer trainer(cfg, clips);
  const auto initial = train::evaluate(cfg, clips, trainer.params());
  double tail = 0.0;
  for (int s = 1; s <= kOverfitSteps; ++s) {
    const auto m = trainer.step();
    if (s > kOverfitSteps - 50) tail += m.loss / 50.0;
    if (s % 250 == 0) {
      const auto e = train::evaluate(cfg, clips, trainer.params());
      notes.push_back(fmt("step %4d: eval loss %.4f (%.3f x initial), depth MAE %.4f m, %.0f s", s, e.loss,
                          e.loss / initial.loss, e.depth_mae, seconds_since(t0)));
    }
  }
  const auto final_eval = train::evaluate(cfg, clips, trainer.params());
  const double secs = seconds_since(t0);
  const double ratio = final_eval.loss / initial.loss;
  notes.push_back(fmt("initial eval loss %.4f (depth MAE %.4f m), final %.4f, ratio %.4f (limit 0.2)", initial.loss,
                      initial.depth_mae, final_eval.loss, ratio));
  notes.push_back(fmt("final depth MAE %.4f m (limit 0.5); mean training loss over the last 50 steps %.4f",
                      final_eval.depth_mae, tail));
  notes.push_back(fmt("%d steps, lr %g, single worker, %.0f s (limit 1800 s)", kOverfitSteps, cfg.lr, secs));
  return ratio <= 0.2 && final_eval.depth_mae <= 0.5 && secs < 1800.0;
}

bool ablation(std::vector<std::string>& notes) {
  Config cfg;
  cfg.ablate_steps = 10;
  const auto clips = train::generate_dataset(cfg);
  bool ok = true;
  for (const std::string axis : {"window", "strategy"}) {
    const auto a = train::ablate(cfg, clips, axis);
    const auto b = train::ablate(cfg, clips, axis);
    std::ostringstream ca, cb;
    train::write_ablation_csv(ca, a);
    train::write_ablation_csv(cb, b);
    const std::size_t expected = axis == "window" ? 4 : 5;
    const bool same = ca.str() == cb.str();
    notes.push_back(fmt("%s axis: %zu rows (need %zu), rerun %s", axis.c_str(), a.size(), expected,
                        same ? "identical" : "DIFFERENT"));
    for (const auto& r : a) {
      notes.push_back(fmt("  %-18s initial %.4f final %.4f eval %.4f depth MAE %.4f", r.setting.c_str(),
                          r.initial_loss, r.final_loss, r.eval_loss, r.eval_depth_mae));
      ok = ok && std::isfinite(r.eval_loss);
    }
    ok = ok && a.size() == expected && same;
  }
  return ok;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool determinism(std::vector<std::string>& notes) {
  Config cfg;
  cfg.threads = 1;
  const auto clips = train::generate_dataset(cfg);
  const fs::path root = fs::temp_directory_path() / "mim4d_acceptance_determinism";
  fs::remove_all(root);
  std::string metrics[2];
  ParameterSet params[2];
  for (int i = 0; i < 2; ++i) {
    train::TrainOptions o;
    o.out_dir = root / ("run" + std::to_string(i));
    o.steps = 4;
    train::train(cfg, clips, o);
    metrics[i] = slurp(o.out_dir / "metrics.csv");
    params[i] = train::checkpoint_params(o.out_dir / "checkpoint.bin");
  }
  auto strip_time = [](const std::string& csv) {
    std::istringstream in(csv);
    std::string out;
    for (std::string l; std::getline(in, l);) out += l.substr(0, l.rfind(',')) + "\n";
    return out;
  };
  const bool same_metrics = strip_time(metrics[0]) == strip_time(metrics[1]);
  const bool same_params = params[0] == params[1];
  notes.push_back(fmt("two 4-step runs: metrics %s, final parameters %s", same_metrics ? "identical" : "DIFFERENT",
                      same_params ? "bit-identical" : "DIFFERENT"));

  train::Trainer straight(cfg, clips);
  std::vector<double> losses;
  for (int i = 0; i < 4; ++i) losses.push_back(straight.step().loss);
  train::Trainer first(cfg, clips);
  first.step();
  first.step();
  first.save(root / "mid.bin");
  train::Trainer resumed(cfg, clips);
  resumed.load(root / "mid.bin");
  const double l3 = resumed.step().loss, l4 = resumed.step().loss;
  const bool resume_ok = l3 == losses[2] && l4 == losses[3] && resumed.params() == straight.params();
  notes.push_back(fmt("resume after step 2: step 3 loss %.17g vs %.17g, step 4 %s", l3, losses[2],
                      resume_ok ? "identical" : "DIFFERENT"));
  fs::remove_all(root);
  return same_metrics && same_params && resume_ok;
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "gradient suite", gradient_suite},
      {2, "rendering oracle (analytic sphere and plane, K=64, a=32)", rendering_oracle},
      {3, "opacity and transmittance identities", neus_identities},
      {4, "exact structural properties", structural},
      {5, "overfit convergence on one clip", overfit},
      {6, "ablation harness", ablation},
      {7, "determinism and checkpoint resume", determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    std::vector<std::string> notes;
    bool ok = false;
    const auto t0 = Clock::now();
    try {
      ok = c.check(notes);
    } catch (const std::exception& e) {
      notes.push_back(std::string("exception: ") + e.what());
    }
    std::printf("[%s] %d. %s (%.1f s)\n", ok ? "PASS" : "FAIL", c.id, c.title.c_str(), seconds_since(t0));
    for (const auto& n : notes) std::printf("       %s\n", n.c_str());
    std::fflush(stdout);
    failed += ok ? 0 : 1;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
