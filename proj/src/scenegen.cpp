// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mim4d/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "mim4d/blob.hpp"

namespace mim4d::scene {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

constexpr double kHitEpsilon = 1e-7;
constexpr int kMaxSteps = 200000;

}  // namespace

double primitive_sdf(const Primitive& prim, const Vec3& p, double time) {
  const Vec3 shift = prim.velocity * time;
  return std::visit(overloaded{
                        [&](const Sphere& s) { return (p - (s.center + shift)).norm() - s.radius; },
                        [&](const Box& b) {
                          const Vec3 q = (p - (b.center + shift)).cwiseAbs() - b.half_extents;
                          return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
                        },
                        [&](const GroundPlane& g) { return p.z() - g.height; },
                    },
                    prim.shape);
}

double scene_sdf(const AnalyticScene& scene, const Vec3& p, double time) {
  double d = std::numeric_limits<double>::infinity();
  for (const auto& prim : scene.primitives) d = std::min(d, primitive_sdf(prim, p, time));
  return d;
}

int nearest_primitive(const AnalyticScene& scene, const Vec3& p, double time) {
  int best = -1;
  double d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < scene.primitives.size(); ++i) {
    const double di = primitive_sdf(scene.primitives[i], p, time);
    if (di < d) {
      d = di;
      best = static_cast<int>(i);
    }
  }
  return best;
}

std::optional<Hit> trace_ray(const AnalyticScene& scene, const Ray& ray, double time, double far) {
  if (scene.primitives.empty()) return std::nullopt;
  double t = 0.0;
  double dist = 0.0;
  for (int step = 0; step < kMaxSteps; ++step) {
    if (t > far) return std::nullopt;
    dist = scene_sdf(scene, ray.at(t), time);
    if (dist < kHitEpsilon) break;
    t += dist;
  }
  // Near-tangent rays crawl; accept a small residual once the step budget is spent.
  if (dist >= 1e-4) return std::nullopt;
  if (t > far) return std::nullopt;
  const int idx = nearest_primitive(scene, ray.at(t), time);
  return Hit{t, scene.primitives[static_cast<std::size_t>(idx)].albedo, idx};
}

MultiViewClip render_clip(const AnalyticScene& scene, const std::vector<Camera>& cameras,
                          const std::vector<EgoPose>& trajectory, const RenderSettings& settings) {
  if (settings.window < 1) throw std::invalid_argument("render_clip: window must be >= 1");
  if (settings.height <= 0 || settings.width <= 0) throw std::invalid_argument("render_clip: extents must be positive");
  if (static_cast<int>(trajectory.size()) < settings.window) {
    throw std::invalid_argument("render_clip: trajectory shorter than the window");
  }
  if (cameras.empty()) throw std::invalid_argument("render_clip: no cameras");
  for (const auto& cam : cameras) {
    cam.validate();
    if (cam.width != settings.width || cam.height != settings.height) {
      throw std::invalid_argument("render_clip: camera size does not match the clip size");
    }
  }

  MultiViewClip clip;
  clip.height = settings.height;
  clip.width = settings.width;
  clip.frame_dt = settings.frame_dt;
  clip.max_depth = settings.max_depth;
  clip.seed = settings.seed;
  clip.extent = settings.extent;
  clip.cameras = cameras;

  const int h = settings.height, w = settings.width;
  std::mt19937_64 rng(settings.seed);
  for (int f = 0; f < settings.window; ++f) {
    Frame frame;
    frame.time = f * settings.frame_dt;
    frame.pose = trajectory[static_cast<std::size_t>(f)];
    frame.pose.timestamp = f;
    for (std::size_t v = 0; v < cameras.size(); ++v) {
      Tensor image(Shape{h, w, 3});
      std::vector<double> hit_depth(static_cast<std::size_t>(h * w), -1.0);
      auto trace_rows = [&](int row_begin, int row_end) {
        for (int row = row_begin; row < row_end; ++row) {
          for (int col = 0; col < w; ++col) {
            const Ray ray = geometry::generate_ray(cameras[v], {col + 0.5, row + 0.5}, frame.pose);
            const auto hit = trace_ray(scene, ray, frame.time, settings.color_range);
            const Vec3 color = hit ? hit->albedo : scene.background;
            const std::int64_t base = (static_cast<std::int64_t>(row) * w + col) * 3;
            for (int c = 0; c < 3; ++c) image[base + c] = color[c];
            if (hit && hit->depth <= settings.max_depth) hit_depth[static_cast<std::size_t>(row * w + col)] = hit->depth;
          }
        }
      };
      const int threads = std::clamp(settings.threads, 1, h);
      if (threads == 1) {
        trace_rows(0, h);
      } else {
        std::vector<std::jthread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(trace_rows, t * h / threads, (t + 1) * h / threads);
      }

      std::vector<int> hits;
      for (int i = 0; i < h * w; ++i)
        if (hit_depth[static_cast<std::size_t>(i)] >= 0.0) hits.push_back(i);
      if (hits.empty()) {
        std::cerr << "warning: camera " << v << " has no hit pixels in frame " << f << '\n';
      }
      const auto take = std::min<std::size_t>(hits.size(), static_cast<std::size_t>(settings.lidar_samples_per_view));
      // Partial Fisher-Yates: the first `take` entries are a uniform draw without replacement.
      for (std::size_t i = 0; i < take; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, hits.size() - 1);
        std::swap(hits[i], hits[pick(rng)]);
      }
      std::vector<DepthSample> samples;
      for (std::size_t i = 0; i < take; ++i) {
        const int idx = hits[i];
        samples.push_back({idx % w, idx / w, hit_depth[static_cast<std::size_t>(idx)]});
      }
      std::sort(samples.begin(), samples.end(),
                [](const DepthSample& a, const DepthSample& b) { return std::tie(a.row, a.col) < std::tie(b.row, b.col); });
      frame.images.push_back(std::move(image));
      frame.depths.push_back(std::move(samples));
    }
    clip.frames.push_back(std::move(frame));
  }
  return clip;
}

AnalyticScene random_scene(std::uint64_t seed, int objects, bool moving) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  AnalyticScene scene;
  scene.primitives.push_back({GroundPlane{0.0}, Vec3(0.35, 0.35, 0.32), Vec3::Zero()});
  for (int i = 0; i < objects; ++i) {
    const Vec3 albedo(uni(0.1, 0.95), uni(0.1, 0.95), uni(0.1, 0.95));
    const double x = uni(3.0, 8.0), y = uni(-4.0, 4.0);
    const Vec3 velocity = moving ? Vec3(uni(-0.5, 0.5), uni(-0.5, 0.5), 0.0) : Vec3::Zero();
    if (i % 2 == 0) {
      const double r = uni(0.5, 1.0);
      scene.primitives.push_back({Sphere{Vec3(x, y, r), r}, albedo, velocity});
    } else {
      const Vec3 half(uni(0.3, 0.8), uni(0.3, 0.8), uni(0.4, 1.0));
      scene.primitives.push_back({Box{Vec3(x, y, half.z()), half}, albedo, velocity});
    }
  }
  return scene;
}

std::vector<Camera> default_cameras(int views, int height, int width) {
  constexpr double kPi = 3.14159265358979323846;
  std::vector<Camera> cams;
  for (int v = 0; v < views; ++v) {
    const double yaw = (v - 0.5 * (views - 1)) * 50.0 * kPi / 180.0;
    const double pitch = 12.0 * kPi / 180.0;
    Camera cam;
    cam.width = width;
    cam.height = height;
    cam.fx = cam.fy = 0.6 * width;
    cam.cx = 0.5 * width;
    cam.cy = 0.5 * height;
    const geometry::Mat3 r = geometry::camera_rotation_from_ego(yaw, pitch);
    const Vec3 center_ego(0.5, 0.0, 1.2);
    cam.cam_from_ego = geometry::make_rigid(r, -r * center_ego);
    cams.push_back(cam);
  }
  return cams;
}

std::vector<EgoPose> straight_trajectory(int count, double step_m, double yaw_step_rad) {
  std::vector<EgoPose> poses;
  Vec3 pos = Vec3::Zero();
  double yaw = 0.0;
  for (int i = 0; i < count; ++i) {
    EgoPose p;
    p.timestamp = i;
    p.world_from_ego = geometry::make_rigid(Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix(), pos);
    poses.push_back(p);
    pos += Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix() * Vec3(step_m, 0.0, 0.0);
    yaw += yaw_step_rad;
  }
  return poses;
}

// ---- clip files ----

namespace {

Tensor rigid_to_tensor(const geometry::Rigid& t) {
  Tensor out(Shape{4, 4});
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) out[r * 4 + c] = t.matrix()(r, c);
  return out;
}

geometry::Rigid tensor_to_rigid(const Tensor& t) {
  if (t.shape() != Shape{4, 4}) throw io::BlobError("pose array must be 4x4");
  geometry::Rigid out = geometry::Rigid::Identity();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) out.linear()(r, c) = t[r * 4 + c];
    out.translation()(r) = t[r * 4 + 3];
  }
  return out;
}

std::string frame_file(int f) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%03d.bin", f);
  return buf;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::map<std::string, std::string> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw io::BlobError("cannot open manifest " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw io::BlobError("malformed manifest line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

const std::string& need(const std::map<std::string, std::string>& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw io::BlobError("manifest missing key: " + key);
  return it->second;
}

}  // namespace

void write_clip(const std::filesystem::path& dir, const MultiViewClip& clip, const AnalyticScene* scene) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "manifest.txt", std::ios::trunc);
    os << "format=MV4D-clip\n"
       << "version=" << io::kBlobVersion << '\n'
       << "views=" << clip.views() << '\n'
       << "window=" << clip.window() << '\n'
       << "height=" << clip.height << '\n'
       << "width=" << clip.width << '\n'
       << "seed=" << clip.seed << '\n'
       << "frame_dt=" << fmt_double(clip.frame_dt) << '\n'
       << "max_depth=" << fmt_double(clip.max_depth) << '\n'
       << "extent.x_min=" << fmt_double(clip.extent.x_min) << '\n'
       << "extent.x_max=" << fmt_double(clip.extent.x_max) << '\n'
       << "extent.y_min=" << fmt_double(clip.extent.y_min) << '\n'
       << "extent.y_max=" << fmt_double(clip.extent.y_max) << '\n'
       << "extent.z_min=" << fmt_double(clip.extent.z_min) << '\n'
       << "extent.z_max=" << fmt_double(clip.extent.z_max) << '\n'
       << "extent.nx=" << clip.extent.nx << '\n'
       << "extent.ny=" << clip.extent.ny << '\n'
       << "extent.nz=" << clip.extent.nz << '\n';
    for (int f = 0; f < clip.window(); ++f) os << "frame." << f << '=' << frame_file(f) << '\n';
    if (scene) os << "scene=scene.bin\n";
    if (!os) throw io::BlobError("failed to write manifest in " + dir.string());
  }
  for (int f = 0; f < clip.window(); ++f) {
    const auto& frame = clip.frames[static_cast<std::size_t>(f)];
    io::Blob blob;
    blob.put("time", Tensor::scalar(frame.time));
    blob.put("ego_pose", rigid_to_tensor(frame.pose.world_from_ego));
    for (int v = 0; v < clip.views(); ++v) {
      const auto& cam = clip.cameras[static_cast<std::size_t>(v)];
      const std::string p = "view" + std::to_string(v) + ".";
      blob.put(p + "intrinsics", Tensor(Shape{6}, {cam.fx, cam.fy, cam.cx, cam.cy, static_cast<double>(cam.width),
                                                    static_cast<double>(cam.height)}));
      blob.put(p + "cam_from_ego", rigid_to_tensor(cam.cam_from_ego));
      blob.put(p + "image", frame.images[static_cast<std::size_t>(v)]);
      const auto& ds = frame.depths[static_cast<std::size_t>(v)];
      std::vector<std::int64_t> pix;
      std::vector<double> vals;
      for (const auto& s : ds) {
        pix.push_back(s.col);
        pix.push_back(s.row);
        vals.push_back(s.depth);
      }
      const auto n = static_cast<std::int64_t>(ds.size());
      blob.put_i64(p + "depth_pixels", pix, Shape{n, 2});
      blob.put(p + "depth_values", Tensor(Shape{n}, std::move(vals)));
    }
    blob.write(dir / frame_file(f));
  }
  if (scene) {
    io::Blob blob;
    const auto n = static_cast<std::int64_t>(scene->primitives.size());
    Tensor prims(Shape{n, 13});
    for (std::int64_t i = 0; i < n; ++i) {
      const auto& prim = scene->primitives[static_cast<std::size_t>(i)];
      double* row = prims.storage().data() + i * 13;
      std::visit(overloaded{
                     [&](const Sphere& s) {
                       row[0] = 0;
                       for (int k = 0; k < 3; ++k) row[1 + k] = s.center[k];
                       row[4] = s.radius;
                     },
                     [&](const Box& b) {
                       row[0] = 1;
                       for (int k = 0; k < 3; ++k) {
                         row[1 + k] = b.center[k];
                         row[4 + k] = b.half_extents[k];
                       }
                     },
                     [&](const GroundPlane& g) {
                       row[0] = 2;
                       row[4] = g.height;
                     },
                 },
                 prim.shape);
      for (int k = 0; k < 3; ++k) {
        row[7 + k] = prim.albedo[k];
        row[10 + k] = prim.velocity[k];
      }
    }
    blob.put("primitives", prims);
    blob.put("background", Tensor(Shape{3}, {scene->background[0], scene->background[1], scene->background[2]}));
    blob.write(dir / "scene.bin");
  }
}

MultiViewClip read_clip(const std::filesystem::path& dir) {
  const auto kv = read_manifest(dir / "manifest.txt");
  if (need(kv, "format") != "MV4D-clip") throw io::BlobError("not a clip manifest: " + dir.string());
  MultiViewClip clip;
  const int views = std::stoi(need(kv, "views"));
  const int window = std::stoi(need(kv, "window"));
  clip.height = std::stoi(need(kv, "height"));
  clip.width = std::stoi(need(kv, "width"));
  clip.seed = std::stoull(need(kv, "seed"));
  clip.frame_dt = std::stod(need(kv, "frame_dt"));
  clip.max_depth = std::stod(need(kv, "max_depth"));
  clip.extent.x_min = std::stod(need(kv, "extent.x_min"));
  clip.extent.x_max = std::stod(need(kv, "extent.x_max"));
  clip.extent.y_min = std::stod(need(kv, "extent.y_min"));
  clip.extent.y_max = std::stod(need(kv, "extent.y_max"));
  clip.extent.z_min = std::stod(need(kv, "extent.z_min"));
  clip.extent.z_max = std::stod(need(kv, "extent.z_max"));
  clip.extent.nx = std::stoi(need(kv, "extent.nx"));
  clip.extent.ny = std::stoi(need(kv, "extent.ny"));
  clip.extent.nz = std::stoi(need(kv, "extent.nz"));

  for (int f = 0; f < window; ++f) {
    const auto blob = io::Blob::read(dir / need(kv, "frame." + std::to_string(f)));
    Frame frame;
    frame.time = blob.tensor("time").item();
    frame.pose.world_from_ego = tensor_to_rigid(blob.tensor("ego_pose"));
    frame.pose.timestamp = f;
    for (int v = 0; v < views; ++v) {
      const std::string p = "view" + std::to_string(v) + ".";
      if (f == 0) {
        const Tensor in = blob.tensor(p + "intrinsics");
        Camera cam;
        cam.fx = in[0];
        cam.fy = in[1];
        cam.cx = in[2];
        cam.cy = in[3];
        cam.width = static_cast<int>(in[4]);
        cam.height = static_cast<int>(in[5]);
        cam.cam_from_ego = tensor_to_rigid(blob.tensor(p + "cam_from_ego"));
        cam.validate();
        clip.cameras.push_back(cam);
      }
      frame.images.push_back(blob.tensor(p + "image"));
      const auto pix = blob.i64(p + "depth_pixels");
      const Tensor vals = blob.tensor(p + "depth_values");
      std::vector<DepthSample> ds;
      for (std::int64_t i = 0; i < vals.numel(); ++i) {
        ds.push_back({static_cast<int>(pix[static_cast<std::size_t>(2 * i)]),
                      static_cast<int>(pix[static_cast<std::size_t>(2 * i + 1)]), vals[i]});
      }
      frame.depths.push_back(std::move(ds));
    }
    clip.frames.push_back(std::move(frame));
  }
  return clip;
}

std::optional<AnalyticScene> read_clip_scene(const std::filesystem::path& dir) {
  const auto kv = read_manifest(dir / "manifest.txt");
  const auto it = kv.find("scene");
  if (it == kv.end()) return std::nullopt;
  const auto blob = io::Blob::read(dir / it->second);
  const Tensor prims = blob.tensor("primitives");
  const Tensor bg = blob.tensor("background");
  AnalyticScene scene;
  scene.background = Vec3(bg[0], bg[1], bg[2]);
  for (std::int64_t i = 0; i < prims.dim(0); ++i) {
    const double* row = prims.storage().data() + i * 13;
    Primitive prim;
    const Vec3 c(row[1], row[2], row[3]);
    switch (static_cast<int>(row[0])) {
      case 0:
        prim.shape = Sphere{c, row[4]};
        break;
      case 1:
        prim.shape = Box{c, Vec3(row[4], row[5], row[6])};
        break;
      case 2:
        prim.shape = GroundPlane{row[4]};
        break;
      default:
        throw io::BlobError("unknown primitive kind in scene.bin");
    }
    prim.albedo = Vec3(row[7], row[8], row[9]);
    prim.velocity = Vec3(row[10], row[11], row[12]);
    scene.primitives.push_back(prim);
  }
  return scene;
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("write_ppm expects (H, W, 3)");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string());
  os << "P6\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
  for (double v : image.storage()) {
    const auto byte = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    os.put(static_cast<char>(byte));
  }
}

}  // namespace mim4d::scene
