// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mim4d/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace mim4d {

namespace {

struct Field {
  std::string key;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
  std::function<void(const Config&)> check;
};

std::string format_double(double v) {
  char buf[32];
  const auto end = std::to_chars(buf, buf + sizeof buf, v).ptr;
  return std::string(buf, end);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": cannot parse '" + text + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

template <class T>
Field number(const std::string& key, T Config::*member, T lo, T hi) {
  Field f;
  f.key = key;
  f.get = [member](const Config& c) {
    if constexpr (std::is_floating_point_v<T>) {
      return format_double(c.*member);
    } else {
      return std::to_string(c.*member);
    }
  };
  f.check = [key, member, lo, hi](const Config& c) {
    const T v = c.*member;
    if constexpr (std::is_floating_point_v<T>) {
      if (!std::isfinite(v)) throw ConfigError(key + " must be finite");
    }
    if (v < lo || v > hi) {
      throw ConfigError(key + "=" + std::to_string(v) + " outside [" + std::to_string(lo) + ", " +
                        std::to_string(hi) + "]");
    }
  };
  f.set = [key, member, check = f.check](Config& c, const std::string& text) {
    const T old = c.*member;
    c.*member = parse_number<T>(key, text);
    try {
      check(c);
    } catch (...) {
      c.*member = old;
      throw;
    }
  };
  return f;
}

Field boolean(const std::string& key, bool Config::*member) {
  Field f;
  f.key = key;
  f.get = [member](const Config& c) { return std::string(c.*member ? "true" : "false"); };
  f.set = [key, member](Config& c, const std::string& text) { c.*member = parse_bool(key, text); };
  f.check = [](const Config&) {};
  return f;
}

Field choice(const std::string& key, std::string Config::*member, std::vector<std::string> allowed) {
  Field f;
  f.key = key;
  f.get = [member](const Config& c) { return c.*member; };
  f.check = [key, member, allowed](const Config& c) {
    for (const auto& a : allowed)
      if (c.*member == a) return;
    throw ConfigError(key + ": unsupported value '" + c.*member + "'");
  };
  f.set = [member, check = f.check](Config& c, const std::string& text) {
    const std::string old = c.*member;
    c.*member = text;
    try {
      check(c);
    } catch (...) {
      c.*member = old;
      throw;
    }
  };
  return f;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    constexpr double kBig = 1e9;
    std::vector<Field> t;
    t.push_back(number("scene.views", &Config::views, 1, 16));
    t.push_back(number("scene.height", &Config::height, 4, 4096));
    t.push_back(number("scene.width", &Config::width, 4, 4096));
    t.push_back(number("scene.objects", &Config::objects, 0, 64));
    t.push_back(number("scene.ego_step", &Config::ego_step, -10.0, 10.0));
    t.push_back(number("scene.yaw_step", &Config::yaw_step, -1.0, 1.0));
    t.push_back(boolean("scene.moving_objects", &Config::moving_objects));
    t.push_back(number("scene.lidar_samples", &Config::lidar_samples, 1, 1 << 24));
    t.push_back(number("scene.clips", &Config::clips, 1, 100000));
    t.push_back(number("scene.frame_dt", &Config::frame_dt, 1e-3, 10.0));
    t.push_back(number("scene.max_depth", &Config::max_depth, 0.1, 1000.0));
    t.push_back(number("masking.supervision", &Config::supervision, 1, 1 << 20));
    t.push_back(number("masking.tau", &Config::tau, 1e-3, 1000.0));
    t.push_back(number("masking.s_ray", &Config::s_ray, 1, 256));
    t.push_back(number("masking.s_fill", &Config::s_fill, 1, 256));
    t.push_back(number("masking.ratio", &Config::ratio, 0.0, 1.0));
    t.push_back(number("encoder.channels", &Config::channels, 1, 512));
    t.push_back(number("encoder.backbone_width", &Config::backbone_width, 2, 512));
    t.push_back(number("encoder.nx", &Config::nx, 1, 1024));
    t.push_back(number("encoder.ny", &Config::ny, 1, 1024));
    t.push_back(number("encoder.nz", &Config::nz, 1, 256));
    t.push_back(number("encoder.x_min", &Config::x_min, -kBig, kBig));
    t.push_back(number("encoder.x_max", &Config::x_max, -kBig, kBig));
    t.push_back(number("encoder.y_min", &Config::y_min, -kBig, kBig));
    t.push_back(number("encoder.y_max", &Config::y_max, -kBig, kBig));
    t.push_back(number("encoder.z_min", &Config::z_min, -kBig, kBig));
    t.push_back(number("encoder.z_max", &Config::z_max, -kBig, kBig));
    t.push_back(number("encoder.depth_bins", &Config::depth_bins, 2, 1024));
    t.push_back(number("encoder.depth_min", &Config::depth_min, 1e-3, 1000.0));
    t.push_back(number("encoder.depth_max", &Config::depth_max, 1e-3, 1000.0));
    t.push_back(choice("temporal.strategy", &Config::strategy, {"none", "warp-cat", "short", "long", "both"}));
    t.push_back(number("temporal.window", &Config::window, 1, 64));
    t.push_back(number("temporal.heads", &Config::heads, 1, 64));
    t.push_back(number("temporal.points", &Config::points, 1, 64));
    t.push_back(number("temporal.query_dim", &Config::query_dim, 2, 1024));
    t.push_back(boolean("temporal.warpcat_identity", &Config::warpcat_identity));
    t.push_back(number("renderer.samples", &Config::samples, 2, 4096));
    t.push_back(number("renderer.near", &Config::near, 1e-4, 1000.0));
    t.push_back(number("renderer.far", &Config::far, 1e-4, 1000.0));
    t.push_back(number("renderer.lambda_rgb", &Config::lambda_rgb, 0.0, 1e6));
    t.push_back(number("renderer.lambda_depth", &Config::lambda_depth, 0.0, 1e6));
    t.push_back(number("renderer.a_init", &Config::a_init, 1e-6, 1e6));
    t.push_back(number("renderer.hidden", &Config::hidden, 1, 4096));
    t.push_back(number("renderer.geo_features", &Config::geo_features, 0, 1024));
    t.push_back(boolean("renderer.jitter", &Config::jitter));
    t.push_back(choice("renderer.sdf_init", &Config::sdf_init, {"plane", "random"}));
    t.push_back(number("optim.lr", &Config::lr, 0.0, 10.0));
    t.push_back(number("optim.weight_decay", &Config::weight_decay, 0.0, 10.0));
    t.push_back(number("optim.beta1", &Config::beta1, 0.0, 0.999999));
    t.push_back(number("optim.beta2", &Config::beta2, 0.0, 0.999999999));
    t.push_back(number("optim.eps", &Config::eps, 1e-16, 1.0));
    t.push_back(number("optim.steps", &Config::steps, 0, 100000000));
    t.push_back(number("optim.batch_clips", &Config::batch_clips, 1, 4096));
    t.push_back(number("optim.checkpoint_every", &Config::checkpoint_every, 0, 100000000));
    t.push_back(number<std::uint64_t>("train.seed", &Config::seed, 0, UINT64_MAX));
    t.push_back(number("train.threads", &Config::threads, 1, 256));
    t.push_back(number("train.ablate_steps", &Config::ablate_steps, 0, 100000000));
    return t;
  }();
  return table;
}

const Field& field(const std::string& key) {
  static const std::map<std::string, const Field*> index = [] {
    std::map<std::string, const Field*> m;
    for (const auto& f : fields()) m.emplace(f.key, &f);
    return m;
  }();
  const auto it = index.find(key);
  if (it == index.end()) throw ConfigError("unknown config key: " + key);
  return *it->second;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void Config::validate() const {
  for (const auto& f : fields()) f.check(*this);
  if (height % 4 != 0 || width % 4 != 0) throw ConfigError("scene.height and scene.width must be multiples of 4");
  if (!(x_min < x_max && y_min < y_max && z_min < z_max)) throw ConfigError("encoder extent needs min < max");
  if (!(depth_min < depth_max)) throw ConfigError("encoder.depth_min must be below encoder.depth_max");
  if (!(near < far)) throw ConfigError("renderer.near must be below renderer.far");
  try {
    temporal().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("temporal: ") + e.what());
  }
}

geometry::GridExtent Config::extent() const {
  geometry::GridExtent e;
  e.x_min = x_min;
  e.x_max = x_max;
  e.y_min = y_min;
  e.y_max = y_max;
  e.z_min = z_min;
  e.z_max = z_max;
  e.nx = nx;
  e.ny = ny;
  e.nz = nz;
  return e;
}

encoder::EncoderConfig Config::encoder() const {
  encoder::EncoderConfig e;
  e.channels = channels;
  e.backbone_width = backbone_width;
  e.depth_bins = depth_bins;
  e.depth_min = depth_min;
  e.depth_max = depth_max;
  e.extent = extent();
  return e;
}

temporal::TemporalConfig Config::temporal() const {
  temporal::TemporalConfig t;
  t.strategy = window == 1 ? temporal::Strategy::kNone : temporal::parse_strategy(strategy);
  t.window = window;
  t.heads = heads;
  t.points = points;
  t.query_dim = query_dim;
  t.channels = channels;
  t.extent = extent();
  t.warpcat_identity_init = warpcat_identity;
  return t;
}

render::RendererConfig Config::renderer() const {
  render::RendererConfig r;
  r.samples = samples;
  r.near = near;
  r.far = far;
  r.lambda_rgb = lambda_rgb;
  r.lambda_depth = lambda_depth;
  r.a_init = a_init;
  r.hidden = hidden;
  r.geo_features = geo_features;
  r.jitter = jitter;
  r.sdf_init = render::parse_sdf_init(sdf_init);
  return r;
}

scene::RenderSettings Config::render_settings() const {
  scene::RenderSettings s;
  s.window = window;
  s.height = height;
  s.width = width;
  s.lidar_samples_per_view = lidar_samples;
  s.frame_dt = frame_dt;
  s.max_depth = max_depth;
  s.seed = seed;
  s.threads = threads;
  s.extent = extent();
  return s;
}

void Config::set(const std::string& key, const std::string& value) { field(key).set(*this, value); }

std::string Config::get(const std::string& key) const { return field(key).get(*this); }

const std::vector<std::string>& Config::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return k;
}

std::string Config::serialize() const {
  std::string out;
  for (const auto& f : fields()) out += f.key + "=" + f.get(*this) + "\n";
  return out;
}

Config Config::parse(const std::string& text) {
  Config c;
  std::istringstream in(text);
  std::string line;
  std::map<std::string, int> seen;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    if (!seen.emplace(key, lineno).second) {
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key " + key);
    }
    try {
      c.set(key, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void Config::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write config " + path.string());
  out << serialize();
  if (!out) throw std::runtime_error("failed writing config " + path.string());
}

std::uint64_t Config::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char ch : serialize()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace mim4d
