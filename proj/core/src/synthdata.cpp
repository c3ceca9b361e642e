#include "anytraj/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace anytraj::synth {

namespace {

constexpr double kPi = 3.14159265358979323846;

double clampd(double v, double lo, double hi) {
  return std::min(std::max(v, lo), hi);
}

// Interval overlap length.
double overlap(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

// Alpha-composites an axis-aligned box blob of half-extent r at (cx, cy).
void paint_box(std::vector<double>& img, int h, int w, double cx, double cy,
               double r, const std::array<double, 3>& color) {
  int y0 = std::max(0, static_cast<int>(std::floor(cy - r)));
  int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + r)));
  int x0 = std::max(0, static_cast<int>(std::floor(cx - r)));
  int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + r)));
  for (int y = y0; y <= y1; ++y) {
    double wy = overlap(y, y + 1, cy - r, cy + r);
    for (int x = x0; x <= x1; ++x) {
      double a = wy * overlap(x, x + 1, cx - r, cx + r);
      if (a <= 0.0) continue;
      for (int c = 0; c < 3; ++c) {
        double& px = img[(static_cast<size_t>(y) * w + x) * 3 + c];
        px = px * (1.0 - a) + color[c] * a;
      }
    }
  }
}

struct ArcPath {
  double cx, cy, radius;
  double theta_start, sweep;  // signed

  static ArcPath between(double sx, double sy, double gx, double gy) {
    double dx = gx - sx, dy = gy - sy;
    double d = std::hypot(dx, dy);
    ArcPath arc;
    arc.radius = 0.75 * d;
    double half = d / 2.0;
    double h = std::sqrt(std::max(0.0, arc.radius * arc.radius - half * half));
    // perpendicular to the chord, fixed side
    double px = -dy / d, py = dx / d;
    arc.cx = (sx + gx) / 2.0 + px * h;
    arc.cy = (sy + gy) / 2.0 + py * h;
    double ts = std::atan2(sy - arc.cy, sx - arc.cx);
    double tg = std::atan2(gy - arc.cy, gx - arc.cx);
    double sweep = tg - ts;
    while (sweep > kPi) sweep -= 2.0 * kPi;
    while (sweep <= -kPi) sweep += 2.0 * kPi;
    arc.theta_start = ts;
    arc.sweep = sweep;
    return arc;
  }

  std::array<double, 2> at(double theta) const {
    return {cx + radius * std::cos(theta), cy + radius * std::sin(theta)};
  }
};

void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void write_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void write_f32(std::ostream& os, float v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
uint32_t read_u32(std::istream& is) {
  uint32_t v;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
uint64_t read_u64(std::istream& is) {
  uint64_t v;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
double read_f64(std::istream& is) {
  double v;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
float read_f32(std::istream& is) {
  float v;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

constexpr char kMagic[4] = {'A', 'T', 'E', 'P'};
constexpr uint32_t kEpisodeVersion = 1;

uint64_t fnv1a_update(uint64_t h, const char* data, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

const char* family_name(DynamicsFamily f) {
  switch (f) {
    case DynamicsFamily::linear_push: return "linear_push";
    case DynamicsFamily::arc_transport: return "arc_transport";
    case DynamicsFamily::two_phase_pick_place: return "two_phase_pick_place";
  }
  return "unknown";
}

World::World(const DomainSpec& spec, uint64_t seed) : spec_(spec) {
  if (spec.speed_scale <= 0.0)
    throw std::invalid_argument("DomainSpec: speed_scale must be positive");
  Rng rng(Rng::splitmix64(seed += 0x1000 * (spec.domain_id + 1)));
  double sz = spec.image_size;
  double margin = std::max(5.0, sz / 6.0);

  distractors_.clear();
  for (int i = 0; i < spec.distractor_count; ++i) {
    distractors_.push_back({rng.uniform(margin / 2, sz - margin / 2),
                            rng.uniform(margin / 2, sz - margin / 2), 0.35,
                            0.3 + 0.2 * rng.uniform(),
                            0.35 + 0.2 * rng.uniform()});
  }

  double sx = rng.uniform(margin, sz - margin);
  double sy = rng.uniform(margin, sz - margin);
  double gx = 0, gy = 0;
  for (int attempt = 0; attempt < 64; ++attempt) {
    gx = rng.uniform(margin, sz - margin);
    gy = rng.uniform(margin, sz - margin);
    if (std::hypot(gx - sx, gy - sy) >= sz / 3.0) break;
  }
  if (std::isfinite(spec.fixed_start_x)) sx = spec.fixed_start_x;
  if (std::isfinite(spec.fixed_start_y)) sy = spec.fixed_start_y;
  if (std::isfinite(spec.fixed_goal_x)) gx = spec.fixed_goal_x;
  if (std::isfinite(spec.fixed_goal_y)) gy = spec.fixed_goal_y;

  state_ = {sx, sy, 0.0};
  goal_x_ = gx;
  goal_y_ = gy;
  // two-phase waypoint: offset from the midpoint, kept inside the frame
  double mx = (sx + gx) / 2.0, my = (sy + gy) / 2.0;
  double d = std::hypot(gx - sx, gy - sy);
  pick_x_ = clampd(mx - (gy - sy) / d * 0.3 * d, 3.0, sz - 3.0);
  pick_y_ = clampd(my + (gx - sx) / d * 0.3 * d, 3.0, sz - 3.0);
  step_len_ = 1.2 * spec.speed_scale;
}

std::vector<double> World::render_static() const {
  int h = spec_.image_size, w = spec_.image_size;
  std::vector<double> img(static_cast<size_t>(h) * w * 3);
  for (int i = 0; i < h * w; ++i)
    for (int c = 0; c < 3; ++c) img[i * 3 + c] = spec_.background[c];
  for (const auto& d : distractors_)
    paint_box(img, h, w, d[0], d[1], 1.2, {d[2], d[3], d[4]});
  paint_box(img, h, w, goal_x_, goal_y_, 1.0, {0.2, 0.55, 0.3});
  return img;
}

std::vector<double> World::render() const {
  auto img = render_static();
  paint_box(img, spec_.image_size, spec_.image_size, state_.x, state_.y,
            radius_, spec_.target_color);
  return img;
}

void World::step(const Action& a) {
  double sz = spec_.image_size;
  state_.x = clampd(state_.x + a.dx, 1.0, sz - 1.0);
  state_.y = clampd(state_.y + a.dy, 1.0, sz - 1.0);
  state_.grasp = a.grasp > 0.5 ? 1.0 : 0.0;
}

double World::goal_distance() const {
  return std::hypot(state_.x - goal_x_, state_.y - goal_y_);
}

bool World::success() const { return goal_distance() <= 2.0; }

Action World::expert_action() const {
  auto move_toward = [&](double tx, double ty, double grasp) {
    double dx = tx - state_.x, dy = ty - state_.y;
    double d = std::hypot(dx, dy);
    Action a;
    a.grasp = grasp;
    if (d < 1e-12) return a;
    double s = std::min(step_len_, d);
    a.dx = dx / d * s;
    a.dy = dy / d * s;
    return a;
  };

  switch (spec_.family) {
    case DynamicsFamily::linear_push:
      return move_toward(goal_x_, goal_y_, 0.0);
    case DynamicsFamily::two_phase_pick_place: {
      if (state_.grasp < 0.5 &&
          std::hypot(state_.x - pick_x_, state_.y - pick_y_) > 1e-9)
        return move_toward(pick_x_, pick_y_, 0.0);
      return move_toward(goal_x_, goal_y_, 1.0);
    }
    case DynamicsFamily::arc_transport: {
      double gd = goal_distance();
      if (gd < 1e-12) return {0.0, 0.0, 0.0};
      // Follow the circle through the scene's start and goal; if off-path
      // (external actions moved the object) fall back to a straight step.
      ArcPath arc = ArcPath::between(state_.x, state_.y, goal_x_, goal_y_);
      double dtheta = step_len_ / arc.radius;
      double sweep = arc.sweep;
      if (std::abs(sweep) <= dtheta || gd <= step_len_)
        return move_toward(goal_x_, goal_y_, 0.0);
      double theta = arc.theta_start + (sweep > 0 ? dtheta : -dtheta);
      auto next = arc.at(theta);
      return {next[0] - state_.x, next[1] - state_.y, 0.0};
    }
  }
  return {};
}

Episode generate_episode(const DomainSpec& spec, uint64_t task_seed,
                         double action_noise) {
  World world(spec, task_seed);
  Rng noise_rng = Rng(task_seed).stream("action-noise");
  Episode ep;
  ep.domain_id = static_cast<uint32_t>(spec.domain_id);
  ep.instruction_id = static_cast<uint32_t>(spec.instruction_id);
  ep.family = static_cast<uint32_t>(spec.family);
  ep.seed = task_seed;
  ep.length = spec.episode_len;
  ep.height = ep.width = spec.image_size;
  ep.goal_x = world.goal_x();
  ep.goal_y = world.goal_y();
  ep.radius = world.radius();
  ep.speed_scale = spec.speed_scale;

  for (int t = 0; t < spec.episode_len; ++t) {
    ep.frames.push_back(world.render());
    ep.states.push_back(world.state());
    if (t + 1 < spec.episode_len) {
      Action a = world.expert_action();
      if (action_noise > 0.0) {
        a.dx += action_noise * noise_rng.gaussian();
        a.dy += action_noise * noise_rng.gaussian();
      }
      world.step(a);
      if (spec.in_domain) ep.actions.push_back(a);
    }
  }
  return ep;
}

TrajectoryPrediction ground_truth_tracks(const Episode& ep,
                                         const TrajectoryQuery& query,
                                         int64_t horizon) {
  int64_t t0 = query.timestep;
  if (t0 < 0 || t0 + horizon >= ep.length)
    throw std::out_of_range("ground_truth_tracks: horizon exceeds episode");
  int64_t k = query.num_points();
  auto pred = TrajectoryPrediction::zeros(horizon, k);
  const auto& s0 = ep.states[static_cast<size_t>(t0)];
  for (int64_t i = 0; i < k; ++i) {
    double px = query.points[i][0] * ep.width;
    double py = query.points[i][1] * ep.height;
    bool on_target = std::abs(px - s0.x) <= ep.radius &&
                     std::abs(py - s0.y) <= ep.radius;
    for (int64_t h = 0; h < horizon; ++h) {
      double x = px, y = py;
      if (on_target) {
        const auto& st = ep.states[static_cast<size_t>(t0 + h + 1)];
        x += st.x - s0.x;
        y += st.y - s0.y;
      }
      pred.at(h, i, 0) = x / ep.width;
      pred.at(h, i, 1) = y / ep.height;
    }
  }
  return pred;
}

TrajectoryQuery sample_points_variance_filter(
    const std::vector<std::vector<double>>& frames, int height, int width,
    int64_t k, Rng& rng) {
  if (k <= 0) throw std::invalid_argument("variance filter: K must be positive");
  if (frames.size() < 2)
    throw std::invalid_argument("variance filter: need at least two frames");
  size_t npix = static_cast<size_t>(height) * width;
  std::vector<double> mean(npix, 0.0), m2(npix, 0.0);
  for (const auto& f : frames) {
    for (size_t i = 0; i < npix; ++i) {
      double v = (f[i * 3] + f[i * 3 + 1] + f[i * 3 + 2]) / 3.0;
      mean[i] += v;
      m2[i] += v * v;
    }
  }
  double n = static_cast<double>(frames.size());
  std::vector<double> cdf(npix);
  double total = 0.0;
  for (size_t i = 0; i < npix; ++i) {
    double mu = mean[i] / n;
    double var = std::max(0.0, m2[i] / n - mu * mu);
    total += var + 1e-6;
    cdf[i] = total;
  }
  TrajectoryQuery q;
  for (int64_t j = 0; j < k; ++j) {
    double u = rng.uniform() * total;
    size_t i = static_cast<size_t>(
        std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    if (i >= npix) i = npix - 1;
    double x = static_cast<double>(i % width) + 0.5;
    double y = static_cast<double>(i / width) + 0.5;
    q.points.push_back({x / width, y / height});
  }
  return q;
}

TrajectoryQuery sample_points_grid(int64_t k, int height, int width) {
  (void)height;
  (void)width;
  int64_t cols = static_cast<int64_t>(std::floor(std::sqrt(static_cast<double>(k))));
  while (cols > 1 && k % cols != 0) --cols;
  int64_t rows = k / cols;  // rows >= cols; K=32 -> 8x4
  TrajectoryQuery q;
  for (int64_t iy = 0; iy < rows; ++iy)
    for (int64_t ix = 0; ix < cols; ++ix)
      q.points.push_back({(ix + 0.5) / cols, (iy + 0.5) / rows});
  return q;
}

void save_episode(const Episode& ep, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string());
  os.write(kMagic, 4);
  write_u32(os, kEpisodeVersion);
  write_u32(os, static_cast<uint32_t>(ep.length));
  write_u32(os, static_cast<uint32_t>(ep.height));
  write_u32(os, static_cast<uint32_t>(ep.width));
  write_u32(os, ep.domain_id);
  write_u32(os, ep.instruction_id);
  write_u32(os, ep.family);
  write_u32(os, ep.has_actions() ? 1u : 0u);
  write_u64(os, ep.seed);
  write_f64(os, ep.goal_x);
  write_f64(os, ep.goal_y);
  write_f64(os, ep.radius);
  write_f64(os, ep.speed_scale);
  for (const auto& f : ep.frames)
    for (double v : f) write_f32(os, static_cast<float>(v));
  for (const auto& s : ep.states) {
    write_f64(os, s.x);
    write_f64(os, s.y);
    write_f64(os, s.grasp);
  }
  for (const auto& a : ep.actions) {
    write_f64(os, a.dx);
    write_f64(os, a.dy);
    write_f64(os, a.grasp);
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Episode load_episode(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("bad episode magic in " + path.string());
  if (read_u32(is) != kEpisodeVersion)
    throw std::runtime_error("unsupported episode version in " + path.string());
  Episode ep;
  ep.length = static_cast<int32_t>(read_u32(is));
  ep.height = static_cast<int32_t>(read_u32(is));
  ep.width = static_cast<int32_t>(read_u32(is));
  ep.domain_id = read_u32(is);
  ep.instruction_id = read_u32(is);
  ep.family = read_u32(is);
  bool has_actions = read_u32(is) != 0;
  ep.seed = read_u64(is);
  ep.goal_x = read_f64(is);
  ep.goal_y = read_f64(is);
  ep.radius = read_f64(is);
  ep.speed_scale = read_f64(is);
  size_t frame_len = static_cast<size_t>(ep.height) * ep.width * 3;
  for (int t = 0; t < ep.length; ++t) {
    std::vector<double> f(frame_len);
    for (auto& v : f) v = static_cast<double>(read_f32(is));
    ep.frames.push_back(std::move(f));
  }
  for (int t = 0; t < ep.length; ++t) {
    ObjectState s;
    s.x = read_f64(is);
    s.y = read_f64(is);
    s.grasp = read_f64(is);
    ep.states.push_back(s);
  }
  if (has_actions) {
    for (int t = 0; t + 1 < ep.length; ++t) {
      Action a;
      a.dx = read_f64(is);
      a.dy = read_f64(is);
      a.grasp = read_f64(is);
      ep.actions.push_back(a);
    }
  }
  if (!is) throw std::runtime_error("truncated episode file: " + path.string());
  return ep;
}

std::vector<DomainSpec> desk_domains(const DatasetOptions& opts) {
  std::vector<DomainSpec> specs;
  auto palette = [](int i) -> std::array<double, 3> {
    static const std::array<double, 3> bgs[] = {
        {0.08, 0.08, 0.10}, {0.10, 0.07, 0.07}, {0.06, 0.10, 0.08},
        {0.09, 0.09, 0.05}, {0.05, 0.07, 0.11}, {0.11, 0.06, 0.10}};
    return bgs[i % 6];
  };
  auto target = [](int i) -> std::array<double, 3> {
    static const std::array<double, 3> cols[] = {
        {0.95, 0.75, 0.15}, {0.90, 0.25, 0.20}, {0.25, 0.80, 0.90},
        {0.80, 0.40, 0.85}, {0.35, 0.90, 0.35}};
    return cols[i % 5];
  };

  int id = 0;
  for (int i = 0; i < opts.in_domain_tasks; ++i, ++id) {
    DomainSpec s;
    s.domain_id = s.instruction_id = id;
    s.family = DynamicsFamily::two_phase_pick_place;
    s.speed_scale = 1.0;
    s.background = palette(i);
    s.target_color = target(i);
    s.distractor_count = 2;
    s.image_size = opts.image_size;
    s.episode_len = opts.episode_len;
    s.in_domain = true;
    specs.push_back(s);
  }
  if (!opts.include_ood) return specs;

  // The transfer domains are deliberately adversarial for co-training: they
  // look exactly like the in-domain scenes (same palette, clutter, and
  // target colors) but move differently, so the frame alone never determines
  // the motion and the instruction-to-dynamics mapping competes for model
  // capacity.
  static const double speeds[] = {1.2, 1.6, 2.0, 2.6, 3.2, 4.0};
  for (int i = 0; i < opts.out_of_domain_tasks; ++i, ++id) {
    DomainSpec s;
    s.domain_id = s.instruction_id = id;
    s.family = (i % 3 == 2) ? DynamicsFamily::two_phase_pick_place
               : (i % 2 == 0) ? DynamicsFamily::linear_push
                              : DynamicsFamily::arc_transport;
    s.speed_scale = speeds[i % 6];
    s.background = palette(i % 2);
    s.target_color = target(i % 2);
    s.distractor_count = 3 + i % 3;
    s.image_size = opts.image_size;
    s.episode_len = opts.episode_len;
    s.in_domain = false;
    specs.push_back(s);
  }
  return specs;
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& e : episodes) {
    eps.push_back({{"file", e.file},
                   {"domain_id", e.domain_id},
                   {"instruction_id", e.instruction_id},
                   {"family", e.family},
                   {"split", e.split},
                   {"domain_kind", e.domain_kind},
                   {"seed", e.seed}});
  }
  return nlohmann::json{{"version", 1},
                        {"seed", seed},
                        {"in_domain_tasks", in_domain_tasks},
                        {"out_of_domain_tasks", out_of_domain_tasks},
                        {"episodes_per_task", episodes_per_task},
                        {"image_size", image_size},
                        {"episode_len", episode_len},
                        {"digest", digest},
                        {"params", params},
                        {"episodes", eps}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.seed = j.at("seed").get<uint64_t>();
  m.in_domain_tasks = j.at("in_domain_tasks").get<int>();
  m.out_of_domain_tasks = j.at("out_of_domain_tasks").get<int>();
  m.episodes_per_task = j.at("episodes_per_task").get<int>();
  m.image_size = j.at("image_size").get<int>();
  m.episode_len = j.at("episode_len").get<int>();
  m.digest = j.at("digest").get<std::string>();
  m.params = j.at("params");
  for (const auto& e : j.at("episodes")) {
    ManifestEntry me;
    me.file = e.at("file").get<std::string>();
    me.domain_id = e.at("domain_id").get<uint32_t>();
    me.instruction_id = e.at("instruction_id").get<uint32_t>();
    me.family = e.at("family").get<std::string>();
    me.split = e.at("split").get<std::string>();
    me.domain_kind = e.at("domain_kind").get<std::string>();
    me.seed = e.at("seed").get<uint64_t>();
    m.episodes.push_back(std::move(me));
  }
  return m;
}

DatasetManifest build_dataset(const std::vector<DomainSpec>& specs,
                              const DatasetOptions& opts, uint64_t seed,
                              const std::filesystem::path& out_dir) {
  if (opts.episodes_per_task <= 0 || opts.validation_per_task < 0 ||
      opts.validation_per_task >= opts.episodes_per_task)
    throw std::invalid_argument("build_dataset: bad episode counts");
  std::filesystem::create_directories(out_dir);

  DatasetManifest m;
  m.seed = seed;
  m.episodes_per_task = opts.episodes_per_task;
  m.image_size = opts.image_size;
  m.episode_len = opts.episode_len;
  for (const auto& s : specs)
    (s.in_domain ? m.in_domain_tasks : m.out_of_domain_tasks)++;

  nlohmann::json spec_params = nlohmann::json::array();
  for (const auto& s : specs) {
    spec_params.push_back({{"domain_id", s.domain_id},
                           {"instruction_id", s.instruction_id},
                           {"family", family_name(s.family)},
                           {"speed_scale", s.speed_scale},
                           {"distractor_count", s.distractor_count},
                           {"in_domain", s.in_domain}});
  }
  m.params = {{"episodes_per_task", opts.episodes_per_task},
              {"validation_per_task", opts.validation_per_task},
              {"image_size", opts.image_size},
              {"episode_len", opts.episode_len},
              {"include_ood", opts.include_ood},
              {"domains", spec_params}};

  uint64_t digest = 0xcbf29ce484222325ULL;
  int global_idx = 0;
  for (const auto& s : specs) {
    for (int i = 0; i < opts.episodes_per_task; ++i, ++global_idx) {
      uint64_t x = seed + 0x9e37ULL * static_cast<uint64_t>(global_idx + 1);
      uint64_t ep_seed = Rng::splitmix64(x);
      Episode ep = generate_episode(s, ep_seed);
      char name[32];
      std::snprintf(name, sizeof name, "ep_%04d.bin", global_idx);
      save_episode(ep, out_dir / name);

      std::ifstream is(out_dir / name, std::ios::binary);
      std::ostringstream buf;
      buf << is.rdbuf();
      std::string bytes = buf.str();
      digest = fnv1a_update(digest, bytes.data(), bytes.size());

      ManifestEntry e;
      e.file = name;
      e.domain_id = static_cast<uint32_t>(s.domain_id);
      e.instruction_id = static_cast<uint32_t>(s.instruction_id);
      e.family = family_name(s.family);
      e.split = (i >= opts.episodes_per_task - opts.validation_per_task)
                    ? "validation"
                    : "train";
      e.domain_kind = s.in_domain ? "in_domain" : "out_of_domain";
      e.seed = ep_seed;
      m.episodes.push_back(std::move(e));
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx",
                static_cast<unsigned long long>(digest));
  m.digest = hex;
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j;
  is >> j;
  return DatasetManifest::from_json(j);
}

void save_manifest(const DatasetManifest& m,
                   const std::filesystem::path& path) {
  std::ofstream os(path);
  os << m.to_json().dump(2) << "\n";
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace anytraj::synth
