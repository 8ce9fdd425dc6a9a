#include "crowdiv/sim.hpp"

#include <algorithm>
#include <limits>

namespace crowdiv::sim {

namespace {

void require(bool ok, const char* field, const char* what) {
  if (!ok) throw std::invalid_argument(std::string(field) + ": " + what);
}

constexpr int kMaxSpawnAttempts = 10'000;

Rect inner_region(const Rect& bounds, double margin) {
  return {{bounds.lo.x + margin, bounds.lo.y + margin}, {bounds.hi.x - margin, bounds.hi.y - margin}};
}

Vec2 uniform_point(const Rect& r, Rng& rng) {
  std::uniform_real_distribution<double> ux(r.lo.x, r.hi.x);
  std::uniform_real_distribution<double> uy(r.lo.y, r.hi.y);
  const double x = ux(rng);
  const double y = uy(rng);
  return {x, y};
}

double obstacle_clearance(Vec2 p, std::span<const Circle> circles, std::span<const Rect> rects) {
  double d = std::numeric_limits<double>::infinity();
  for (const auto& c : circles) d = std::min(d, (p - c.center).norm() - c.radius);
  for (const auto& r : rects) d = std::min(d, distance_to_rect(p, r));
  return d;
}

}  // namespace

void SimConfig::validate() const {
  require(dt > 0.0, "dt", "must be > 0");
  require(v_max > 0.0, "v_max", "must be > 0");
  require(w_max > 0.0, "w_max", "must be > 0");
  require(n_beams >= 1, "n_beams", "must be >= 1");
  require(max_range > 0.0, "max_range", "must be > 0");
  require(noise_std >= 0.0, "noise_std", "must be >= 0");
  require(k_frames >= 1, "k_frames", "must be >= 1");
  require(max_steps >= 1, "max_steps", "must be >= 1");
  require(room_width > 2.0 * wall_margin, "room_width", "must exceed twice wall_margin");
  require(room_height > 2.0 * wall_margin, "room_height", "must exceed twice wall_margin");
  require(agent_radius > 0.0, "agent_radius", "must be > 0");
  require(spawn_clearance > 0.0, "spawn_clearance", "must be > 0");
  require(min_goal_distance >= 0.0, "min_goal_distance", "must be >= 0");
  require(wall_margin >= 0.0, "wall_margin", "must be >= 0");
}

void RewardConfig::validate() const {
  require(r_goal > 0.0, "r_goal", "must be > 0");
  require(r_col < 0.0, "r_col", "must be < 0");
  require(r_step > 0.0, "r_step", "must be > 0");
  require(d_col > 0.0, "d_col", "must be > 0");
  require(crash_range >= 0.0, "crash_range", "must be >= 0");
}

double LidarScan::min_range() const {
  return ranges.empty() ? max_range : *std::min_element(ranges.begin(), ranges.end());
}

std::vector<double> Observation::features(double max_range, double v_max, double w_max) const {
  std::vector<double> f;
  f.reserve(scan_stack.size() + 4);
  f.insert(f.end(), scan_stack.begin(), scan_stack.end());
  f.push_back(goal_distance / max_range);
  f.push_back(goal_bearing / std::numbers::pi);
  f.push_back(linear_vel / v_max);
  f.push_back(angular_vel / w_max);
  return f;
}

std::string AgentEvent::name() const {
  if (reached_goal) return "goal";
  if (collided) return "collision";
  if (timed_out) return "timeout";
  return "";
}

Pose integrate_unicycle(const Pose& pose, double v, double w, double dt) {
  Pose out;
  const double th = pose.heading;
  if (std::abs(w) < 1e-9) {
    out.x = pose.x + v * dt * std::cos(th);
    out.y = pose.y + v * dt * std::sin(th);
    out.heading = wrap_angle(th + w * dt);
    return out;
  }
  const double th1 = th + w * dt;
  const double r = v / w;
  out.x = pose.x + r * (std::sin(th1) - std::sin(th));
  out.y = pose.y - r * (std::cos(th1) - std::cos(th));
  out.heading = wrap_angle(th1);
  return out;
}

std::vector<double> cast_rays(const World& world, std::size_t agent_index, int n_beams,
                              double max_range) {
  const AgentState& self = world.agents.at(agent_index);
  const Vec2 origin = self.pose.position();
  std::vector<Circle> targets;
  targets.reserve(world.agents.size() + world.circles.size());
  for (std::size_t j = 0; j < world.agents.size(); ++j) {
    const auto& a = world.agents[j];
    if (j == agent_index || !a.alive || !a.visible) continue;
    targets.push_back({a.pose.position(), a.radius});
  }
  targets.insert(targets.end(), world.circles.begin(), world.circles.end());

  std::vector<double> ranges(static_cast<std::size_t>(n_beams), max_range);
  const double step = 2.0 * std::numbers::pi / n_beams;
  for (int i = 0; i < n_beams; ++i) {
    const Vec2 dir = unit_from_angle(self.pose.heading + step * i);
    double best = max_range;
    if (auto t = ray_rect(origin, dir, world.bounds)) best = std::min(best, *t);
    for (const auto& c : targets) {
      if (auto t = ray_circle(origin, dir, c)) best = std::min(best, *t);
    }
    for (const auto& r : world.rects) {
      if (auto t = ray_rect(origin, dir, r)) best = std::min(best, *t);
    }
    ranges[static_cast<std::size_t>(i)] = best;
  }
  return ranges;
}

LidarScan lidar_scan(const World& world, std::size_t agent_index, int n_beams, double max_range,
                     double noise_std, Rng& rng) {
  LidarScan scan{cast_rays(world, agent_index, n_beams, max_range), max_range};
  apply_lidar_noise(scan.ranges, max_range, noise_std, rng);
  return scan;
}

void apply_lidar_noise(std::vector<double>& ranges, double max_range, double noise_std, Rng& rng) {
  if (noise_std <= 0.0) return;
  std::normal_distribution<double> noise(0.0, noise_std);
  for (double& r : ranges) r = std::clamp(r + noise(rng), 0.01, max_range);
}

bool disc_overlap(const World& world, std::size_t agent_index) {
  const AgentState& self = world.agents.at(agent_index);
  const Vec2 p = self.pose.position();
  for (std::size_t j = 0; j < world.agents.size(); ++j) {
    const auto& a = world.agents[j];
    if (j == agent_index || !a.alive) continue;
    if ((p - a.pose.position()).norm() < self.radius + a.radius) return true;
  }
  for (const auto& c : world.circles) {
    if ((p - c.center).norm() < self.radius + c.radius) return true;
  }
  for (const auto& r : world.rects) {
    if (distance_to_rect(p, r) < self.radius) return true;
  }
  if (!world.bounds.contains(p) || distance_to_rect_boundary_from_inside(p, world.bounds) < self.radius) {
    return true;
  }
  return false;
}

StepEvents step_world(World& world, std::span<const Command> commands, const RewardConfig& reward,
                      const SimConfig& cfg,
                      std::vector<std::vector<double>>* clean_scans) {
  if (commands.size() != world.agents.size()) {
    throw SimError("step_world: expected " + std::to_string(world.agents.size()) +
                   " commands, got " + std::to_string(commands.size()));
  }
  for (std::size_t i = 0; i < world.agents.size(); ++i) {
    AgentState& a = world.agents[i];
    if (!a.alive) continue;
    const double v = std::clamp(commands[i].v, 0.0, cfg.v_max * a.speed_scale);
    const double w = std::clamp(commands[i].w, -cfg.w_max, cfg.w_max);
    a.pose = integrate_unicycle(a.pose, v, w, world.dt);
    a.linear_vel = v;
    a.angular_vel = w;
    ++a.episode_steps;
  }
  ++world.steps;

  StepEvents events;
  events.agents.resize(world.agents.size());
  if (clean_scans) clean_scans->assign(world.agents.size(), {});
  for (std::size_t i = 0; i < world.agents.size(); ++i) {
    const AgentState& a = world.agents[i];
    if (!a.alive) continue;
    AgentEvent& ev = events.agents[i];
    if ((a.pose.position() - a.goal).norm() < reward.d_col) {
      ev.reached_goal = true;
      continue;
    }
    auto ranges = cast_rays(world, i, cfg.n_beams, cfg.max_range);
    const double min_r = *std::min_element(ranges.begin(), ranges.end());
    if (clean_scans) (*clean_scans)[i] = std::move(ranges);
    if (min_r < reward.crash_range || disc_overlap(world, i)) {
      ev.collided = true;
      continue;
    }
    if (a.episode_steps >= cfg.max_steps) ev.timed_out = true;
  }
  return events;
}

double compute_reward(const AgentState& prev, const AgentState& next, const AgentEvent& events,
                      const RewardConfig& cfg) {
  if (events.reached_goal) return cfg.r_goal;
  if (events.collided) return cfg.r_col;
  const double before = (prev.pose.position() - prev.goal).norm();
  const double after = (next.pose.position() - next.goal).norm();
  return cfg.r_step * (before - after);
}

Observation build_observation(std::span<const LidarScan> history, const AgentState& agent,
                              int k_frames) {
  if (history.empty()) throw SimError("build_observation: empty scan history");
  if (k_frames < 1) throw SimError("build_observation: k_frames must be >= 1");
  Observation obs;
  obs.k_frames = k_frames;
  obs.n_beams = history.front().n_beams();
  obs.scan_stack.reserve(static_cast<std::size_t>(k_frames * obs.n_beams));
  const int have = static_cast<int>(history.size());
  for (int f = 0; f < k_frames; ++f) {
    // Frame f of the stack maps to history index (have - k_frames + f),
    // clamped to the earliest available scan.
    const int idx = std::max(0, have - k_frames + f);
    const LidarScan& s = history[static_cast<std::size_t>(idx)];
    if (s.n_beams() != obs.n_beams) throw SimError("build_observation: inconsistent beam counts");
    for (double r : s.ranges) obs.scan_stack.push_back(r / s.max_range);
  }
  const Vec2 rel = agent.goal - agent.pose.position();
  obs.goal_distance = rel.norm();
  obs.goal_bearing = wrap_angle(std::atan2(rel.y, rel.x) - agent.pose.heading);
  obs.linear_vel = agent.linear_vel;
  obs.angular_vel = agent.angular_vel;
  return obs;
}

namespace {

bool try_place(World& world, std::size_t index, const SimConfig& cfg,
               std::span<const Circle> circles, std::span<const Rect> rects, Rng& rng) {
  const Rect region = inner_region(world.bounds, cfg.wall_margin);
  for (int attempt = 0; attempt < kMaxSpawnAttempts; ++attempt) {
    const Vec2 p = uniform_point(region, rng);
    const Vec2 g = uniform_point(region, rng);
    std::uniform_real_distribution<double> uh(-std::numbers::pi, std::numbers::pi);
    const double heading = wrap_angle(uh(rng));
    if ((p - g).norm() < cfg.min_goal_distance) continue;
    if (obstacle_clearance(p, circles, rects) < cfg.wall_margin) continue;
    if (obstacle_clearance(g, circles, rects) < cfg.agent_radius + 0.5) continue;
    bool clear = true;
    for (std::size_t j = 0; j < world.agents.size(); ++j) {
      if (j == index || !world.agents[j].alive) continue;
      if ((world.agents[j].pose.position() - p).norm() < cfg.spawn_clearance) {
        clear = false;
        break;
      }
    }
    if (!clear) continue;
    AgentState& a = world.agents[index];
    a.pose = {p.x, p.y, heading};
    a.goal = g;
    a.linear_vel = 0.0;
    a.angular_vel = 0.0;
    a.radius = cfg.agent_radius;
    a.alive = true;
    a.episode_steps = 0;
    return true;
  }
  return false;
}

}  // namespace

World spawn_episode(const SpawnConfig& cfg, Rng& rng) {
  cfg.sim.validate();
  if (cfg.n_agents < 1) throw SimError("spawn_episode: n_agents must be >= 1");
  World world;
  world.bounds = {{0.0, 0.0}, {cfg.sim.room_width, cfg.sim.room_height}};
  world.circles = cfg.circles;
  world.rects = cfg.rects;
  world.dt = cfg.sim.dt;
  world.agents.resize(static_cast<std::size_t>(cfg.n_agents));
  // Mark all agents dead until placed so clearance only checks placed ones.
  for (auto& a : world.agents) a.alive = false;
  for (std::size_t i = 0; i < world.agents.size(); ++i) {
    if (!try_place(world, i, cfg.sim, cfg.circles, cfg.rects, rng)) {
      throw SimError("spawn_episode: no valid placement for agent " + std::to_string(i) +
                     " after 10000 attempts (room over-packed)");
    }
  }
  world.rng.seed(rng());
  return world;
}

void respawn_agent(World& world, std::size_t index, const SimConfig& cfg, Rng& rng) {
  world.agents.at(index).alive = false;
  if (!try_place(world, index, cfg, world.circles, world.rects, rng)) {
    throw SimError("respawn_agent: no valid placement for agent " + std::to_string(index) +
                   " after 10000 attempts (room over-packed)");
  }
}

}  // namespace crowdiv::sim
