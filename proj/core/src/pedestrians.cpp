#include "crowdiv/pedestrians.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace crowdiv::ped {

namespace {

constexpr double kEps = 1e-12;

void require_positive(double v, const char* field) {
  if (!(v > 0.0)) throw std::invalid_argument(std::string(field) + ": must be > 0");
}

Vec2 random_unit(Rng& rng) {
  std::uniform_real_distribution<double> u(-std::numbers::pi, std::numbers::pi);
  return unit_from_angle(u(rng));
}

// Repulsion pushing p away from a point q at distance d, with combined radius r.
Vec2 repel_from(Vec2 p, Vec2 q, double r, double strength, double range, Rng& rng) {
  const Vec2 sep = p - q;
  const double d = sep.norm();
  const Vec2 n = d > kEps ? sep / d : random_unit(rng);
  return n * repulsion_magnitude(strength, range, r, d);
}

// Solves the 1D program restricted to line `index`, subject to the lines
// before it and the speed disc. Returns false when infeasible.
bool solve_on_line(std::span<const HalfPlane> planes, std::size_t index, double radius, Vec2 target,
                   bool direction_mode, Vec2& result) {
  const HalfPlane& line = planes[index];
  const double d = dot(line.point, line.direction);
  const double disc = d * d + radius * radius - line.point.squared_norm();
  if (disc < 0.0) return false;
  const double sq = std::sqrt(disc);
  double t_left = -d - sq;
  double t_right = -d + sq;
  for (std::size_t i = 0; i < index; ++i) {
    const double denom = cross(line.direction, planes[i].direction);
    const double numer = cross(planes[i].direction, line.point - planes[i].point);
    if (std::abs(denom) <= kEps) {
      if (numer < 0.0) return false;  // parallel and entirely forbidden
      continue;
    }
    const double t = numer / denom;
    if (denom >= 0.0) {
      t_right = std::min(t_right, t);
    } else {
      t_left = std::max(t_left, t);
    }
    if (t_left > t_right) return false;
  }
  if (direction_mode) {
    result = line.point + line.direction * (dot(target, line.direction) > 0.0 ? t_right : t_left);
  } else {
    const double t = std::clamp(dot(line.direction, target - line.point), t_left, t_right);
    result = line.point + line.direction * t;
  }
  return true;
}

// Returns planes.size() on success, otherwise the index of the first
// half-plane that could not be satisfied.
std::size_t solve_program(std::span<const HalfPlane> planes, double radius, Vec2 target,
                          bool direction_mode, Vec2& result) {
  if (direction_mode) {
    result = target * radius;
  } else if (target.squared_norm() > radius * radius) {
    result = target / target.norm() * radius;
  } else {
    result = target;
  }
  for (std::size_t i = 0; i < planes.size(); ++i) {
    if (planes[i].violation(result) > 0.0) {
      const Vec2 previous = result;
      if (!solve_on_line(planes, i, radius, target, direction_mode, result)) {
        result = previous;
        return i;
      }
    }
  }
  return planes.size();
}

// Minimizes the maximum violation over planes[begin..] given that
// planes[..begin) failed to be jointly satisfied.
void minimize_violation(std::span<const HalfPlane> planes, std::size_t begin, double radius,
                        Vec2& result) {
  double distance = 0.0;
  for (std::size_t i = begin; i < planes.size(); ++i) {
    if (planes[i].violation(result) <= distance) continue;
    std::vector<HalfPlane> projected;
    projected.reserve(i);
    for (std::size_t j = 0; j < i; ++j) {
      HalfPlane line;
      const double det = cross(planes[i].direction, planes[j].direction);
      if (std::abs(det) <= kEps) {
        if (dot(planes[i].direction, planes[j].direction) > 0.0) continue;
        line.point = (planes[i].point + planes[j].point) * 0.5;
      } else {
        line.point = planes[i].point +
                     planes[i].direction *
                         (cross(planes[j].direction, planes[i].point - planes[j].point) / det);
      }
      const Vec2 dir = planes[j].direction - planes[i].direction;
      line.direction = dir / dir.norm();
      projected.push_back(line);
    }
    const Vec2 previous = result;
    const Vec2 inward{-planes[i].direction.y, planes[i].direction.x};
    if (solve_program(projected, radius, inward, true, result) < projected.size()) {
      result = previous;
    }
    distance = planes[i].violation(result);
  }
}

}  // namespace

void SocialForceParams::validate() const {
  require_positive(relaxation_time, "relaxation_time");
  require_positive(desired_speed, "desired_speed");
  require_positive(interaction_strength, "interaction_strength");
  require_positive(interaction_range, "interaction_range");
  require_positive(obstacle_strength, "obstacle_strength");
  require_positive(obstacle_range, "obstacle_range");
}

void VOParams::validate() const {
  require_positive(time_horizon, "time_horizon");
  require_positive(neighbor_radius, "neighbor_radius");
  require_positive(max_speed, "max_speed");
}

SpeedMultiplier SpeedMultiplier::sample(Rng& rng) {
  std::uniform_real_distribution<double> u(0.5, 1.5);
  return {u(rng)};
}

Obstacles obstacles_of(const sim::World& world) {
  return {world.circles, world.rects, world.bounds};
}

Vec2 velocity_of(const AgentState& a) { return unit_from_angle(a.pose.heading) * a.linear_vel; }

double repulsion_magnitude(double strength, double range, double combined_radius, double distance) {
  return strength * std::exp((combined_radius - distance) / range);
}

Vec2 social_force(const AgentState& self, std::span<const AgentState> neighbors,
                  const Obstacles& obstacles, const SocialForceParams& params, Rng& rng) {
  const Vec2 p = self.pose.position();
  const Vec2 to_goal = self.goal - p;
  const double goal_dist = to_goal.norm();
  const Vec2 desired = goal_dist > kEps ? to_goal / goal_dist * params.desired_speed : Vec2{};
  Vec2 force = (desired - velocity_of(self)) / params.relaxation_time;

  for (const auto& other : neighbors) {
    force += repel_from(p, other.pose.position(), self.radius + other.radius,
                        params.interaction_strength, params.interaction_range, rng);
  }
  for (const auto& c : obstacles.circles) {
    force += repel_from(p, c.center, self.radius + c.radius, params.obstacle_strength,
                        params.obstacle_range, rng);
  }
  for (const auto& r : obstacles.rects) {
    force += repel_from(p, closest_point_on_rect(p, r), self.radius, params.obstacle_strength,
                        params.obstacle_range, rng);
  }
  if (obstacles.bounds) {
    const Rect& b = *obstacles.bounds;
    const Vec2 walls[4] = {{b.lo.x, p.y}, {b.hi.x, p.y}, {p.x, b.lo.y}, {p.x, b.hi.y}};
    for (const Vec2& w : walls) {
      force += repel_from(p, w, self.radius, params.obstacle_strength, params.obstacle_range, rng);
    }
  }
  return force;
}

Command velocity_to_command(const AgentState& self, Vec2 desired, const SteeringLimits& limits) {
  if (desired.norm() < kEps) return {0.0, 0.0};
  const double err = wrap_angle(std::atan2(desired.y, desired.x) - self.pose.heading);
  const double w = std::clamp(limits.heading_gain * err, -limits.w_max, limits.w_max);
  const double v = std::clamp(dot(desired, unit_from_angle(self.pose.heading)), 0.0, limits.v_max);
  return {v, w};
}

Vec2 social_force_velocity(const AgentState& self, std::span<const AgentState> neighbors,
                           const Obstacles& obstacles, const SocialForceParams& params,
                           const SteeringLimits& limits, Rng& rng) {
  return velocity_of(self) + social_force(self, neighbors, obstacles, params, rng) * limits.dt;
}

Command social_force_command(const AgentState& self, std::span<const AgentState> neighbors,
                             const Obstacles& obstacles, const SocialForceParams& params,
                             const SteeringLimits& limits, Rng& rng) {
  return velocity_to_command(
      self, social_force_velocity(self, neighbors, obstacles, params, limits, rng), limits);
}

std::vector<HalfPlane> vo_halfplanes(const AgentState& self, std::span<const AgentState> neighbors,
                                     const VOParams& params, double dt) {
  std::vector<HalfPlane> planes;
  const Vec2 p = self.pose.position();
  const Vec2 v = velocity_of(self);
  const double inv_horizon = 1.0 / params.time_horizon;
  for (const auto& other : neighbors) {
    const Vec2 rel_pos = other.pose.position() - p;
    if (rel_pos.norm() > params.neighbor_radius) continue;
    const Vec2 rel_vel = v - velocity_of(other);
    const double dist_sq = rel_pos.squared_norm();
    const double r = self.radius + other.radius;
    const double r_sq = r * r;

    HalfPlane line;
    Vec2 u;
    if (dist_sq > r_sq) {
      const Vec2 w = rel_vel - rel_pos * inv_horizon;
      const double w_len_sq = w.squared_norm();
      const double dot1 = dot(w, rel_pos);
      if (dot1 < 0.0 && dot1 * dot1 > r_sq * w_len_sq) {
        // Closest boundary point lies on the truncation circle.
        const double w_len = std::sqrt(w_len_sq);
        const Vec2 unit_w = w / w_len;
        line.direction = {unit_w.y, -unit_w.x};
        u = unit_w * (r * inv_horizon - w_len);
      } else {
        const double leg = std::sqrt(dist_sq - r_sq);
        if (cross(rel_pos, w) > 0.0) {
          line.direction = Vec2{rel_pos.x * leg - rel_pos.y * r, rel_pos.x * r + rel_pos.y * leg} /
                           dist_sq;
        } else {
          line.direction = -(Vec2{rel_pos.x * leg + rel_pos.y * r, -rel_pos.x * r + rel_pos.y * leg} /
                             dist_sq);
        }
        u = line.direction * dot(rel_vel, line.direction) - rel_vel;
      }
    } else {
      const double inv_dt = 1.0 / dt;
      const Vec2 w = rel_vel - rel_pos * inv_dt;
      const double w_len = w.norm();
      const Vec2 unit_w = w_len > kEps ? w / w_len : Vec2{1.0, 0.0};
      line.direction = {unit_w.y, -unit_w.x};
      u = unit_w * (r * inv_dt - w_len);
    }
    line.point = v + u * 0.5;
    planes.push_back(line);
  }
  return planes;
}

VOSolution solve_halfplanes(std::span<const HalfPlane> planes, Vec2 preferred, double max_speed) {
  VOSolution out;
  const std::size_t failed = solve_program(planes, max_speed, preferred, false, out.velocity);
  if (failed < planes.size()) {
    out.feasible = false;
    minimize_violation(planes, failed, max_speed, out.velocity);
  }
  return out;
}

Vec2 preferred_velocity(const AgentState& self, double max_speed) {
  const Vec2 to_goal = self.goal - self.pose.position();
  const double d = to_goal.norm();
  if (d < kEps) return {};
  return to_goal / d * max_speed;
}

Command vo_command(const AgentState& self, std::span<const AgentState> neighbors,
                   const VOParams& params, const SteeringLimits& limits) {
  const auto planes = vo_halfplanes(self, neighbors, params, limits.dt);
  const auto sol = solve_halfplanes(planes, preferred_velocity(self, params.max_speed),
                                    params.max_speed);
  return velocity_to_command(self, sol.velocity, limits);
}

std::vector<AgentState> filter_visible(const sim::World& world, std::size_t observer_index) {
  std::vector<AgentState> out;
  for (std::size_t j = 0; j < world.agents.size(); ++j) {
    const auto& a = world.agents[j];
    if (j == observer_index || !a.alive || !a.visible) continue;
    out.push_back(a);
  }
  return out;
}

Command apply_speed_multiplier(Command command, SpeedMultiplier m, double v_max) {
  return {std::clamp(command.v * m.factor, 0.0, v_max * 1.5), command.w};
}

}  // namespace crowdiv::ped
