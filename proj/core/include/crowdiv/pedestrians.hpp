#pragma once

#include <optional>
#include <span>
#include <vector>

#include "crowdiv/geometry.hpp"
#include "crowdiv/sim.hpp"

/// Non-learning pedestrian controllers (social force, reciprocal velocity
/// obstacles) and the wrappers used by the evaluation scenarios.
namespace crowdiv::ped {

using sim::AgentState;
using sim::Command;
using sim::Rng;

struct SocialForceParams {
  double relaxation_time = 0.5;       ///< s
  double desired_speed = 1.0;         ///< m/s
  double interaction_strength = 2.0;  ///< A, m/s^2
  double interaction_range = 0.3;     ///< B, m
  double obstacle_strength = 2.0;
  double obstacle_range = 0.3;

  void validate() const;
};

struct VOParams {
  double time_horizon = 2.0;     ///< s
  double neighbor_radius = 5.0;  ///< m
  double max_speed = 1.0;        ///< m/s

  void validate() const;
};

struct SpeedMultiplier {
  double factor = 1.0;  ///< in [0.5, 1.5], fixed for an episode

  static SpeedMultiplier sample(Rng& rng);
};

/// Projection of a holonomic velocity onto unicycle commands.
struct SteeringLimits {
  double v_max = 1.0;
  double w_max = 1.0;
  double heading_gain = 2.0;
  double dt = 0.1;
};

/// Static geometry a pedestrian reacts to. `bounds`, when set, is the room
/// whose four walls repel from the inside.
struct Obstacles {
  std::span<const Circle> circles;
  std::span<const Rect> rects;
  std::optional<Rect> bounds;
};

Obstacles obstacles_of(const sim::World& world);

/// Current velocity vector of a unicycle agent.
Vec2 velocity_of(const AgentState& a);

/// Magnitude of the pairwise repulsion A * exp((r - d) / B).
double repulsion_magnitude(double strength, double range, double combined_radius, double distance);

/// Total social force (m/s^2) on `self`: goal attraction plus exponential
/// repulsion from neighbors and obstacles. `rng` supplies the direction for
/// coincident positions.
Vec2 social_force(const AgentState& self, std::span<const AgentState> neighbors,
                  const Obstacles& obstacles, const SocialForceParams& params, Rng& rng);

/// Bearing-proportional steering toward a desired holonomic velocity:
/// w = gain * bearing error, v = projection on heading, both clamped.
Command velocity_to_command(const AgentState& self, Vec2 desired, const SteeringLimits& limits);

/// Desired velocity after integrating the social force for one step.
Vec2 social_force_velocity(const AgentState& self, std::span<const AgentState> neighbors,
                           const Obstacles& obstacles, const SocialForceParams& params,
                           const SteeringLimits& limits, Rng& rng);

Command social_force_command(const AgentState& self, std::span<const AgentState> neighbors,
                             const Obstacles& obstacles, const SocialForceParams& params,
                             const SteeringLimits& limits, Rng& rng);

/// Directed line; velocities v with cross(direction, point - v) <= 0 are
/// permitted (the left side of the direction).
struct HalfPlane {
  Vec2 point;
  Vec2 direction;  ///< unit

  /// Positive when v lies on the forbidden side.
  double violation(Vec2 v) const { return cross(direction, point - v); }
};

/// One reciprocal velocity-obstacle half-plane per neighbor within
/// neighbor_radius. `dt` is used only for already-overlapping pairs.
std::vector<HalfPlane> vo_halfplanes(const AgentState& self, std::span<const AgentState> neighbors,
                                     const VOParams& params, double dt);

struct VOSolution {
  Vec2 velocity;
  /// False when no velocity within max_speed satisfies every half-plane;
  /// `velocity` then minimizes the largest violation.
  bool feasible = true;
};

/// Velocity within the max_speed disc closest to `preferred` subject to the
/// half-planes, by sequential half-plane intersection.
VOSolution solve_halfplanes(std::span<const HalfPlane> planes, Vec2 preferred, double max_speed);

/// Toward the goal at max_speed; zero at the goal.
Vec2 preferred_velocity(const AgentState& self, double max_speed);

Command vo_command(const AgentState& self, std::span<const AgentState> neighbors,
                   const VOParams& params, const SteeringLimits& limits);

/// All alive agents except the observer and invisible ones.
std::vector<AgentState> filter_visible(const sim::World& world, std::size_t observer_index);

/// (clamp(v * factor, 0, v_max * 1.5), w).
Command apply_speed_multiplier(Command command, SpeedMultiplier m, double v_max);

}  // namespace crowdiv::ped
