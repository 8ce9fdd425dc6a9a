#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "crowdiv/geometry.hpp"

/// Deterministic 2D world: unicycle kinematics, static obstacles, ray-cast
/// lidar, collision and goal events, and the per-step task reward.
namespace crowdiv::sim {

using Rng = std::mt19937_64;

struct Pose {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;  ///< radians, kept in (-pi, pi]

  Vec2 position() const { return {x, y}; }
};

struct AgentState {
  Pose pose;
  double linear_vel = 0.0;   ///< m/s
  double angular_vel = 0.0;  ///< rad/s
  double radius = 0.25;      ///< half of the 0.5 m footprint
  Vec2 goal;
  int token = 0;
  bool visible = true;  ///< false: other agents' sensors ignore this body
  bool alive = true;
  /// Per-episode multiplier on the linear speed limit (1 unless a speed
  /// multiplier wrapper is active).
  double speed_scale = 1.0;
  /// Steps since this agent's episode started.
  std::int32_t episode_steps = 0;
};

struct SimConfig {
  double dt = 0.1;
  double v_max = 1.0;
  double w_max = 1.0;
  int n_beams = 512;
  double max_range = 10.0;
  double noise_std = 0.03;
  int k_frames = 3;
  int max_steps = 200;
  double room_width = 20.0;
  double room_height = 20.0;
  double agent_radius = 0.25;
  double spawn_clearance = 1.5;
  double min_goal_distance = 10.0;
  /// Spawn points and goals keep at least this distance from the walls.
  double wall_margin = 1.0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

struct RewardConfig {
  double r_goal = 15.0;
  double r_col = -15.0;
  double r_step = 2.5;    ///< per meter of progress
  double d_col = 0.5;     ///< goal-reached threshold, m
  double crash_range = 0.5;

  void validate() const;
};

struct World {
  std::vector<AgentState> agents;
  std::vector<Circle> circles;
  std::vector<Rect> rects;
  Rect bounds{{0.0, 0.0}, {20.0, 20.0}};
  std::int64_t steps = 0;
  double dt = 0.1;
  Rng rng;

  double time() const { return static_cast<double>(steps) * dt; }
};

struct LidarScan {
  std::vector<double> ranges;
  double max_range = 10.0;

  int n_beams() const { return static_cast<int>(ranges.size()); }
  double min_range() const;
};

/// Policy input: stacked normalized scans, polar goal in the robot frame,
/// and own velocity.
struct Observation {
  std::vector<double> scan_stack;  ///< k_frames * n_beams, oldest frame first
  int k_frames = 0;
  int n_beams = 0;
  double goal_distance = 0.0;
  double goal_bearing = 0.0;
  double linear_vel = 0.0;
  double angular_vel = 0.0;

  /// Flat network input: scans, then goal distance / max_range, bearing / pi,
  /// and the velocities scaled by their limits.
  std::vector<double> features(double max_range, double v_max, double w_max) const;
  static int feature_dim(int k_frames, int n_beams) { return k_frames * n_beams + 4; }
};

struct Command {
  double v = 0.0;
  double w = 0.0;
};

struct AgentEvent {
  bool reached_goal = false;
  bool collided = false;
  bool timed_out = false;

  bool terminal() const { return reached_goal || collided || timed_out; }
  /// "goal", "collision", "timeout" or "" (none).
  std::string name() const;
};

struct StepEvents {
  std::vector<AgentEvent> agents;
};

class SimError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Exact constant-twist arc endpoint; straight line when |w| < 1e-9.
Pose integrate_unicycle(const Pose& pose, double v, double w, double dt);

/// Noise-free ranges from agent `agent_index`; beam i points at
/// heading + 2*pi*i/n_beams. Invisible agents are skipped as targets.
std::vector<double> cast_rays(const World& world, std::size_t agent_index, int n_beams,
                              double max_range);

/// Adds zero-mean Gaussian noise in place and re-clamps to [0.01, max_range].
void apply_lidar_noise(std::vector<double>& ranges, double max_range, double noise_std, Rng& rng);

/// cast_rays plus apply_lidar_noise.
LidarScan lidar_scan(const World& world, std::size_t agent_index, int n_beams, double max_range,
                     double noise_std, Rng& rng);

/// True if the agent's disc overlaps another alive agent, an obstacle, or a wall.
bool disc_overlap(const World& world, std::size_t agent_index);

/// Integrates every alive agent simultaneously, then evaluates events.
/// Commands are clamped to [0, v_max * speed_scale] x [-w_max, w_max].
/// `clean_scans`, when non-null, receives the noise-free ranges cast for the
/// crash rule (left empty for agents that reached their goal or are dead).
StepEvents step_world(World& world, std::span<const Command> commands, const RewardConfig& reward,
                      const SimConfig& cfg,
                      std::vector<std::vector<double>>* clean_scans = nullptr);

double compute_reward(const AgentState& prev, const AgentState& next, const AgentEvent& events,
                      const RewardConfig& cfg);

/// `history` is ordered oldest first and must be non-empty; when it holds
/// fewer than k_frames scans the earliest one is repeated.
Observation build_observation(std::span<const LidarScan> history, const AgentState& agent,
                              int k_frames);

struct SpawnConfig {
  int n_agents = 1;
  SimConfig sim;
  std::vector<Circle> circles;
  std::vector<Rect> rects;
};

/// Rejection-sampled placement: pairwise spawn clearance, goals at least
/// min_goal_distance away. Throws SimError after 10,000 rejected attempts.
World spawn_episode(const SpawnConfig& cfg, Rng& rng);

/// Places agent `index` at a fresh position/goal clear of the other alive
/// agents and resets its velocities and episode counter.
void respawn_agent(World& world, std::size_t index, const SimConfig& cfg, Rng& rng);

}  // namespace crowdiv::sim
