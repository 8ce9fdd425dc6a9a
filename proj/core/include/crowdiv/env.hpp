#pragma once

#include <deque>
#include <span>
#include <vector>

#include "crowdiv/sim.hpp"

namespace crowdiv::sim {

struct StepResult {
  StepEvents events;
  std::vector<double> rewards;  ///< task reward per agent (0 for dead agents)
};

/// A World plus per-agent lidar histories. Owns the sensor side of the
/// loop; controllers and episode bookkeeping live with the caller.
class CrowdEnv {
 public:
  CrowdEnv(SimConfig sim, RewardConfig reward, World world);

  const World& world() const { return world_; }
  World& world() { return world_; }
  const SimConfig& sim_config() const { return sim_; }
  const RewardConfig& reward_config() const { return reward_; }
  std::size_t size() const { return world_.agents.size(); }

  /// Clears every history and takes one fresh scan per alive agent.
  void reset_sensors();
  /// Clears agent i's history and takes one fresh scan (after a respawn).
  void reset_sensor(std::size_t i);

  Observation observe(std::size_t i) const;
  /// observe(i).features(...) with this env's limits.
  std::vector<double> features(std::size_t i) const;
  int feature_dim() const { return Observation::feature_dim(sim_.k_frames, sim_.n_beams); }

  StepResult step(std::span<const Command> commands);

  const std::deque<LidarScan>& history(std::size_t i) const { return histories_.at(i); }
  std::vector<std::deque<LidarScan>>& histories() { return histories_; }
  const std::vector<std::deque<LidarScan>>& histories() const { return histories_; }

 private:
  void push_scan(std::size_t i, std::vector<double> clean_ranges);

  SimConfig sim_;
  RewardConfig reward_;
  World world_;
  std::vector<std::deque<LidarScan>> histories_;
};

}  // namespace crowdiv::sim
