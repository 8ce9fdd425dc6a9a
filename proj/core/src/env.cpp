#include "crowdiv/env.hpp"

#include <utility>

namespace crowdiv::sim {

CrowdEnv::CrowdEnv(SimConfig sim, RewardConfig reward, World world)
    : sim_(std::move(sim)), reward_(std::move(reward)), world_(std::move(world)) {
  sim_.validate();
  reward_.validate();
  histories_.resize(world_.agents.size());
}

void CrowdEnv::push_scan(std::size_t i, std::vector<double> clean_ranges) {
  apply_lidar_noise(clean_ranges, sim_.max_range, sim_.noise_std, world_.rng);
  auto& h = histories_[i];
  h.push_back(LidarScan{std::move(clean_ranges), sim_.max_range});
  while (static_cast<int>(h.size()) > sim_.k_frames) h.pop_front();
}

void CrowdEnv::reset_sensors() {
  histories_.assign(world_.agents.size(), {});
  for (std::size_t i = 0; i < world_.agents.size(); ++i) {
    if (world_.agents[i].alive) push_scan(i, cast_rays(world_, i, sim_.n_beams, sim_.max_range));
  }
}

void CrowdEnv::reset_sensor(std::size_t i) {
  histories_.at(i).clear();
  push_scan(i, cast_rays(world_, i, sim_.n_beams, sim_.max_range));
}

Observation CrowdEnv::observe(std::size_t i) const {
  const auto& h = histories_.at(i);
  std::vector<LidarScan> frames(h.begin(), h.end());
  return build_observation(frames, world_.agents.at(i), sim_.k_frames);
}

std::vector<double> CrowdEnv::features(std::size_t i) const {
  return observe(i).features(sim_.max_range, sim_.v_max, sim_.w_max);
}

StepResult CrowdEnv::step(std::span<const Command> commands) {
  const std::vector<AgentState> before = world_.agents;
  std::vector<std::vector<double>> clean;
  StepResult out;
  out.events = step_world(world_, commands, reward_, sim_, &clean);
  out.rewards.assign(world_.agents.size(), 0.0);
  for (std::size_t i = 0; i < world_.agents.size(); ++i) {
    if (!world_.agents[i].alive) continue;
    out.rewards[i] = compute_reward(before[i], world_.agents[i], out.events.agents[i], reward_);
    if (clean[i].empty()) clean[i] = cast_rays(world_, i, sim_.n_beams, sim_.max_range);
    push_scan(i, std::move(clean[i]));
  }
  return out;
}

}  // namespace crowdiv::sim
