#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <span>
#include <string>
#include <vector>

#include "crowdiv/models.hpp"
#include "crowdiv/pedestrians.hpp"
#include "crowdiv/sim.hpp"
#include "crowdiv/trajectory_log.hpp"

/// Unseen-pedestrian scenario families, episode metrics and the action
/// diversity metric.
namespace crowdiv::eval {

enum class ScenarioKind {
  NH,  ///< heterogeneous learned pedestrians, one checkpoint each
  IN,  ///< as NH, evaluated agent invisible
  VA,  ///< as IN, random per-pedestrian speed multipliers
  SO,  ///< half-trained learned pedestrians, agent visible
  VO,  ///< reciprocal velocity-obstacle pedestrians
  SF,  ///< social-force pedestrians
};

ScenarioKind parse_kind(const std::string& text);
std::string to_string(ScenarioKind kind);
std::vector<ScenarioKind> all_kinds();
/// Whether pedestrians perceive the evaluated agent under `kind`.
bool agent_visible_for(ScenarioKind kind);

class ScenarioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ScenarioConfig {
  ScenarioKind kind = ScenarioKind::SF;
  int n_agents = 5;  ///< including the evaluated agent
  /// NH/IN/VA: at least n_agents - 1 distinct checkpoints (pedestrian j uses entry j).
  std::vector<std::filesystem::path> pedestrian_checkpoints;
  /// SO: the half-trained checkpoint shared by every pedestrian.
  std::filesystem::path half_trained_checkpoint;
  ped::SocialForceParams social_force;
  ped::VOParams vo;
  double heading_gain = 2.0;
  std::uint64_t seed = 1;
  int agent_token = 0;
  /// Defaults to agent_visible_for(kind).
  std::optional<bool> agent_visible;
  /// When set (single-agent scenarios only) the goal is placed this far
  /// straight ahead of the start pose.
  std::optional<double> goal_ahead;
  sim::SimConfig sim;
  sim::RewardConfig reward;
};

/// A scenario with its pedestrian policies loaded.
struct Scenario {
  ScenarioConfig cfg;
  bool agent_visible = true;
  /// One per pedestrian for learned kinds (empty for VO/SF).
  std::vector<nn::NetworkParams> pedestrian_policies;
};

/// Loads and validates the kind's prerequisites. Throws ScenarioError for
/// an invalid N or checkpoint list and ckpt::CheckpointNotFound for a
/// missing file.
Scenario build_scenario(const ScenarioConfig& cfg);
/// As above with pedestrian policies supplied in memory.
Scenario build_scenario(const ScenarioConfig& cfg, std::vector<nn::NetworkParams> pedestrians);

enum class Outcome { goal, collision, timeout };
std::string to_string(Outcome o);

struct EpisodeResult {
  bool success = false;
  Outcome outcome = Outcome::timeout;
  double elapsed = 0.0;      ///< s
  double path_length = 0.0;  ///< m
  double mean_speed = 0.0;   ///< path_length / elapsed
  /// Start-to-goal distance less the goal tolerance d_col.
  double straight_line = 0.0;
};

/// Runs `n_episodes` episodes of the deterministic (mean-action) policy as
/// agent 0. Each call is reproducible from cfg.seed alone.
std::vector<EpisodeResult> run_episodes(const nn::NetworkParams& policy, const Scenario& scenario,
                                        int n_episodes, sim::TrajectoryLogWriter* log = nullptr);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  ///< population standard deviation
};

struct MetricsSummary {
  int episodes = 0;
  double success_rate = 0.0;
  double collision_rate = 0.0;
  double timeout_rate = 0.0;
  /// Over successful episodes; absent when none succeeded.
  std::optional<MeanStd> extra_time;
  std::optional<MeanStd> extra_distance;
  /// Over all episodes with elapsed > 0.
  std::optional<MeanStd> average_speed;
};

/// `straight_line` holds one distance per episode.
MetricsSummary summarize(std::span<const EpisodeResult> results,
                         std::span<const double> straight_line, double v_max);
/// Uses each result's own straight_line field.
MetricsSummary summarize(std::span<const EpisodeResult> results, double v_max);

/// Probe states: feature rows of agent 0 while every agent samples actions
/// from `policy` with token 0 and respawns on terminal events.
nn::Matrix generate_probe(const nn::NetworkParams& policy, const sim::SimConfig& sim,
                          const sim::RewardConfig& reward, int n_agents, int n_steps,
                          std::uint64_t seed);

/// CSV: step,f0,...,fK with %.17g values.
void write_probe(std::ostream& out, const nn::Matrix& probe);
nn::Matrix read_probe(std::istream& in);

/// Mean KL between the token-conditioned action distributions over all
/// ordered token pairs i != j and all probe rows. 0 when M = 1.
double diversity_metric(const nn::NetworkParams& policy, const nn::Matrix& probe);

struct SuiteRow {
  std::string kind;  ///< scenario kind or "AVG"
  std::uint64_t seed = 0;
  MetricsSummary metrics;
};

struct SuiteHooks {
  /// Per (kind, seed) episode results.
  std::function<void(ScenarioKind, std::uint64_t, std::span<const EpisodeResult>)> on_results;
  /// Optional trajectory sink per (kind, seed); may return nullptr.
  std::function<sim::TrajectoryLogWriter*(ScenarioKind, std::uint64_t)> trajectory_log;
};

/// Runs every kind in `kinds` for every seed. `base` supplies everything
/// but kind and seed. After each seed's per-kind rows comes an "AVG" row
/// averaging those rows' statistics.
std::vector<SuiteRow> run_suite(const nn::NetworkParams& policy, const ScenarioConfig& base,
                                std::span<const ScenarioKind> kinds,
                                std::span<const std::uint64_t> seeds, int n_episodes,
                                const SuiteHooks& hooks = {});

inline constexpr const char* kResultsHeader =
    "kind,seed,episodes,success_rate,extra_time_mean,extra_time_std,extra_dist_mean,"
    "extra_dist_std,avg_speed_mean,avg_speed_std,timeout_rate";
/// Header plus one row per suite row; absent statistics are written as NA.
void write_results_csv(std::ostream& out, std::span<const SuiteRow> rows);

inline constexpr const char* kDiversityHeader = "policy_id,M,D";

}  // namespace crowdiv::eval
