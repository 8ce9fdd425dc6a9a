#include "crowdiv/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numbers>
#include <ostream>
#include <set>
#include <string_view>

#include "crowdiv/checkpoint.hpp"
#include "crowdiv/env.hpp"

namespace crowdiv::eval {

namespace {

bool learned_kind(ScenarioKind k) {
  return k == ScenarioKind::NH || k == ScenarioKind::IN || k == ScenarioKind::VA ||
         k == ScenarioKind::SO;
}

bool distinct_pool_kind(ScenarioKind k) {
  return k == ScenarioKind::NH || k == ScenarioKind::IN || k == ScenarioKind::VA;
}

void check_policy_shape(const nn::NetworkParams& p, const sim::SimConfig& sim, const std::string& what) {
  if (p.shape.k_frames != sim.k_frames || p.shape.n_beams != sim.n_beams) {
    throw ScenarioError(what + ": policy expects " + std::to_string(p.shape.k_frames) + "x" +
                        std::to_string(p.shape.n_beams) + " scans, scenario provides " +
                        std::to_string(sim.k_frames) + "x" + std::to_string(sim.n_beams));
  }
}

/// Mean action of `policy` for one feature row.
sim::Command mean_command(const nn::NetworkParams& policy, const std::vector<double>& features,
                          int token) {
  const nn::Matrix x = Eigen::Map<const nn::Matrix>(features.data(), 1,
                                                    static_cast<Eigen::Index>(features.size()));
  const int tokens[1] = {token};
  const auto out = nn::policy_forward(policy, x, tokens);
  return {out.mean(0, 0), out.mean(0, 1)};
}

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd m;
  if (xs.empty()) return m;
  double s = 0.0;
  for (double x : xs) s += x;
  m.mean = s / static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(v / static_cast<double>(xs.size()));
  return m;
}

/// Places agent 0 so that a goal `distance` straight ahead stays inside the
/// spawn region.
void place_goal_ahead(sim::World& world, const sim::SimConfig& sim, double distance, sim::Rng& rng) {
  const double m = sim.wall_margin;
  std::uniform_real_distribution<double> ux(m, sim.room_width - m);
  std::uniform_real_distribution<double> uy(m, sim.room_height - m);
  std::uniform_real_distribution<double> uh(-std::numbers::pi, std::numbers::pi);
  for (int attempt = 0; attempt < 10'000; ++attempt) {
    const Vec2 p{ux(rng), uy(rng)};
    const double h = uh(rng);
    const Vec2 g = p + unit_from_angle(h) * distance;
    if (g.x < m || g.x > sim.room_width - m || g.y < m || g.y > sim.room_height - m) continue;
    auto& a = world.agents[0];
    a.pose = {p.x, p.y, wrap_angle(h)};
    a.goal = g;
    return;
  }
  throw ScenarioError("goal_ahead: no start pose keeps the goal inside the room");
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

ScenarioKind parse_kind(const std::string& text) {
  for (auto k : all_kinds()) {
    if (to_string(k) == text) return k;
  }
  throw ScenarioError("unknown scenario kind '" + text + "' (expected NH, IN, VA, SO, VO or SF)");
}

std::string to_string(ScenarioKind kind) {
  switch (kind) {
    case ScenarioKind::NH: return "NH";
    case ScenarioKind::IN: return "IN";
    case ScenarioKind::VA: return "VA";
    case ScenarioKind::SO: return "SO";
    case ScenarioKind::VO: return "VO";
    case ScenarioKind::SF: return "SF";
  }
  return "SF";
}

std::vector<ScenarioKind> all_kinds() {
  return {ScenarioKind::NH, ScenarioKind::IN, ScenarioKind::VA,
          ScenarioKind::SO, ScenarioKind::VO, ScenarioKind::SF};
}

bool agent_visible_for(ScenarioKind kind) {
  return kind == ScenarioKind::NH || kind == ScenarioKind::SO;
}

std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::goal: return "goal";
    case Outcome::collision: return "collision";
    case Outcome::timeout: return "timeout";
  }
  return "timeout";
}

Scenario build_scenario(const ScenarioConfig& cfg, std::vector<nn::NetworkParams> pedestrians) {
  if (cfg.n_agents < 1) throw ScenarioError("n_agents must be >= 1");
  if (cfg.agent_token < 0) throw ScenarioError("agent_token must be >= 0");
  if (cfg.goal_ahead && cfg.n_agents != 1) {
    throw ScenarioError("goal_ahead requires a single-agent scenario");
  }
  cfg.sim.validate();
  cfg.reward.validate();
  cfg.social_force.validate();
  cfg.vo.validate();
  Scenario s;
  s.cfg = cfg;
  s.agent_visible = cfg.agent_visible.value_or(agent_visible_for(cfg.kind));
  const auto n_ped = static_cast<std::size_t>(cfg.n_agents - 1);
  if (learned_kind(cfg.kind) && n_ped > 0) {
    if (pedestrians.size() == 1 && cfg.kind == ScenarioKind::SO) {
      pedestrians.resize(n_ped, pedestrians.front());
    }
    if (pedestrians.size() < n_ped) {
      throw ScenarioError(to_string(cfg.kind) + " needs " + std::to_string(n_ped) +
                          " pedestrian policies, got " + std::to_string(pedestrians.size()));
    }
    pedestrians.resize(n_ped);
    for (std::size_t j = 0; j < n_ped; ++j) {
      check_policy_shape(pedestrians[j], cfg.sim, "pedestrian " + std::to_string(j + 1));
    }
    s.pedestrian_policies = std::move(pedestrians);
  }
  return s;
}

Scenario build_scenario(const ScenarioConfig& cfg) {
  std::vector<nn::NetworkParams> peds;
  const auto n_ped = static_cast<std::size_t>(std::max(0, cfg.n_agents - 1));
  if (distinct_pool_kind(cfg.kind) && n_ped > 0) {
    std::set<std::filesystem::path> distinct;
    for (std::size_t j = 0; j < std::min(n_ped, cfg.pedestrian_checkpoints.size()); ++j) {
      distinct.insert(std::filesystem::weakly_canonical(cfg.pedestrian_checkpoints[j]));
    }
    if (distinct.size() < n_ped) {
      throw ScenarioError(to_string(cfg.kind) + " needs " + std::to_string(n_ped) +
                          " distinct pedestrian checkpoints, got " + std::to_string(distinct.size()));
    }
    for (std::size_t j = 0; j < n_ped; ++j) {
      peds.push_back(ckpt::load_checkpoint(cfg.pedestrian_checkpoints[j]).params);
    }
  } else if (cfg.kind == ScenarioKind::SO && n_ped > 0) {
    if (cfg.half_trained_checkpoint.empty()) {
      throw ScenarioError("SO needs a half-trained checkpoint");
    }
    peds.push_back(ckpt::load_checkpoint(cfg.half_trained_checkpoint).params);
  }
  return build_scenario(cfg, std::move(peds));
}

std::vector<EpisodeResult> run_episodes(const nn::NetworkParams& policy, const Scenario& scenario,
                                        int n_episodes, sim::TrajectoryLogWriter* log) {
  if (n_episodes < 1) throw ScenarioError("n_episodes must be >= 1");
  const auto& cfg = scenario.cfg;
  check_policy_shape(policy, cfg.sim, "evaluated policy");
  if (cfg.agent_token >= policy.shape.num_tokens) {
    throw ScenarioError("agent_token " + std::to_string(cfg.agent_token) + " >= M " +
                        std::to_string(policy.shape.num_tokens));
  }
  const ped::SteeringLimits limits{cfg.sim.v_max, cfg.sim.w_max, cfg.heading_gain, cfg.sim.dt};
  sim::Rng rng(cfg.seed);
  std::vector<EpisodeResult> results;
  results.reserve(static_cast<std::size_t>(n_episodes));
  for (int ep = 0; ep < n_episodes; ++ep) {
    sim::SpawnConfig spawn;
    spawn.n_agents = cfg.n_agents;
    spawn.sim = cfg.sim;
    sim::World world = sim::spawn_episode(spawn, rng);
    if (cfg.goal_ahead) place_goal_ahead(world, cfg.sim, *cfg.goal_ahead, rng);
    sim::Rng ped_rng(rng());
    std::vector<ped::SpeedMultiplier> multipliers(world.agents.size());
    for (std::size_t j = 0; j < world.agents.size(); ++j) {
      auto& a = world.agents[j];
      a.token = 0;
      if (j == 0) {
        a.token = cfg.agent_token;
        a.visible = scenario.agent_visible;
      } else if (cfg.kind == ScenarioKind::VA) {
        multipliers[j] = ped::SpeedMultiplier::sample(ped_rng);
        a.speed_scale = multipliers[j].factor;
      }
    }
    const Vec2 start = world.agents[0].pose.position();
    EpisodeResult r;
    r.straight_line = std::max(0.0, (start - world.agents[0].goal).norm() - cfg.reward.d_col);

    sim::CrowdEnv env(cfg.sim, cfg.reward, std::move(world));
    env.reset_sensors();
    std::vector<sim::Command> commands(env.size());
    while (true) {
      const auto& w = env.world();
      commands[0] = mean_command(policy, env.features(0), cfg.agent_token);
      for (std::size_t j = 1; j < env.size(); ++j) {
        const auto& self = w.agents[j];
        switch (cfg.kind) {
          case ScenarioKind::NH:
          case ScenarioKind::IN:
          case ScenarioKind::VA:
          case ScenarioKind::SO:
            commands[j] = mean_command(scenario.pedestrian_policies[j - 1], env.features(j), 0);
            break;
          case ScenarioKind::VO: {
            const auto neighbors = ped::filter_visible(w, j);
            commands[j] = ped::vo_command(self, neighbors, cfg.vo, limits);
            break;
          }
          case ScenarioKind::SF: {
            const auto neighbors = ped::filter_visible(w, j);
            commands[j] = ped::social_force_command(self, neighbors, ped::obstacles_of(w),
                                                    cfg.social_force, limits, ped_rng);
            break;
          }
        }
        if (cfg.kind == ScenarioKind::VA) {
          commands[j] = ped::apply_speed_multiplier(commands[j], multipliers[j], cfg.sim.v_max);
        }
      }
      const Vec2 before = env.world().agents[0].pose.position();
      const auto step = env.step(commands);
      const auto& after = env.world();
      r.path_length += (after.agents[0].pose.position() - before).norm();
      if (log) {
        for (std::size_t j = 0; j < after.agents.size(); ++j) {
          const auto& a = after.agents[j];
          log->write({ep, after.time(), static_cast<int>(j), a.pose.x, a.pose.y, a.pose.heading,
                      a.linear_vel, a.angular_vel, step.rewards[j], a.token,
                      step.events.agents[j].name()});
        }
      }
      const auto& ev0 = step.events.agents[0];
      if (ev0.terminal()) {
        r.outcome = ev0.reached_goal ? Outcome::goal
                    : ev0.collided   ? Outcome::collision
                                     : Outcome::timeout;
        r.success = ev0.reached_goal;
        r.elapsed = after.agents[0].episode_steps * cfg.sim.dt;
        r.mean_speed = r.elapsed > 0.0 ? r.path_length / r.elapsed : 0.0;
        break;
      }
      for (std::size_t j = 1; j < env.size(); ++j) {
        if (!step.events.agents[j].terminal()) continue;
        sim::respawn_agent(env.world(), j, cfg.sim, ped_rng);
        env.reset_sensor(j);
      }
    }
    results.push_back(r);
  }
  return results;
}

MetricsSummary summarize(std::span<const EpisodeResult> results,
                         std::span<const double> straight_line, double v_max) {
  if (results.empty()) throw std::invalid_argument("summarize: no episodes");
  if (straight_line.size() != results.size()) {
    throw std::invalid_argument("summarize: one straight-line distance per episode required");
  }
  MetricsSummary s;
  s.episodes = static_cast<int>(results.size());
  std::vector<double> extra_time;
  std::vector<double> extra_dist;
  std::vector<double> speed;
  int goals = 0;
  int collisions = 0;
  int timeouts = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    goals += r.outcome == Outcome::goal;
    collisions += r.outcome == Outcome::collision;
    timeouts += r.outcome == Outcome::timeout;
    if (r.elapsed > 0.0) speed.push_back(r.mean_speed);
    if (r.success) {
      extra_time.push_back(r.elapsed - straight_line[i] / v_max);
      extra_dist.push_back(r.path_length - straight_line[i]);
    }
  }
  const double n = static_cast<double>(results.size());
  s.success_rate = goals / n;
  s.collision_rate = collisions / n;
  s.timeout_rate = timeouts / n;
  if (!extra_time.empty()) {
    s.extra_time = mean_std(extra_time);
    s.extra_distance = mean_std(extra_dist);
  }
  if (!speed.empty()) s.average_speed = mean_std(speed);
  return s;
}

MetricsSummary summarize(std::span<const EpisodeResult> results, double v_max) {
  std::vector<double> straight;
  straight.reserve(results.size());
  for (const auto& r : results) straight.push_back(r.straight_line);
  return summarize(results, straight, v_max);
}

nn::Matrix generate_probe(const nn::NetworkParams& policy, const sim::SimConfig& sim,
                          const sim::RewardConfig& reward, int n_agents, int n_steps,
                          std::uint64_t seed) {
  if (n_steps < 1) throw std::invalid_argument("generate_probe: n_steps must be >= 1");
  check_policy_shape(policy, sim, "probe policy");
  sim::Rng rng(seed);
  sim::SpawnConfig spawn;
  spawn.n_agents = n_agents;
  spawn.sim = sim;
  sim::CrowdEnv env(sim, reward, sim::spawn_episode(spawn, rng));
  env.reset_sensors();
  const std::size_t n = env.size();
  const std::vector<int> tokens(n, 0);
  nn::Matrix probe(n_steps, env.feature_dim());
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> feats(n);
  std::vector<sim::Command> commands(n);
  for (int t = 0; t < n_steps; ++t) {
    for (std::size_t i = 0; i < n; ++i) feats[i] = env.features(i);
    for (Eigen::Index c = 0; c < probe.cols(); ++c) probe(t, c) = feats[0][static_cast<std::size_t>(c)];
    const auto out = nn::policy_forward(policy, nn::stack_rows(feats), tokens);
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const double v = out.mean(r, 0) + std::exp(out.log_std(0)) * normal(rng);
      const double w = out.mean(r, 1) + std::exp(out.log_std(1)) * normal(rng);
      commands[i] = {std::clamp(v, 0.0, sim.v_max), std::clamp(w, -sim.w_max, sim.w_max)};
    }
    const auto step = env.step(commands);
    for (std::size_t i = 0; i < n; ++i) {
      if (!step.events.agents[i].terminal()) continue;
      sim::respawn_agent(env.world(), i, sim, rng);
      env.reset_sensor(i);
    }
  }
  return probe;
}

void write_probe(std::ostream& out, const nn::Matrix& probe) {
  out << "step";
  for (Eigen::Index c = 0; c < probe.cols(); ++c) out << ",f" << c;
  out << '\n';
  char buf[64];
  for (Eigen::Index r = 0; r < probe.rows(); ++r) {
    out << r;
    for (Eigen::Index c = 0; c < probe.cols(); ++c) {
      std::snprintf(buf, sizeof buf, ",%.17g", probe(r, c));
      out << buf;
    }
    out << '\n';
  }
}

nn::Matrix read_probe(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("step", 0) != 0) {
    throw std::runtime_error("probe file: missing 'step,f0,...' header");
  }
  const auto cols = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ','));
  std::vector<double> values;
  Eigen::Index rows = 0;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::string_view rest(line);
    const auto first = rest.find(',');
    if (first == std::string_view::npos && cols > 0) {
      throw std::runtime_error("probe file line " + std::to_string(lineno) + ": too few fields");
    }
    rest.remove_prefix(first + 1);
    for (Eigen::Index c = 0; c < cols; ++c) {
      const auto comma = rest.find(',');
      const std::string_view field = rest.substr(0, comma);
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
      if (ec != std::errc{} || ptr != field.data() + field.size()) {
        throw std::runtime_error("probe file line " + std::to_string(lineno) + ": bad number");
      }
      values.push_back(v);
      if (comma == std::string_view::npos) {
        if (c + 1 != cols) {
          throw std::runtime_error("probe file line " + std::to_string(lineno) + ": too few fields");
        }
        rest = {};
      } else {
        rest.remove_prefix(comma + 1);
      }
    }
    if (!rest.empty()) {
      throw std::runtime_error("probe file line " + std::to_string(lineno) + ": too many fields");
    }
    ++rows;
  }
  nn::Matrix probe(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) probe(r, c) = values[static_cast<std::size_t>(r * cols + c)];
  }
  return probe;
}

double diversity_metric(const nn::NetworkParams& policy, const nn::Matrix& probe) {
  if (probe.rows() == 0) throw std::invalid_argument("diversity_metric: empty probe");
  const int m = policy.shape.num_tokens;
  if (m < 2) return 0.0;
  std::vector<nn::Matrix> means;
  Eigen::Vector2d log_std = Eigen::Vector2d::Zero();
  for (int z = 0; z < m; ++z) {
    const std::vector<int> tokens(static_cast<std::size_t>(probe.rows()), z);
    auto out = nn::policy_forward(policy, probe, tokens);
    means.push_back(std::move(out.mean));
    log_std = out.log_std;
  }
  const double stdv[2] = {std::exp(log_std(0)), std::exp(log_std(1))};
  double total = 0.0;
  for (Eigen::Index r = 0; r < probe.rows(); ++r) {
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < m; ++j) {
        if (i == j) continue;
        const double mi[2] = {means[static_cast<std::size_t>(i)](r, 0), means[static_cast<std::size_t>(i)](r, 1)};
        const double mj[2] = {means[static_cast<std::size_t>(j)](r, 0), means[static_cast<std::size_t>(j)](r, 1)};
        total += nn::diag_gaussian_kl(mi, stdv, mj, stdv);
      }
    }
  }
  return total / (static_cast<double>(probe.rows()) * m * (m - 1));
}

std::vector<SuiteRow> run_suite(const nn::NetworkParams& policy, const ScenarioConfig& base,
                                std::span<const ScenarioKind> kinds,
                                std::span<const std::uint64_t> seeds, int n_episodes,
                                const SuiteHooks& hooks) {
  // Load each checkpoint once and share it across kinds and seeds.
  std::vector<nn::NetworkParams> pool;
  std::vector<nn::NetworkParams> half;
  const auto n_ped = static_cast<std::size_t>(std::max(0, base.n_agents - 1));
  for (auto k : kinds) {
    if (distinct_pool_kind(k) && pool.empty() && n_ped > 0) {
      ScenarioConfig probe_cfg = base;
      probe_cfg.kind = k;
      pool = build_scenario(probe_cfg).pedestrian_policies;
    }
    if (k == ScenarioKind::SO && half.empty() && n_ped > 0) {
      ScenarioConfig probe_cfg = base;
      probe_cfg.kind = k;
      half = build_scenario(probe_cfg).pedestrian_policies;
    }
  }
  std::vector<SuiteRow> rows;
  for (auto seed : seeds) {
    std::vector<MetricsSummary> per_kind;
    for (auto k : kinds) {
      ScenarioConfig cfg = base;
      cfg.kind = k;
      cfg.seed = seed;
      cfg.agent_visible.reset();
      std::vector<nn::NetworkParams> peds;
      if (distinct_pool_kind(k)) peds = pool;
      if (k == ScenarioKind::SO) peds = half;
      const Scenario scenario = build_scenario(cfg, std::move(peds));
      sim::TrajectoryLogWriter* log = hooks.trajectory_log ? hooks.trajectory_log(k, seed) : nullptr;
      const auto results = run_episodes(policy, scenario, n_episodes, log);
      if (hooks.on_results) hooks.on_results(k, seed, results);
      per_kind.push_back(summarize(results, cfg.sim.v_max));
      rows.push_back({to_string(k), seed, per_kind.back()});
    }
    if (per_kind.empty()) continue;
    MetricsSummary avg;
    const double nk = static_cast<double>(per_kind.size());
    auto average_of = [&](auto member) -> std::optional<MeanStd> {
      MeanStd acc;
      int count = 0;
      for (const auto& s : per_kind) {
        const auto& v = s.*member;
        if (!v) continue;
        acc.mean += v->mean;
        acc.std += v->std;
        ++count;
      }
      if (count == 0) return std::nullopt;
      acc.mean /= count;
      acc.std /= count;
      return acc;
    };
    for (const auto& s : per_kind) {
      avg.episodes += s.episodes;
      avg.success_rate += s.success_rate / nk;
      avg.collision_rate += s.collision_rate / nk;
      avg.timeout_rate += s.timeout_rate / nk;
    }
    avg.extra_time = average_of(&MetricsSummary::extra_time);
    avg.extra_distance = average_of(&MetricsSummary::extra_distance);
    avg.average_speed = average_of(&MetricsSummary::average_speed);
    rows.push_back({"AVG", seed, avg});
  }
  return rows;
}

void write_results_csv(std::ostream& out, std::span<const SuiteRow> rows) {
  out << kResultsHeader << '\n';
  auto pair = [](const std::optional<MeanStd>& v) {
    return v ? fmt(v->mean) + "," + fmt(v->std) : std::string("NA,NA");
  };
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    out << r.kind << ',' << r.seed << ',' << m.episodes << ',' << fmt(m.success_rate) << ','
        << pair(m.extra_time) << ',' << pair(m.extra_distance) << ',' << pair(m.average_speed)
        << ',' << fmt(m.timeout_rate) << '\n';
  }
}

}  // namespace crowdiv::eval
