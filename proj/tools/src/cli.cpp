#include "cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>

#include "crowdiv/checkpoint.hpp"
#include "crowdiv/config.hpp"
#include "crowdiv/eval.hpp"
#include "crowdiv/trainer.hpp"
#include "crowdiv/trajectory_log.hpp"

namespace crowdiv::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

/// A required input file is absent.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

fs::path resolve_output(const std::string& out, const Environment& env) {
  fs::path p(out);
  if (p.is_relative() && env.output_root) p = *env.output_root / p;
  return p;
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw MissingArtifact(what + " not found: " + p.string());
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(text);
  while (std::getline(in, cur, sep)) {
    const auto b = cur.find_first_not_of(" \t");
    const auto e = cur.find_last_not_of(" \t");
    if (b != std::string::npos) parts.push_back(cur.substr(b, e - b + 1));
  }
  return parts;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

json config_json(const config::KeyValues& kv) {
  json j = json::object();
  for (const auto& [k, v] : kv) j[k] = v;
  return j;
}

/// Manifest with checksums of every regular file under `dir` except itself.
void write_manifest(const fs::path& dir, const std::string& command, const std::string& config_path,
                    const config::KeyValues& snapshot, std::int64_t seed, bool with_checksums) {
  json m;
  m["command"] = command;
  m["config_path"] = config_path;
  m["config"] = config_json(snapshot);
  m["seed"] = seed;
  m["output_dir"] = dir.string();
  json sums = json::object();
  if (with_checksums) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) sums[fs::relative(f, dir).generic_string()] = sha256_file(f);
  }
  m["checksums"] = sums;
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

void make_layout(const fs::path& dir) {
  fs::create_directories(dir / "checkpoints");
  fs::create_directories(dir / "logs");
}

config::KeyValues load_with_overrides(const std::string& path, const std::vector<std::string>& sets) {
  config::KeyValues kv;
  if (!path.empty()) {
    require_file(path, "config file");
    kv = config::load_key_values(path);
  }
  for (const auto& s : sets) config::apply_override(kv, s);
  return kv;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string out = "train";
  std::string resume;
};

int cmd_train(const TrainArgs& a, std::ostream& out, const Environment& env) {
  std::unique_ptr<train::Trainer> trainer;
  config::KeyValues snapshot;
  if (!a.resume.empty()) {
    require_file(a.resume, "checkpoint");
    auto ck = ckpt::load_checkpoint(a.resume);
    std::istringstream in(ck.config_text);
    auto kv = config::parse_key_values(in);
    for (const auto& s : a.sets) config::apply_override(kv, s);
    const auto cfg = train::TrainConfig::from_key_values(kv);
    if (!(cfg.shape() == ck.params.shape)) {
      throw config::ConfigError("config", "overrides change the network shape of the checkpoint");
    }
    ck.config_text = config::to_text(cfg.to_key_values());
    trainer = std::make_unique<train::Trainer>(ck);
  } else {
    const auto kv = load_with_overrides(a.config, a.sets);
    trainer = std::make_unique<train::Trainer>(train::TrainConfig::from_key_values(kv));
  }
  const auto& cfg = trainer->config();
  snapshot = cfg.to_key_values();

  const fs::path dir = resolve_output(a.out, env);
  make_layout(dir);
  write_manifest(dir, "train", a.resume.empty() ? a.config : a.resume, snapshot, cfg.seed, false);
  write_text(dir / "config.txt", config::to_text(snapshot));

  std::ofstream curves(dir / "curves.csv", std::ios::binary);
  std::ofstream log(dir / "logs" / "train.log", std::ios::binary);
  curves << train::kCurveHeader << '\n';
  auto save = [&](const train::Trainer& t, const std::string& name) {
    ckpt::save_checkpoint(t.checkpoint(), dir / "checkpoints" / name);
  };
  train::TrainHooks hooks;
  hooks.on_update = [&](const train::CurveRow& row, const train::Trainer&) {
    curves << train::format_curve_row(row) << '\n';
    log << "update " << row.update << " task_reward " << row.mean_task_reward << " intrinsic "
        << row.mean_intrinsic_reward << " disc_sa_acc " << row.disc_sa_acc << " success "
        << row.success_rate_rolling << '\n';
  };
  hooks.on_checkpoint = [&](const train::Trainer& t) {
    char name[64];
    std::snprintf(name, sizeof name, "update_%06lld.ckpt", static_cast<long long>(t.updates_done()));
    save(t, name);
  };
  train::train(*trainer, hooks);
  curves.close();
  log.close();
  save(*trainer, "final.ckpt");
  write_manifest(dir, "train", a.resume.empty() ? a.config : a.resume, snapshot, cfg.seed, true);
  out << "trained " << trainer->updates_done() << " updates -> " << (dir / "checkpoints" / "final.ckpt").string()
      << '\n';
  return kOk;
}

// ----------------------------------------------------------------- eval

/// Keys of a scenario file; anything else is applied to the checkpoint's
/// simulator/reward configuration.
struct EvalSettings {
  std::string kinds = "NH,IN,VA,SO,VO,SF";
  int n_agents = 5;
  int episodes = 100;
  std::string seeds = "1";
  std::string pedestrian_checkpoints;
  std::string half_trained_checkpoint;
  int agent_token = 0;
  double heading_gain = 2.0;
  ped::SocialForceParams sf;
  ped::VOParams vo;

  template <typename F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <typename F>
  void visit(F&& f) const { visit_impl(*this, f); }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& s, F& f) {
    f("kinds", s.kinds);
    f("n_agents", s.n_agents);
    f("episodes", s.episodes);
    f("seeds", s.seeds);
    f("pedestrian_checkpoints", s.pedestrian_checkpoints);
    f("half_trained_checkpoint", s.half_trained_checkpoint);
    f("agent_token", s.agent_token);
    f("heading_gain", s.heading_gain);
    f("sf_relaxation_time", s.sf.relaxation_time);
    f("sf_desired_speed", s.sf.desired_speed);
    f("sf_interaction_strength", s.sf.interaction_strength);
    f("sf_interaction_range", s.sf.interaction_range);
    f("sf_obstacle_strength", s.sf.obstacle_strength);
    f("sf_obstacle_range", s.sf.obstacle_range);
    f("vo_time_horizon", s.vo.time_horizon);
    f("vo_neighbor_radius", s.vo.neighbor_radius);
    f("vo_max_speed", s.vo.max_speed);
  }
};

struct EvalArgs {
  std::string checkpoint;
  std::string scenario;
  std::vector<std::string> sets;
  std::string kinds;
  int episodes = 0;
  std::string seeds;
  std::string out = "eval";
  bool trajectories = false;
};

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split(text, ',')) {
    std::int64_t v = 0;
    config::parse_value("seeds", s, v);
    if (v < 0) throw config::ConfigError("seeds", "must be >= 0");
    seeds.push_back(static_cast<std::uint64_t>(v));
  }
  if (seeds.empty()) throw config::ConfigError("seeds", "at least one seed required");
  return seeds;
}

int cmd_eval(const EvalArgs& a, std::ostream& out, const Environment& env) {
  require_file(a.checkpoint, "checkpoint");
  auto kv = load_with_overrides(a.scenario, a.sets);
  if (!a.kinds.empty()) kv["kinds"] = a.kinds;
  if (a.episodes > 0) kv["episodes"] = std::to_string(a.episodes);
  if (!a.seeds.empty()) kv["seeds"] = a.seeds;

  EvalSettings settings;
  config::KeyValues own;
  config::KeyValues rest;
  {
    config::KeyValues probe = config::write_fields(settings);
    for (const auto& [k, v] : kv) (probe.count(k) ? own : rest)[k] = v;
  }
  config::read_fields(settings, own);
  std::vector<eval::ScenarioKind> kinds;
  try {
    for (const auto& k : split(settings.kinds, ',')) kinds.push_back(eval::parse_kind(k));
  } catch (const eval::ScenarioError& e) {
    throw config::ConfigError("kinds", e.what());
  }
  if (kinds.empty()) throw config::ConfigError("kinds", "at least one kind required");
  if (settings.episodes < 1) throw config::ConfigError("episodes", "must be >= 1");
  const auto seeds = parse_seeds(settings.seeds);

  const auto ck = ckpt::load_checkpoint(a.checkpoint);
  std::istringstream cin(ck.config_text);
  auto train_kv = config::parse_key_values(cin);
  for (const auto& [k, v] : rest) {
    if (!train_kv.count(k)) throw config::ConfigError(k, "unknown key");
    train_kv[k] = v;
  }
  const auto tcfg = train::TrainConfig::from_key_values(train_kv);

  eval::ScenarioConfig base;
  base.n_agents = settings.n_agents;
  for (const auto& p : split(settings.pedestrian_checkpoints, ',')) {
    require_file(p, "pedestrian checkpoint");
    base.pedestrian_checkpoints.emplace_back(p);
  }
  if (!settings.half_trained_checkpoint.empty()) {
    require_file(settings.half_trained_checkpoint, "half-trained checkpoint");
    base.half_trained_checkpoint = settings.half_trained_checkpoint;
  }
  base.social_force = settings.sf;
  base.vo = settings.vo;
  base.heading_gain = settings.heading_gain;
  base.agent_token = settings.agent_token;
  base.sim = tcfg.sim_cfg;
  base.reward = tcfg.reward_cfg;

  const fs::path dir = resolve_output(a.out, env);
  make_layout(dir);
  config::KeyValues snapshot = config::write_fields(settings);
  for (const auto& [k, v] : rest) snapshot[k] = v;
  snapshot["checkpoint"] = a.checkpoint;
  write_manifest(dir, "eval", a.scenario, snapshot, static_cast<std::int64_t>(seeds.front()), false);

  std::ofstream episodes(dir / "logs" / "episodes.csv", std::ios::binary);
  episodes << "kind,seed,episode,outcome,elapsed,path_length,mean_speed,straight_line\n";
  std::map<std::string, std::unique_ptr<std::ofstream>> traj_files;
  std::map<std::string, std::unique_ptr<sim::TrajectoryLogWriter>> traj_writers;
  eval::SuiteHooks hooks;
  hooks.on_results = [&](eval::ScenarioKind k, std::uint64_t seed,
                         std::span<const eval::EpisodeResult> results) {
    char buf[256];
    for (std::size_t i = 0; i < results.size(); ++i) {
      const auto& r = results[i];
      std::snprintf(buf, sizeof buf, "%s,%llu,%zu,%s,%.6f,%.6f,%.6f,%.6f\n",
                    eval::to_string(k).c_str(), static_cast<unsigned long long>(seed), i,
                    eval::to_string(r.outcome).c_str(), r.elapsed, r.path_length, r.mean_speed,
                    r.straight_line);
      episodes << buf;
    }
  };
  if (a.trajectories) {
    hooks.trajectory_log = [&](eval::ScenarioKind k, std::uint64_t seed) {
      const std::string name = "trajectories_" + eval::to_string(k) + "_" + std::to_string(seed) + ".csv";
      auto f = std::make_unique<std::ofstream>(dir / "logs" / name, std::ios::binary);
      auto w = std::make_unique<sim::TrajectoryLogWriter>(*f);
      auto* raw = w.get();
      traj_files[name] = std::move(f);
      traj_writers[name] = std::move(w);
      return raw;
    };
  }
  std::vector<eval::SuiteRow> rows;
  try {
    rows = eval::run_suite(ck.params, base, kinds, seeds, settings.episodes, hooks);
  } catch (const eval::ScenarioError& e) {
    throw config::ConfigError("scenario", e.what());
  }
  episodes.close();
  traj_writers.clear();
  traj_files.clear();
  {
    std::ofstream results(dir / "results.csv", std::ios::binary);
    eval::write_results_csv(results, rows);
  }
  write_manifest(dir, "eval", a.scenario, snapshot, static_cast<std::int64_t>(seeds.front()), true);
  out << "evaluated " << kinds.size() << " kinds x " << seeds.size() << " seeds -> "
      << (dir / "results.csv").string() << '\n';
  return kOk;
}

// ------------------------------------------------------------ diversity

struct DiversityArgs {
  std::string checkpoint;
  std::string probe;
  std::string probe_checkpoint;
  int probe_steps = 1000;
  std::int64_t probe_seed = 1;
  int probe_agents = 0;
  int m = 0;
  std::string policy_id;
  std::string out = "diversity";
};

int cmd_diversity(const DiversityArgs& a, std::ostream& out, const Environment& env) {
  require_file(a.checkpoint, "checkpoint");
  if (a.probe.empty() == a.probe_checkpoint.empty()) {
    throw config::ConfigError("probe", "give exactly one of --probe or --probe-checkpoint");
  }
  if (!a.probe.empty()) require_file(a.probe, "probe file");
  if (!a.probe_checkpoint.empty()) require_file(a.probe_checkpoint, "probe checkpoint");
  const auto ck = ckpt::load_checkpoint(a.checkpoint);
  const int m = ck.params.shape.num_tokens;
  if (a.m > 0 && a.m != m) {
    throw config::ConfigError("M", "requested M=" + std::to_string(a.m) + " but checkpoint has M=" +
                                       std::to_string(m));
  }
  const fs::path dir = resolve_output(a.out, env);
  make_layout(dir);
  config::KeyValues snapshot{{"checkpoint", a.checkpoint},
                             {"probe", a.probe},
                             {"probe_checkpoint", a.probe_checkpoint},
                             {"probe_steps", std::to_string(a.probe_steps)},
                             {"probe_seed", std::to_string(a.probe_seed)}};
  write_manifest(dir, "diversity", a.checkpoint, snapshot, a.probe_seed, false);

  nn::Matrix probe;
  if (!a.probe.empty()) {
    std::ifstream in(a.probe);
    probe = eval::read_probe(in);
  } else {
    const auto base = ckpt::load_checkpoint(a.probe_checkpoint);
    std::istringstream cin(base.config_text);
    const auto bcfg = train::TrainConfig::from_key_values(config::parse_key_values(cin));
    const int agents = a.probe_agents > 0 ? a.probe_agents : bcfg.N;
    probe = eval::generate_probe(base.params, bcfg.sim_cfg, bcfg.reward_cfg, agents, a.probe_steps,
                                 static_cast<std::uint64_t>(a.probe_seed));
    std::ofstream pf(dir / "logs" / "probe.csv", std::ios::binary);
    eval::write_probe(pf, probe);
  }
  if (probe.cols() != ck.params.shape.feature_dim()) {
    throw config::ConfigError("probe", "probe rows have " + std::to_string(probe.cols()) +
                                           " features, checkpoint expects " +
                                           std::to_string(ck.params.shape.feature_dim()));
  }
  const double d = eval::diversity_metric(ck.params, probe);
  {
    std::ofstream f(dir / "diversity.csv", std::ios::binary);
    char buf[128];
    std::snprintf(buf, sizeof buf, "%d,%.9g\n", m, d);
    f << eval::kDiversityHeader << '\n'
      << (a.policy_id.empty() ? fs::path(a.checkpoint).stem().string() : a.policy_id) << ',' << buf;
  }
  write_manifest(dir, "diversity", a.checkpoint, snapshot, a.probe_seed, true);
  out << "D = " << d << '\n';
  return kOk;
}

// --------------------------------------------------------------- replay

int cmd_replay(const std::string& log_path, const std::string& output, std::ostream& out) {
  require_file(log_path, "trajectory log");
  std::ifstream in(log_path);
  const auto rows = sim::read_trajectory_log(in);
  std::ofstream f(output, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + output);
  if (rows.empty()) {
    out << "empty log\n";
    return kOk;
  }
  std::map<std::pair<std::int64_t, int>, std::vector<const sim::TrajectoryRow*>> groups;
  for (const auto& r : rows) groups[{r.episode_id, r.agent_id}].push_back(&r);
  f << "episode_id,agent_id,point,t,x,y,speed\n";
  char buf[256];
  for (const auto& [key, pts] : groups) {
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto& r = *pts[i];
      std::snprintf(buf, sizeof buf, "%lld,%d,%zu,%.6f,%.6f,%.6f,%.6f\n",
                    static_cast<long long>(key.first), key.second, i, r.t, r.x, r.y, std::abs(r.v));
      f << buf;
    }
  }
  out << groups.size() << " polylines\n";
  return kOk;
}

}  // namespace

Environment Environment::from_process() {
  Environment env;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) env.output_root = root;
  return env;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::string hex;
  char byte[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(byte, sizeof byte, "%02x", digest[i]);
    hex += byte;
  }
  return hex;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
        const Environment& env) {
  CLI::App app{"Behavior-token crowd navigation: train, evaluate, measure diversity, replay"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train token-conditioned policies");
  train_cmd->add_option("-c,--config", ta.config, "Key-value config file");
  train_cmd->add_option("--set", ta.sets, "Override key=value (repeatable)");
  train_cmd->add_option("-o,--out", ta.out, "Output directory");
  train_cmd->add_option("--resume", ta.resume, "Continue from a checkpoint");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on scenario kinds");
  eval_cmd->add_option("-k,--checkpoint", ea.checkpoint, "Policy checkpoint")->required();
  eval_cmd->add_option("-s,--scenario", ea.scenario, "Scenario config file");
  eval_cmd->add_option("--set", ea.sets, "Override key=value (repeatable)");
  eval_cmd->add_option("--kinds", ea.kinds, "Comma-separated kinds (NH,IN,VA,SO,VO,SF)");
  eval_cmd->add_option("--episodes", ea.episodes, "Episodes per kind and seed");
  eval_cmd->add_option("--seeds", ea.seeds, "Comma-separated seeds");
  eval_cmd->add_option("-o,--out", ea.out, "Output directory");
  eval_cmd->add_flag("--trajectories", ea.trajectories, "Write per-step trajectory logs");

  DiversityArgs da;
  auto* div_cmd = app.add_subcommand("diversity", "Measure action diversity D of a checkpoint");
  div_cmd->add_option("-k,--checkpoint", da.checkpoint, "Policy checkpoint")->required();
  div_cmd->add_option("--probe", da.probe, "Probe-state CSV");
  div_cmd->add_option("--probe-checkpoint", da.probe_checkpoint,
                      "Generate probe states with this (no-intrinsic) checkpoint");
  div_cmd->add_option("--probe-steps", da.probe_steps, "Probe length");
  div_cmd->add_option("--probe-seed", da.probe_seed, "Probe seed");
  div_cmd->add_option("--probe-agents", da.probe_agents, "Agents while generating probes");
  div_cmd->add_option("-M,--M", da.m, "Expected number of behaviors");
  div_cmd->add_option("--policy-id", da.policy_id, "Identifier written to the report");
  div_cmd->add_option("-o,--out", da.out, "Output directory");

  std::string replay_log;
  std::string replay_out;
  auto* replay_cmd = app.add_subcommand("replay", "Export plot-ready paths from a trajectory log");
  replay_cmd->add_option("-l,--log", replay_log, "Trajectory log CSV")->required();
  replay_cmd->add_option("-o,--output", replay_out, "Output CSV")->required();

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }

  try {
    if (*train_cmd) return cmd_train(ta, out, env);
    if (*eval_cmd) return cmd_eval(ea, out, env);
    if (*div_cmd) return cmd_diversity(da, out, env);
    if (*replay_cmd) return cmd_replay(replay_log, replay_out, out);
  } catch (const config::ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const MissingArtifact& e) {
    err << "missing: " << e.what() << '\n';
    return kMissingArtifact;
  } catch (const ckpt::CheckpointNotFound& e) {
    err << "missing: " << e.what() << '\n';
    return kMissingArtifact;
  } catch (const sim::LogParseError& e) {
    err << "error: line " << e.line() << ": " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kConfigError;
}

}  // namespace crowdiv::cli
