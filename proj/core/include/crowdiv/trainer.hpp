#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "crowdiv/checkpoint.hpp"
#include "crowdiv/config.hpp"
#include "crowdiv/env.hpp"
#include "crowdiv/models.hpp"
#include "crowdiv/nn.hpp"
#include "crowdiv/sim.hpp"

/// Behavior-token-conditioned PPO with the mutual-information intrinsic
/// reward log q(z|s,a) - log q(z|s).
namespace crowdiv::train {

using sim::Rng;

/// Which intrinsic reward is mixed into the task reward.
enum class IntrinsicMode {
  full,          ///< log q(z|s,a) - log q(z|s)
  state_action,  ///< log q(z|s,a) + log M
  state,         ///< log q(z|s) + log M
  none,
};

IntrinsicMode parse_intrinsic_mode(const std::string& text);
std::string to_string(IntrinsicMode mode);

struct TrainConfig {
  double gamma = 0.99;
  double lambda = 0.95;
  double clip_eps = 0.1;
  double alpha = 0.1;
  int M = 5;
  int N = 5;
  int epochs_pi = 3;
  int epochs_v = 3;
  int epochs_d = 1;
  double lr_ppo = 5e-5;
  double lr_value = 5e-5;
  double lr_disc = 5e-5;
  int batch_horizon = 128;
  int minibatch_size = 128;
  std::int64_t total_updates = 100;
  std::int64_t seed = 1;
  std::string intrinsic = "full";
  /// Scale of the per-feature Gaussian noise on discriminator inputs, in
  /// units of the batch standard deviation.
  double disc_noise = 1.0;
  double log_std_init = -0.5;
  double embed_init_std = 0.1;
  bool normalize_advantages = true;
  /// Periodic checkpoint interval in updates (0 disables).
  std::int64_t checkpoint_every = 50;
  int success_window = 100;

  int embed_dim = 32;
  int scan_hidden1 = 512;
  int scan_hidden2 = 256;
  int head_hidden = 128;
  int disc_hidden = 128;

  sim::SimConfig sim_cfg;
  sim::RewardConfig reward_cfg;

  template <typename F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <typename F>
  void visit(F&& f) const { visit_impl(*this, f); }

  /// Throws config::ConfigError naming the first invalid field.
  void validate() const;
  nn::NetworkShape shape() const;
  IntrinsicMode intrinsic_mode() const { return parse_intrinsic_mode(intrinsic); }

  static TrainConfig from_key_values(const config::KeyValues& kv);
  config::KeyValues to_key_values() const;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& s, F& f) {
    f("gamma", s.gamma);
    f("lambda", s.lambda);
    f("clip_eps", s.clip_eps);
    f("alpha", s.alpha);
    f("M", s.M);
    f("N", s.N);
    f("epochs_pi", s.epochs_pi);
    f("epochs_v", s.epochs_v);
    f("epochs_d", s.epochs_d);
    f("lr_ppo", s.lr_ppo);
    f("lr_value", s.lr_value);
    f("lr_disc", s.lr_disc);
    f("batch_horizon", s.batch_horizon);
    f("minibatch_size", s.minibatch_size);
    f("total_updates", s.total_updates);
    f("seed", s.seed);
    f("intrinsic", s.intrinsic);
    f("disc_noise", s.disc_noise);
    f("log_std_init", s.log_std_init);
    f("embed_init_std", s.embed_init_std);
    f("normalize_advantages", s.normalize_advantages);
    f("checkpoint_every", s.checkpoint_every);
    f("success_window", s.success_window);
    f("embed_dim", s.embed_dim);
    f("scan_hidden1", s.scan_hidden1);
    f("scan_hidden2", s.scan_hidden2);
    f("head_hidden", s.head_hidden);
    f("disc_hidden", s.disc_hidden);
    f("dt", s.sim_cfg.dt);
    f("v_max", s.sim_cfg.v_max);
    f("w_max", s.sim_cfg.w_max);
    f("n_beams", s.sim_cfg.n_beams);
    f("max_range", s.sim_cfg.max_range);
    f("noise_std", s.sim_cfg.noise_std);
    f("k_frames", s.sim_cfg.k_frames);
    f("max_steps", s.sim_cfg.max_steps);
    f("room_width", s.sim_cfg.room_width);
    f("room_height", s.sim_cfg.room_height);
    f("agent_radius", s.sim_cfg.agent_radius);
    f("spawn_clearance", s.sim_cfg.spawn_clearance);
    f("min_goal_distance", s.sim_cfg.min_goal_distance);
    f("wall_margin", s.sim_cfg.wall_margin);
    f("r_goal", s.reward_cfg.r_goal);
    f("r_col", s.reward_cfg.r_col);
    f("r_step", s.reward_cfg.r_step);
    f("d_col", s.reward_cfg.d_col);
    f("crash_range", s.reward_cfg.crash_range);
  }
};

struct Transition {
  std::vector<double> features;
  std::array<double, 2> action{};    ///< raw (unclamped) Gaussian sample
  std::array<double, 2> executed{};  ///< action clamped to the box, as stepped
  double log_prob = 0.0;
  double value = 0.0;
  double task_reward = 0.0;
  double intrinsic_reward = 0.0;
  double reward = 0.0;  ///< task + alpha * intrinsic
  int token = 0;
  bool done = false;
  /// V of the final state when the episode ended by timeout; bootstraps the
  /// cut-off tail.
  double truncation_value = 0.0;
  int agent_id = 0;
  std::int64_t step_index = 0;
};

/// One agent's consecutive transitions within a collection window.
struct Segment {
  int agent_id = 0;
  std::vector<Transition> steps;
  double bootstrap_value = 0.0;  ///< V of the state after the last step (0 if it was terminal)
  std::vector<double> advantages;
  std::vector<double> returns;
};

struct RolloutBatch {
  std::vector<Segment> segments;
  std::size_t size() const;
};

/// Row-aligned view of a batch for the update passes.
struct FlatBatch {
  nn::Matrix features;
  nn::Matrix actions;           ///< raw samples, for the policy ratio
  nn::Matrix executed_actions;  ///< clamped, for the discriminators
  nn::Vector old_log_prob;
  nn::Vector advantages;
  nn::Vector returns;
  std::vector<int> tokens;

  std::size_t size() const { return tokens.size(); }
  FlatBatch rows(std::span<const std::size_t> idx) const;
};

FlatBatch flatten(const RolloutBatch& batch);

std::vector<int> sample_tokens(int n, int m, Rng& rng);

/// Intrinsic reward at the agent's own token; probabilities floored at
/// 1e-8 before the log.
double intrinsic_reward(std::span<const double> q_sa, std::span<const double> q_s, int token,
                        IntrinsicMode mode = IntrinsicMode::full);

/// Batched version over rows of discriminator outputs.
std::vector<double> intrinsic_rewards(const nn::Matrix& q_sa, const nn::Matrix& q_s,
                                      std::span<const int> tokens,
                                      IntrinsicMode mode = IntrinsicMode::full);

std::vector<double> mix_rewards(std::span<const double> task, std::span<const double> intrinsic,
                                double alpha);

/// Backward-recursion GAE; a done flag at step t stops bootstrapping past t.
std::vector<double> gae(std::span<const double> rewards, std::span<const double> values,
                        double bootstrap_value, double gamma, double lambda,
                        std::span<const std::uint8_t> dones);

/// Discounted returns with the same boundary handling as gae().
std::vector<double> discounted_returns(std::span<const double> rewards, double bootstrap_value,
                                       double gamma, std::span<const std::uint8_t> dones);

/// Fills advantages and returns of every segment. A timed-out step's
/// reward is credited gamma * truncation_value.
void compute_advantages(RolloutBatch& batch, double gamma, double lambda);

/// Zero mean, unit variance (population std, +1e-8).
nn::Vector normalized(const nn::Vector& x);

/// Gaussian sample clamped to the action box, with the raw sample's log-density.
struct SampledAction {
  std::array<double, 2> raw{};
  std::array<double, 2> clamped{};
  double log_prob = 0.0;
};
SampledAction sample_action(std::span<const double> mean, std::span<const double> std, double v_max,
                            double w_max, Rng& rng);

/// Mean clipped surrogate objective (to be maximized) of `b` under `p`.
double ppo_surrogate(const FlatBatch& b, const nn::NetworkParams& p, double clip_eps);

/// Negative surrogate; accumulates its gradient into the policy group of
/// `grads`. Advantages are used as given.
double ppo_loss_and_grad(const FlatBatch& b, const nn::NetworkParams& p, double clip_eps,
                         nn::NetworkParams& grads);

/// Mean squared error to the returns; accumulates into the value group.
double value_loss_and_grad(const FlatBatch& b, const nn::NetworkParams& p, nn::NetworkParams& grads);

struct PolicyUpdateStats {
  double loss = 0.0;  ///< mean negative surrogate of the last pass
};

/// epochs_pi shuffled minibatch passes of Adam ascent on the clipped surrogate.
/// Advantages are normalized first when cfg.normalize_advantages.
PolicyUpdateStats ppo_policy_update(const FlatBatch& batch, nn::NetworkParams& params,
                                    nn::AdamState& adam, const TrainConfig& cfg, Rng& rng);

/// epochs_v minibatch passes on the squared error to the returns. Returns the
/// mean loss of the last pass.
double value_update(const FlatBatch& batch, nn::NetworkParams& params, nn::AdamState& adam,
                    const TrainConfig& cfg, Rng& rng);

struct DiscStats {
  double sa_loss = 0.0;
  double s_loss = 0.0;
  double sa_acc = 0.0;
  double s_acc = 0.0;
};

/// Clean-input loss/accuracy of both discriminators on `batch`.
DiscStats evaluate_discriminators(const FlatBatch& batch, const nn::NetworkParams& params);

/// epochs_d minibatch passes of cross-entropy with per-feature Gaussian input
/// noise (scale cfg.disc_noise times the batch std). Returns training-pass means.
DiscStats discriminator_update(const FlatBatch& batch, nn::NetworkParams& params,
                               nn::AdamState& adam_sa, nn::AdamState& adam_s,
                               const TrainConfig& cfg, Rng& rng);

/// Per-update training-curve entry. Discriminator columns are held-out
/// values: clean inputs, measured on the fresh batch before training on it.
struct CurveRow {
  std::int64_t update = 0;
  double mean_task_reward = 0.0;
  double mean_intrinsic_reward = 0.0;
  double disc_sa_loss = 0.0;
  double disc_s_loss = 0.0;
  double disc_sa_acc = 0.0;
  double success_rate_rolling = 0.0;
};

inline constexpr const char* kCurveHeader =
    "update,mean_task_reward,mean_intrinsic_reward,disc_sa_loss,disc_s_loss,disc_sa_acc,"
    "success_rate_rolling";
std::string format_curve_row(const CurveRow& row);

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);
  /// Resumes from a checkpoint written by checkpoint(); the config is read
  /// back from the checkpoint text.
  explicit Trainer(const ckpt::Checkpoint& checkpoint);

  const TrainConfig& config() const { return cfg_; }
  const nn::NetworkParams& params() const { return params_; }
  std::int64_t updates_done() const { return update_; }
  const sim::CrowdEnv& env() const { return env_; }

  /// Collects batch_horizon steps for all N agents with the current parameters.
  RolloutBatch collect();
  /// One full iteration: collect, GAE, policy, value, discriminators.
  CurveRow update();

  ckpt::Checkpoint checkpoint() const;

 private:
  void start_episode(std::size_t agent);
  double rolling_success() const;

  TrainConfig cfg_;
  Rng rng_;
  nn::NetworkParams params_;
  nn::AdamState adam_policy_;
  nn::AdamState adam_value_;
  nn::AdamState adam_disc_sa_;
  nn::AdamState adam_disc_s_;
  sim::CrowdEnv env_;
  std::deque<std::uint8_t> recent_outcomes_;
  std::int64_t update_ = 0;
};

struct TrainHooks {
  /// Called after every update with the new curve row.
  std::function<void(const CurveRow&, const Trainer&)> on_update;
  /// Called when update % checkpoint_every == 0.
  std::function<void(const Trainer&)> on_checkpoint;
};

/// Runs updates until `trainer` has done cfg.total_updates. Returns the rows.
std::vector<CurveRow> train(Trainer& trainer, const TrainHooks& hooks = {});

}  // namespace crowdiv::train
