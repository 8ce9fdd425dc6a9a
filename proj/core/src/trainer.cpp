#include "crowdiv/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace crowdiv::train {

namespace {

constexpr double kProbFloor = 1e-8;

using config::ConfigError;

void require(bool ok, const char* field, const char* what) {
  if (!ok) throw ConfigError(field, what);
}

double floored_log(double p) { return std::log(std::max(p, kProbFloor)); }

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

/// Calls f(minibatch) over one shuffled pass of `batch`.
template <typename F>
void for_each_minibatch(const FlatBatch& batch, int minibatch_size, Rng& rng, F&& f) {
  const std::size_t n = batch.size();
  const auto idx = shuffled_indices(n, rng);
  const std::size_t mb = static_cast<std::size_t>(std::max(1, minibatch_size));
  for (std::size_t start = 0; start < n; start += mb) {
    const std::size_t end = std::min(n, start + mb);
    f(batch.rows(std::span<const std::size_t>(idx).subspan(start, end - start)));
  }
}

void check_finite(double loss, const char* what) {
  if (!std::isfinite(loss)) throw nn::NumericError(std::string(what) + ": non-finite loss");
}

template <typename Group>
void adam_on(Group params, const std::vector<std::span<const double>>& grads, nn::AdamState& adam) {
  nn::adam_step(params, grads, adam);
}

nn::AdamState make_adam(std::vector<std::span<double>> group, double lr) {
  return nn::AdamState(nn::total_size(group), lr);
}

/// Per-column population standard deviation.
Eigen::RowVectorXd column_std(const nn::Matrix& x) {
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const nn::Matrix centered = x.rowwise() - mean;
  return (centered.array().square().colwise().sum() / static_cast<double>(std::max<Eigen::Index>(1, x.rows())))
      .sqrt();
}

nn::Matrix add_feature_noise(const nn::Matrix& x, const Eigen::RowVectorXd& scale, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  nn::Matrix out = x;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    for (Eigen::Index c = 0; c < out.cols(); ++c) out(r, c) += scale(c) * normal(rng);
  }
  return out;
}

std::vector<int> labels_of(const FlatBatch& b) { return b.tokens; }

}  // namespace

IntrinsicMode parse_intrinsic_mode(const std::string& text) {
  if (text == "full") return IntrinsicMode::full;
  if (text == "sa") return IntrinsicMode::state_action;
  if (text == "s") return IntrinsicMode::state;
  if (text == "none") return IntrinsicMode::none;
  throw ConfigError("intrinsic", "expected one of full, sa, s, none; got '" + text + "'");
}

std::string to_string(IntrinsicMode mode) {
  switch (mode) {
    case IntrinsicMode::full: return "full";
    case IntrinsicMode::state_action: return "sa";
    case IntrinsicMode::state: return "s";
    case IntrinsicMode::none: return "none";
  }
  return "full";
}

void TrainConfig::validate() const {
  require(gamma > 0.0 && gamma <= 1.0, "gamma", "must be in (0, 1]");
  require(lambda > 0.0 && lambda <= 1.0, "lambda", "must be in (0, 1]");
  require(clip_eps > 0.0 && clip_eps < 1.0, "clip_eps", "must be in (0, 1)");
  require(alpha >= 0.0, "alpha", "must be >= 0");
  require(M >= 1, "M", "must be >= 1");
  require(N >= 1, "N", "must be >= 1");
  require(epochs_pi >= 0, "epochs_pi", "must be >= 0");
  require(epochs_v >= 0, "epochs_v", "must be >= 0");
  require(epochs_d >= 0, "epochs_d", "must be >= 0");
  require(lr_ppo > 0.0, "lr_ppo", "must be > 0");
  require(lr_value > 0.0, "lr_value", "must be > 0");
  require(embed_init_std >= 0.0, "embed_init_std", "must be >= 0");
  require(lr_disc > 0.0, "lr_disc", "must be > 0");
  require(batch_horizon >= 1, "batch_horizon", "must be >= 1");
  require(minibatch_size >= 1, "minibatch_size", "must be >= 1");
  require(total_updates >= 0, "total_updates", "must be >= 0");
  parse_intrinsic_mode(intrinsic);
  require(disc_noise >= 0.0, "disc_noise", "must be >= 0");
  require(checkpoint_every >= 0, "checkpoint_every", "must be >= 0");
  require(success_window >= 1, "success_window", "must be >= 1");
  require(embed_dim >= 1, "embed_dim", "must be >= 1");
  require(scan_hidden1 >= 1, "scan_hidden1", "must be >= 1");
  require(scan_hidden2 >= 1, "scan_hidden2", "must be >= 1");
  require(head_hidden >= 1, "head_hidden", "must be >= 1");
  require(disc_hidden >= 1, "disc_hidden", "must be >= 1");
  try {
    sim_cfg.validate();
    reward_cfg.validate();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    const auto colon = msg.find(": ");
    if (colon == std::string::npos) throw ConfigError("config", msg);
    throw ConfigError(msg.substr(0, colon), msg.substr(colon + 2));
  }
}

nn::NetworkShape TrainConfig::shape() const {
  nn::NetworkShape s;
  s.k_frames = sim_cfg.k_frames;
  s.n_beams = sim_cfg.n_beams;
  s.num_tokens = M;
  s.embed_dim = embed_dim;
  s.scan_hidden1 = scan_hidden1;
  s.scan_hidden2 = scan_hidden2;
  s.head_hidden = head_hidden;
  s.disc_hidden = disc_hidden;
  s.v_max = sim_cfg.v_max;
  s.w_max = sim_cfg.w_max;
  return s;
}

TrainConfig TrainConfig::from_key_values(const config::KeyValues& kv) {
  TrainConfig cfg;
  config::read_fields(cfg, kv);
  cfg.validate();
  return cfg;
}

config::KeyValues TrainConfig::to_key_values() const { return config::write_fields(*this); }

std::size_t RolloutBatch::size() const {
  std::size_t n = 0;
  for (const auto& s : segments) n += s.steps.size();
  return n;
}

FlatBatch FlatBatch::rows(std::span<const std::size_t> idx) const {
  FlatBatch out;
  const auto n = static_cast<Eigen::Index>(idx.size());
  out.features.resize(n, features.cols());
  out.actions.resize(n, actions.cols());
  out.executed_actions.resize(n, executed_actions.cols());
  out.old_log_prob.resize(n);
  out.advantages.resize(n);
  out.returns.resize(n);
  out.tokens.resize(idx.size());
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto i = static_cast<Eigen::Index>(idx[static_cast<std::size_t>(r)]);
    out.features.row(r) = features.row(i);
    out.actions.row(r) = actions.row(i);
    out.executed_actions.row(r) = executed_actions.row(i);
    out.old_log_prob(r) = old_log_prob(i);
    out.advantages(r) = advantages(i);
    out.returns(r) = returns(i);
    out.tokens[static_cast<std::size_t>(r)] = tokens[static_cast<std::size_t>(i)];
  }
  return out;
}

FlatBatch flatten(const RolloutBatch& batch) {
  FlatBatch out;
  const auto n = static_cast<Eigen::Index>(batch.size());
  Eigen::Index feat = 0;
  for (const auto& s : batch.segments) {
    if (!s.steps.empty()) {
      feat = static_cast<Eigen::Index>(s.steps.front().features.size());
      break;
    }
  }
  out.features.resize(n, feat);
  out.actions.resize(n, 2);
  out.executed_actions.resize(n, 2);
  out.old_log_prob.resize(n);
  out.advantages.setZero(n);
  out.returns.setZero(n);
  out.tokens.reserve(static_cast<std::size_t>(n));
  Eigen::Index r = 0;
  for (const auto& s : batch.segments) {
    const bool has_adv = s.advantages.size() == s.steps.size();
    for (std::size_t t = 0; t < s.steps.size(); ++t, ++r) {
      const Transition& tr = s.steps[t];
      if (static_cast<Eigen::Index>(tr.features.size()) != feat) {
        throw std::invalid_argument("flatten: inconsistent feature width");
      }
      out.features.row(r) = Eigen::Map<const Eigen::RowVectorXd>(tr.features.data(), feat);
      out.actions(r, 0) = tr.action[0];
      out.actions(r, 1) = tr.action[1];
      out.executed_actions(r, 0) = tr.executed[0];
      out.executed_actions(r, 1) = tr.executed[1];
      out.old_log_prob(r) = tr.log_prob;
      if (has_adv) {
        out.advantages(r) = s.advantages[t];
        out.returns(r) = s.returns[t];
      }
      out.tokens.push_back(tr.token);
    }
  }
  return out;
}

std::vector<int> sample_tokens(int n, int m, Rng& rng) {
  if (m < 1) throw std::invalid_argument("sample_tokens: M must be >= 1");
  std::vector<int> out(static_cast<std::size_t>(std::max(0, n)));
  std::uniform_int_distribution<int> dist(0, m - 1);
  for (auto& z : out) z = dist(rng);
  return out;
}

double intrinsic_reward(std::span<const double> q_sa, std::span<const double> q_s, int token,
                        IntrinsicMode mode) {
  if (token < 0 || static_cast<std::size_t>(token) >= q_sa.size() || q_sa.size() != q_s.size()) {
    throw std::out_of_range("intrinsic_reward: token out of range");
  }
  const auto z = static_cast<std::size_t>(token);
  const double log_m = std::log(static_cast<double>(q_sa.size()));
  switch (mode) {
    case IntrinsicMode::full: return floored_log(q_sa[z]) - floored_log(q_s[z]);
    case IntrinsicMode::state_action: return floored_log(q_sa[z]) + log_m;
    case IntrinsicMode::state: return floored_log(q_s[z]) + log_m;
    case IntrinsicMode::none: return 0.0;
  }
  return 0.0;
}

std::vector<double> intrinsic_rewards(const nn::Matrix& q_sa, const nn::Matrix& q_s,
                                      std::span<const int> tokens, IntrinsicMode mode) {
  if (q_sa.rows() != q_s.rows() || q_sa.cols() != q_s.cols() ||
      static_cast<std::size_t>(q_sa.rows()) != tokens.size()) {
    throw std::invalid_argument("intrinsic_rewards: shape mismatch");
  }
  std::vector<double> out(tokens.size());
  const auto m = static_cast<std::size_t>(q_sa.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out[i] = intrinsic_reward(std::span<const double>(q_sa.row(r).data(), m),
                              std::span<const double>(q_s.row(r).data(), m), tokens[i], mode);
  }
  return out;
}

std::vector<double> mix_rewards(std::span<const double> task, std::span<const double> intrinsic,
                                double alpha) {
  if (task.size() != intrinsic.size()) throw std::invalid_argument("mix_rewards: length mismatch");
  std::vector<double> out(task.size());
  for (std::size_t i = 0; i < task.size(); ++i) out[i] = task[i] + alpha * intrinsic[i];
  return out;
}

std::vector<double> gae(std::span<const double> rewards, std::span<const double> values,
                        double bootstrap_value, double gamma, double lambda,
                        std::span<const std::uint8_t> dones) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) throw std::invalid_argument("gae: length mismatch");
  std::vector<double> adv(n);
  double carry = 0.0;
  double next_value = bootstrap_value;
  for (std::size_t k = n; k-- > 0;) {
    const double live = dones[k] ? 0.0 : 1.0;
    const double delta = rewards[k] + gamma * live * next_value - values[k];
    carry = delta + gamma * lambda * live * carry;
    adv[k] = carry;
    next_value = values[k];
  }
  return adv;
}

std::vector<double> discounted_returns(std::span<const double> rewards, double bootstrap_value,
                                       double gamma, std::span<const std::uint8_t> dones) {
  const std::size_t n = rewards.size();
  if (dones.size() != n) throw std::invalid_argument("discounted_returns: length mismatch");
  std::vector<double> out(n);
  double carry = bootstrap_value;
  for (std::size_t k = n; k-- > 0;) {
    if (dones[k]) carry = 0.0;
    carry = rewards[k] + gamma * carry;
    out[k] = carry;
  }
  return out;
}

void compute_advantages(RolloutBatch& batch, double gamma, double lambda) {
  for (auto& s : batch.segments) {
    std::vector<double> rewards;
    std::vector<double> values;
    std::vector<std::uint8_t> dones;
    for (const auto& t : s.steps) {
      rewards.push_back(t.reward + gamma * t.truncation_value);
      values.push_back(t.value);
      dones.push_back(t.done ? 1 : 0);
    }
    s.advantages = gae(rewards, values, s.bootstrap_value, gamma, lambda, dones);
    s.returns = discounted_returns(rewards, s.bootstrap_value, gamma, dones);
  }
}

nn::Vector normalized(const nn::Vector& x) {
  if (x.size() == 0) return x;
  const double mean = x.mean();
  const double var = (x.array() - mean).square().mean();
  return (x.array() - mean) / (std::sqrt(var) + 1e-8);
}

SampledAction sample_action(std::span<const double> mean, std::span<const double> std, double v_max,
                            double w_max, Rng& rng) {
  if (mean.size() != 2 || std.size() != 2) throw std::invalid_argument("sample_action: need 2-d");
  std::normal_distribution<double> normal(0.0, 1.0);
  SampledAction out;
  for (std::size_t k = 0; k < 2; ++k) out.raw[k] = mean[k] + std[k] * normal(rng);
  out.clamped[0] = std::clamp(out.raw[0], 0.0, v_max);
  out.clamped[1] = std::clamp(out.raw[1], -w_max, w_max);
  const double log_std[2] = {std::log(std[0]), std::log(std[1])};
  out.log_prob = nn::diag_gaussian_log_prob(out.raw, mean, log_std);
  return out;
}

namespace {

struct SurrogateTerms {
  nn::Vector log_prob;
  nn::Vector ratio;
  double objective = 0.0;
};

SurrogateTerms surrogate_terms(const FlatBatch& b, const nn::PolicyOutput& out, double clip_eps) {
  SurrogateTerms t;
  const auto n = static_cast<Eigen::Index>(b.size());
  t.log_prob.resize(n);
  t.ratio.resize(n);
  const double ls[2] = {out.log_std(0), out.log_std(1)};
  double sum = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const double a[2] = {b.actions(r, 0), b.actions(r, 1)};
    const double m[2] = {out.mean(r, 0), out.mean(r, 1)};
    t.log_prob(r) = nn::diag_gaussian_log_prob(a, m, ls);
    t.ratio(r) = std::exp(t.log_prob(r) - b.old_log_prob(r));
    const double A = b.advantages(r);
    const double clipped = std::clamp(t.ratio(r), 1.0 - clip_eps, 1.0 + clip_eps);
    sum += std::min(t.ratio(r) * A, clipped * A);
  }
  t.objective = n > 0 ? sum / static_cast<double>(n) : 0.0;
  return t;
}

}  // namespace

double ppo_surrogate(const FlatBatch& b, const nn::NetworkParams& p, double clip_eps) {
  const auto out = nn::policy_forward(p, b.features, b.tokens);
  return surrogate_terms(b, out, clip_eps).objective;
}

double ppo_loss_and_grad(const FlatBatch& b, const nn::NetworkParams& p, double clip_eps,
                         nn::NetworkParams& grads) {
  nn::PolicyTape tape;
  const auto out = nn::policy_forward(p, b.features, b.tokens, &tape);
  const auto terms = surrogate_terms(b, out, clip_eps);
  const double loss = -terms.objective;
  check_finite(loss, "ppo_policy_update");
  const auto n = static_cast<Eigen::Index>(b.size());
  if (n == 0) return loss;
  const Eigen::Vector2d var = (2.0 * out.log_std).array().exp();
  nn::Matrix grad_mean = nn::Matrix::Zero(n, 2);
  Eigen::Vector2d grad_log_std = Eigen::Vector2d::Zero();
  for (Eigen::Index r = 0; r < n; ++r) {
    const double A = b.advantages(r);
    const double ratio = terms.ratio(r);
    const double clipped = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    if (ratio * A > clipped * A) continue;  // clipped branch is the min: no gradient
    // d(-ratio*A/n)/dlogp = -ratio*A/n
    const double g = -ratio * A / static_cast<double>(n);
    for (int k = 0; k < 2; ++k) {
      const double diff = b.actions(r, k) - out.mean(r, k);
      grad_mean(r, k) += g * diff / var(k);
      grad_log_std(k) += g * (diff * diff / var(k) - 1.0);
    }
  }
  nn::policy_backward(p, tape, grad_mean, grad_log_std, grads);
  return loss;
}

double value_loss_and_grad(const FlatBatch& b, const nn::NetworkParams& p, nn::NetworkParams& grads) {
  nn::ValueTape tape;
  const nn::Vector v = nn::value_forward(p, b.features, b.tokens, &tape);
  const auto n = static_cast<double>(std::max<std::size_t>(1, b.size()));
  const nn::Vector diff = v - b.returns;
  const double loss = diff.squaredNorm() / n;
  check_finite(loss, "value_update");
  nn::value_backward(p, tape, (2.0 / n) * diff, grads);
  return loss;
}

PolicyUpdateStats ppo_policy_update(const FlatBatch& batch, nn::NetworkParams& params,
                                    nn::AdamState& adam, const TrainConfig& cfg, Rng& rng) {
  PolicyUpdateStats stats;
  if (batch.size() == 0) return stats;
  FlatBatch b = batch;
  if (cfg.normalize_advantages) b.advantages = normalized(b.advantages);
  nn::NetworkParams grads = nn::NetworkParams::zeros(params.shape);
  for (int epoch = 0; epoch < cfg.epochs_pi; ++epoch) {
    double loss_sum = 0.0;
    std::size_t rows = 0;
    for_each_minibatch(b, cfg.minibatch_size, rng, [&](const FlatBatch& mb) {
      grads.set_zero();
      const double loss = ppo_loss_and_grad(mb, params, cfg.clip_eps, grads);
      loss_sum += loss * static_cast<double>(mb.size());
      rows += mb.size();
      const nn::NetworkParams& g = grads;
      adam_on(params.policy_group(), g.policy_group(), adam);
    });
    stats.loss = loss_sum / static_cast<double>(std::max<std::size_t>(1, rows));
  }
  if (!params.all_finite()) throw nn::NumericError("ppo_policy_update: non-finite parameters");
  return stats;
}

double value_update(const FlatBatch& batch, nn::NetworkParams& params, nn::AdamState& adam,
                    const TrainConfig& cfg, Rng& rng) {
  if (batch.size() == 0) return 0.0;
  nn::NetworkParams grads = nn::NetworkParams::zeros(params.shape);
  double last = 0.0;
  for (int epoch = 0; epoch < cfg.epochs_v; ++epoch) {
    double loss_sum = 0.0;
    std::size_t rows = 0;
    for_each_minibatch(batch, cfg.minibatch_size, rng, [&](const FlatBatch& mb) {
      grads.set_zero();
      loss_sum += value_loss_and_grad(mb, params, grads) * static_cast<double>(mb.size());
      rows += mb.size();
      const nn::NetworkParams& g = grads;
      adam_on(params.value_group(), g.value_group(), adam);
    });
    last = loss_sum / static_cast<double>(std::max<std::size_t>(1, rows));
  }
  if (!params.all_finite()) throw nn::NumericError("value_update: non-finite parameters");
  return last;
}

DiscStats evaluate_discriminators(const FlatBatch& batch, const nn::NetworkParams& params) {
  DiscStats s;
  if (batch.size() == 0) return s;
  const auto labels = labels_of(batch);
  const auto sa = nn::discriminator_cross_entropy(
      params.disc_sa, nn::state_action_input(batch.features, batch.executed_actions), labels);
  const auto st = nn::discriminator_cross_entropy(params.disc_s, batch.features, labels);
  s.sa_loss = sa.loss;
  s.sa_acc = sa.accuracy;
  s.s_loss = st.loss;
  s.s_acc = st.accuracy;
  return s;
}

DiscStats discriminator_update(const FlatBatch& batch, nn::NetworkParams& params,
                               nn::AdamState& adam_sa, nn::AdamState& adam_s,
                               const TrainConfig& cfg, Rng& rng) {
  DiscStats stats;
  if (batch.size() == 0) return stats;
  const nn::Matrix sa_all = nn::state_action_input(batch.features, batch.executed_actions);
  const Eigen::RowVectorXd sa_scale = cfg.disc_noise * column_std(sa_all);
  const Eigen::RowVectorXd s_scale = cfg.disc_noise * column_std(batch.features);
  nn::DenseNet g_sa = params.disc_sa.zeros_like();
  nn::DenseNet g_s = params.disc_s.zeros_like();
  for (int epoch = 0; epoch < cfg.epochs_d; ++epoch) {
    DiscStats sum;
    std::size_t rows = 0;
    for_each_minibatch(batch, cfg.minibatch_size, rng, [&](const FlatBatch& mb) {
      const auto labels = labels_of(mb);
      const nn::Matrix sa_in =
          add_feature_noise(nn::state_action_input(mb.features, mb.executed_actions), sa_scale, rng);
      const nn::Matrix s_in = add_feature_noise(mb.features, s_scale, rng);
      g_sa.set_zero();
      g_s.set_zero();
      const auto r_sa = nn::discriminator_cross_entropy(params.disc_sa, sa_in, labels, &g_sa);
      const auto r_s = nn::discriminator_cross_entropy(params.disc_s, s_in, labels, &g_s);
      const double w = static_cast<double>(mb.size());
      sum.sa_loss += r_sa.loss * w;
      sum.sa_acc += r_sa.accuracy * w;
      sum.s_loss += r_s.loss * w;
      sum.s_acc += r_s.accuracy * w;
      rows += mb.size();
      const nn::DenseNet& gsa = g_sa;
      const nn::DenseNet& gs = g_s;
      adam_on(params.disc_sa.parameter_spans(), gsa.parameter_spans(), adam_sa);
      adam_on(params.disc_s.parameter_spans(), gs.parameter_spans(), adam_s);
    });
    const double n = static_cast<double>(std::max<std::size_t>(1, rows));
    stats = {sum.sa_loss / n, sum.s_loss / n, sum.sa_acc / n, sum.s_acc / n};
  }
  if (!params.all_finite()) throw nn::NumericError("discriminator_update: non-finite parameters");
  return stats;
}

std::string format_curve_row(const CurveRow& row) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                static_cast<long long>(row.update), row.mean_task_reward, row.mean_intrinsic_reward,
                row.disc_sa_loss, row.disc_s_loss, row.disc_sa_acc, row.success_rate_rolling);
  return buf;
}

namespace {

sim::CrowdEnv make_env(const TrainConfig& cfg, Rng& rng) {
  sim::SpawnConfig spawn;
  spawn.n_agents = cfg.N;
  spawn.sim = cfg.sim_cfg;
  sim::World world = sim::spawn_episode(spawn, rng);
  const auto tokens = sample_tokens(cfg.N, cfg.M, rng);
  for (std::size_t i = 0; i < world.agents.size(); ++i) world.agents[i].token = tokens[i];
  sim::CrowdEnv env(cfg.sim_cfg, cfg.reward_cfg, std::move(world));
  env.reset_sensors();
  return env;
}

TrainConfig config_of(const ckpt::Checkpoint& c) {
  std::istringstream in(c.config_text);
  return TrainConfig::from_key_values(config::parse_key_values(in));
}

sim::CrowdEnv restore_env(const TrainConfig& cfg, const ckpt::Checkpoint& c, Rng& rng) {
  if (!c.runtime) return make_env(cfg, rng);
  sim::CrowdEnv env(cfg.sim_cfg, cfg.reward_cfg, c.runtime->world);
  auto& hist = env.histories();
  if (c.runtime->histories.size() != hist.size()) {
    throw ckpt::CorruptCheckpoint("runtime histories do not match the agent count");
  }
  for (std::size_t i = 0; i < hist.size(); ++i) {
    hist[i].clear();
    for (const auto& frame : c.runtime->histories[i]) {
      hist[i].push_back(sim::LidarScan{frame, cfg.sim_cfg.max_range});
    }
  }
  return env;
}

}  // namespace

Trainer::Trainer(TrainConfig cfg)
    : cfg_((cfg.validate(), std::move(cfg))),
      rng_(static_cast<std::uint64_t>(cfg_.seed)),
      params_(nn::NetworkParams::initialized(cfg_.shape(), rng_, cfg_.log_std_init, cfg_.embed_init_std)),
      adam_policy_(make_adam(params_.policy_group(), cfg_.lr_ppo)),
      adam_value_(make_adam(params_.value_group(), cfg_.lr_value)),
      adam_disc_sa_(make_adam(params_.disc_sa_group(), cfg_.lr_disc)),
      adam_disc_s_(make_adam(params_.disc_s_group(), cfg_.lr_disc)),
      env_(make_env(cfg_, rng_)) {}

Trainer::Trainer(const ckpt::Checkpoint& c)
    : cfg_(config_of(c)),
      rng_(ckpt::rng_from_string(c.rng_state)),
      params_(c.params),
      adam_policy_(c.adam_policy),
      adam_value_(c.adam_value),
      adam_disc_sa_(c.adam_disc_sa),
      adam_disc_s_(c.adam_disc_s),
      env_(restore_env(cfg_, c, rng_)),
      update_(c.update) {
  if (!(params_.shape == cfg_.shape())) {
    throw ckpt::ShapeMismatch("checkpoint parameters do not match its stored config");
  }
  if (c.runtime) {
    recent_outcomes_.assign(c.runtime->recent_outcomes.begin(), c.runtime->recent_outcomes.end());
  }
}

void Trainer::start_episode(std::size_t agent) {
  sim::respawn_agent(env_.world(), agent, cfg_.sim_cfg, rng_);
  env_.world().agents[agent].token = sample_tokens(1, cfg_.M, rng_)[0];
  env_.reset_sensor(agent);
}

double Trainer::rolling_success() const {
  if (recent_outcomes_.empty()) return 0.0;
  double s = 0.0;
  for (auto o : recent_outcomes_) s += o;
  return s / static_cast<double>(recent_outcomes_.size());
}

RolloutBatch Trainer::collect() {
  const std::size_t n = env_.size();
  const IntrinsicMode mode = cfg_.intrinsic_mode();
  RolloutBatch batch;
  batch.segments.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    batch.segments[i].agent_id = static_cast<int>(i);
    batch.segments[i].steps.reserve(static_cast<std::size_t>(cfg_.batch_horizon));
  }
  const double v_max = cfg_.sim_cfg.v_max;
  const double w_max = cfg_.sim_cfg.w_max;
  std::vector<std::vector<double>> feats(n);
  std::vector<int> tokens(n);
  std::vector<sim::Command> commands(n);
  for (int step = 0; step < cfg_.batch_horizon; ++step) {
    for (std::size_t i = 0; i < n; ++i) {
      feats[i] = env_.features(i);
      tokens[i] = env_.world().agents[i].token;
    }
    const nn::Matrix x = nn::stack_rows(feats);
    const auto pol = nn::policy_forward(params_, x, tokens);
    const nn::Vector values = nn::value_forward(params_, x, tokens);
    const double stdv[2] = {std::exp(pol.log_std(0)), std::exp(pol.log_std(1))};
    std::vector<SampledAction> acts(n);
    nn::Matrix executed(static_cast<Eigen::Index>(n), 2);
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const double mean[2] = {pol.mean(r, 0), pol.mean(r, 1)};
      acts[i] = sample_action(mean, stdv, v_max, w_max, rng_);
      executed(r, 0) = acts[i].clamped[0];
      executed(r, 1) = acts[i].clamped[1];
      commands[i] = {acts[i].clamped[0], acts[i].clamped[1]};
    }
    std::vector<double> intrinsic(n, 0.0);
    if (mode != IntrinsicMode::none) {
      const nn::Matrix q_sa =
          nn::discriminator_forward(params_.disc_sa, nn::state_action_input(x, executed));
      const nn::Matrix q_s = nn::discriminator_forward(params_.disc_s, x);
      intrinsic = intrinsic_rewards(q_sa, q_s, tokens, mode);
    }
    const auto result = env_.step(commands);
    const auto mixed = mix_rewards(result.rewards, intrinsic, cfg_.alpha);
    std::vector<double> truncation(n, 0.0);
    {
      std::vector<std::vector<double>> final_feats;
      std::vector<int> final_tokens;
      std::vector<std::size_t> timed_out;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& ev = result.events.agents[i];
        if (ev.timed_out && !ev.reached_goal && !ev.collided) {
          timed_out.push_back(i);
          final_feats.push_back(env_.features(i));
          final_tokens.push_back(tokens[i]);
        }
      }
      if (!timed_out.empty()) {
        const nn::Vector v = nn::value_forward(params_, nn::stack_rows(final_feats), final_tokens);
        for (std::size_t k = 0; k < timed_out.size(); ++k) {
          truncation[timed_out[k]] = v(static_cast<Eigen::Index>(k));
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      Transition t;
      t.features = std::move(feats[i]);
      t.action = acts[i].raw;
      t.executed = acts[i].clamped;
      t.log_prob = acts[i].log_prob;
      t.value = values(static_cast<Eigen::Index>(i));
      t.task_reward = result.rewards[i];
      t.intrinsic_reward = intrinsic[i];
      t.reward = mixed[i];
      t.token = tokens[i];
      t.done = result.events.agents[i].terminal();
      t.truncation_value = truncation[i];
      t.agent_id = static_cast<int>(i);
      t.step_index = step;
      if (!std::isfinite(t.log_prob) || !std::isfinite(t.reward)) {
        throw nn::NumericError("collect: non-finite log_prob or reward");
      }
      batch.segments[i].steps.push_back(std::move(t));
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto& ev = result.events.agents[i];
      if (!ev.terminal()) continue;
      recent_outcomes_.push_back(ev.reached_goal ? 1 : 0);
      while (static_cast<int>(recent_outcomes_.size()) > cfg_.success_window) {
        recent_outcomes_.pop_front();
      }
      start_episode(i);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    feats[i] = env_.features(i);
    tokens[i] = env_.world().agents[i].token;
  }
  const nn::Vector boot = nn::value_forward(params_, nn::stack_rows(feats), tokens);
  for (std::size_t i = 0; i < n; ++i) {
    auto& seg = batch.segments[i];
    seg.bootstrap_value =
        (seg.steps.empty() || seg.steps.back().done) ? 0.0 : boot(static_cast<Eigen::Index>(i));
  }
  return batch;
}

CurveRow Trainer::update() {
  RolloutBatch batch = collect();
  compute_advantages(batch, cfg_.gamma, cfg_.lambda);
  const FlatBatch flat = flatten(batch);

  CurveRow row;
  row.update = update_ + 1;
  double task = 0.0;
  double intr = 0.0;
  for (const auto& s : batch.segments) {
    for (const auto& t : s.steps) {
      task += t.task_reward;
      intr += t.intrinsic_reward;
    }
  }
  const double count = static_cast<double>(std::max<std::size_t>(1, flat.size()));
  row.mean_task_reward = task / count;
  row.mean_intrinsic_reward = intr / count;
  const DiscStats held_out = evaluate_discriminators(flat, params_);
  row.disc_sa_loss = held_out.sa_loss;
  row.disc_s_loss = held_out.s_loss;
  row.disc_sa_acc = held_out.sa_acc;

  ppo_policy_update(flat, params_, adam_policy_, cfg_, rng_);
  value_update(flat, params_, adam_value_, cfg_, rng_);
  discriminator_update(flat, params_, adam_disc_sa_, adam_disc_s_, cfg_, rng_);

  ++update_;
  row.success_rate_rolling = rolling_success();
  return row;
}

ckpt::Checkpoint Trainer::checkpoint() const {
  ckpt::Checkpoint c;
  c.params = params_;
  c.adam_policy = adam_policy_;
  c.adam_value = adam_value_;
  c.adam_disc_sa = adam_disc_sa_;
  c.adam_disc_s = adam_disc_s_;
  c.config_text = config::to_text(cfg_.to_key_values());
  c.rng_state = ckpt::rng_to_string(rng_);
  c.update = update_;
  ckpt::RuntimeSnapshot rt;
  rt.world = env_.world();
  for (const auto& h : env_.histories()) {
    std::vector<std::vector<double>> frames;
    for (const auto& scan : h) frames.push_back(scan.ranges);
    rt.histories.push_back(std::move(frames));
  }
  rt.recent_outcomes.assign(recent_outcomes_.begin(), recent_outcomes_.end());
  c.runtime = std::move(rt);
  return c;
}

std::vector<CurveRow> train(Trainer& trainer, const TrainHooks& hooks) {
  std::vector<CurveRow> rows;
  const auto& cfg = trainer.config();
  while (trainer.updates_done() < cfg.total_updates) {
    rows.push_back(trainer.update());
    if (hooks.on_update) hooks.on_update(rows.back(), trainer);
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 &&
        trainer.updates_done() % cfg.checkpoint_every == 0) {
      hooks.on_checkpoint(trainer);
    }
  }
  return rows;
}

}  // namespace crowdiv::train
