#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "crowdiv/trainer.hpp"
#include "grad_check.hpp"

using namespace crowdiv;
using namespace crowdiv::train;

namespace {

TrainConfig tiny_config(int m = 3) {
  TrainConfig c;
  c.N = 2;
  c.M = m;
  c.sim_cfg.n_beams = 8;
  c.sim_cfg.k_frames = 2;
  c.scan_hidden1 = 16;
  c.scan_hidden2 = 8;
  c.head_hidden = 8;
  c.disc_hidden = 16;
  c.embed_dim = 4;
  c.batch_horizon = 16;
  c.minibatch_size = 8;
  c.total_updates = 3;
  return c;
}

// O(T^2) direct double sum: A_t = sum_l (gamma lambda)^l delta_{t+l}, with
// the sum stopping after the first done step.
std::vector<double> gae_oracle(const std::vector<double>& r, const std::vector<double>& v, double boot,
                               double gamma, double lambda, const std::vector<std::uint8_t>& done) {
  const std::size_t n = r.size();
  std::vector<double> delta(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double next = done[t] ? 0.0 : (t + 1 < n ? v[t + 1] : boot);
    delta[t] = r[t] + gamma * next - v[t];
  }
  std::vector<double> adv(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    double w = 1.0;
    for (std::size_t k = t; k < n; ++k) {
      adv[t] += w * delta[k];
      if (done[k]) break;
      w *= gamma * lambda;
    }
  }
  return adv;
}

FlatBatch random_batch(const nn::NetworkParams& p, int n, std::mt19937_64& rng) {
  const auto& s = p.shape;
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<int> tok(0, s.num_tokens - 1);
  FlatBatch b;
  b.features.resize(n, s.feature_dim());
  for (Eigen::Index i = 0; i < b.features.size(); ++i) b.features.data()[i] = 0.5 + 0.2 * g(rng);
  b.tokens.resize(static_cast<std::size_t>(n));
  for (auto& t : b.tokens) t = tok(rng);
  const auto pol = nn::policy_forward(p, b.features, b.tokens);
  b.actions.resize(n, 2);
  b.executed_actions.resize(n, 2);
  b.old_log_prob.resize(n);
  b.advantages.resize(n);
  b.returns.resize(n);
  const double sd[2] = {std::exp(pol.log_std(0)), std::exp(pol.log_std(1))};
  for (int r = 0; r < n; ++r) {
    const double m[2] = {pol.mean(r, 0), pol.mean(r, 1)};
    const auto a = sample_action(m, sd, s.v_max, s.w_max, rng);
    b.actions(r, 0) = a.raw[0];
    b.actions(r, 1) = a.raw[1];
    b.executed_actions(r, 0) = a.clamped[0];
    b.executed_actions(r, 1) = a.clamped[1];
    b.old_log_prob(r) = a.log_prob;
    b.advantages(r) = g(rng);
    b.returns(r) = g(rng);
  }
  return b;
}

// Unclipped importance-weighted surrogate, evaluated independently.
double vanilla_surrogate(const FlatBatch& b, const nn::NetworkParams& p) {
  const auto pol = nn::policy_forward(p, b.features, b.tokens);
  const double ls[2] = {pol.log_std(0), pol.log_std(1)};
  double total = 0.0;
  for (Eigen::Index r = 0; r < b.features.rows(); ++r) {
    const double a[2] = {b.actions(r, 0), b.actions(r, 1)};
    const double m[2] = {pol.mean(r, 0), pol.mean(r, 1)};
    total += std::exp(nn::diag_gaussian_log_prob(a, m, ls) - b.old_log_prob(r)) * b.advantages(r);
  }
  return total / static_cast<double>(b.features.rows());
}

nn::NetworkParams small_params(int m, std::uint64_t seed) {
  TrainConfig c = tiny_config(m);
  sim::Rng rng(seed);
  auto p = nn::NetworkParams::initialized(c.shape(), rng, -0.5);
  p.policy_head.layers().back().weight *= 50.0;
  return p;
}

}  // namespace

TEST_CASE("sample_tokens") {
  Rng rng(1);
  for (int z : sample_tokens(50, 1, rng)) CHECK(z == 0);
  std::vector<int> counts(5, 0);
  for (int z : sample_tokens(100000, 5, rng)) ++counts[static_cast<std::size_t>(z)];
  for (int c : counts) {
    CHECK(c / 1e5 >= 0.19);
    CHECK(c / 1e5 <= 0.21);
  }
  Rng a(3), b(3);
  CHECK(sample_tokens(100, 5, a) == sample_tokens(100, 5, b));
}

TEST_CASE("intrinsic reward") {
  const std::vector<double> uniform(5, 0.2);
  CHECK(intrinsic_reward(uniform, uniform, 3) == doctest::Approx(0.0));
  std::vector<double> sa{0.0, 0.0, 1.0, 0.0, 0.0};
  CHECK(intrinsic_reward(sa, uniform, 2) == doctest::Approx(std::log(5.0)));
  // floor at 1e-8
  CHECK(intrinsic_reward(sa, uniform, 0) == doctest::Approx(std::log(1e-8) - std::log(0.2)));
  CHECK(intrinsic_reward(sa, uniform, 2, IntrinsicMode::none) == 0.0);
  CHECK(intrinsic_reward(uniform, sa, 1, IntrinsicMode::state_action) == doctest::Approx(0.0));
  CHECK(intrinsic_reward(sa, uniform, 1, IntrinsicMode::state) == doctest::Approx(0.0));

  std::mt19937_64 rng(2);
  const nn::Matrix qa = nn::softmax_rows(nn::Matrix::Random(20, 4) * 3.0);
  const nn::Matrix qs = nn::softmax_rows(nn::Matrix::Random(20, 4) * 3.0);
  std::vector<int> tokens(20);
  for (int i = 0; i < 20; ++i) tokens[static_cast<std::size_t>(i)] = i % 4;
  for (auto mode : {IntrinsicMode::full, IntrinsicMode::state_action, IntrinsicMode::state}) {
    const auto batch = intrinsic_rewards(qa, qs, tokens, mode);
    for (int i = 0; i < 20; ++i) {
      const std::vector<double> ra(qa.row(i).data(), qa.row(i).data() + 4);
      const std::vector<double> rs(qs.row(i).data(), qs.row(i).data() + 4);
      CHECK(batch[static_cast<std::size_t>(i)] == intrinsic_reward(ra, rs, tokens[static_cast<std::size_t>(i)], mode));
    }
  }
  CHECK(parse_intrinsic_mode("sa") == IntrinsicMode::state_action);
  CHECK_THROWS_AS(parse_intrinsic_mode("bogus"), config::ConfigError);
}

TEST_CASE("mix_rewards") {
  const std::vector<double> task{0.5, -1.0};
  const std::vector<double> intr{1.0, 2.0};
  CHECK(mix_rewards(task, intr, 0.0) == task);
  const auto m = mix_rewards(task, intr, 0.1);
  CHECK(m[0] == doctest::Approx(0.6));
  CHECK(m[1] == doctest::Approx(-0.8));
  const std::vector<double> short_intr{1.0};
  CHECK_THROWS(mix_rewards(task, short_intr, 0.1));
}

TEST_CASE("gae: closed cases and brute-force oracle") {
  const std::vector<double> r1{1.0}, v1{0.0};
  const std::vector<std::uint8_t> d1{1};
  CHECK(gae(r1, v1, 5.0, 0.99, 0.95, d1)[0] == doctest::Approx(1.0));

  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 1.0);
  std::bernoulli_distribution done(0.1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 50;
    std::vector<double> r(n), v(n);
    std::vector<std::uint8_t> d(n);
    for (std::size_t t = 0; t < n; ++t) {
      r[t] = g(rng);
      v[t] = g(rng);
      d[t] = done(rng);
    }
    const double boot = g(rng);
    const auto a = gae(r, v, boot, 0.99, 0.95, d);
    const auto o = gae_oracle(r, v, boot, 0.99, 0.95, d);
    for (std::size_t t = 0; t < n; ++t) CHECK(std::abs(a[t] - o[t]) < 1e-10);

    // lambda = 0 reduces to one-step TD errors.
    const auto td = gae(r, v, boot, 0.9, 0.0, d);
    for (std::size_t t = 0; t < n; ++t) {
      const double next = d[t] ? 0.0 : (t + 1 < n ? v[t + 1] : boot);
      CHECK(td[t] == doctest::Approx(r[t] + 0.9 * next - v[t]));
    }
    // lambda = 1 with zero values gives discounted returns.
    const std::vector<double> zeros(n, 0.0);
    const auto mc = gae(r, zeros, boot, 0.97, 1.0, d);
    const auto ret = discounted_returns(r, boot, 0.97, d);
    for (std::size_t t = 0; t < n; ++t) CHECK(std::abs(mc[t] - ret[t]) < 1e-10);
  }
}

TEST_CASE("sample_action") {
  Rng rng(5);
  const double mean[2] = {0.4, -0.2};
  const double tiny[2] = {1e-12, 1e-12};
  const auto a = sample_action(mean, tiny, 1.0, 1.0, rng);
  CHECK(a.clamped[0] == doctest::Approx(0.4));
  CHECK(a.clamped[1] == doctest::Approx(-0.2));

  const double zero[2] = {0.0, 0.0};
  const double ones[2] = {1.0, 1.0};
  const double ls[2] = {0.0, 0.0};
  CHECK(nn::diag_gaussian_log_prob(zero, zero, ls) == doctest::Approx(-1.83788).epsilon(1e-5));

  const int n = 100000;
  double sum0 = 0.0, sum1 = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto s = sample_action(mean, ones, 10.0, 10.0, rng);
    sum0 += s.raw[0];
    sum1 += s.raw[1];
    REQUIRE(std::isfinite(s.log_prob));
    REQUIRE(s.clamped[0] >= 0.0);
  }
  CHECK(std::abs(sum0 / n - 0.4) < 3.0 / std::sqrt(n));
  CHECK(std::abs(sum1 / n + 0.2) < 3.0 / std::sqrt(n));

  const auto c = sample_action(mean, ones, 1.0, 1.0, rng);
  CHECK(c.clamped[0] >= 0.0);
  CHECK(c.clamped[0] <= 1.0);
  CHECK(std::abs(c.clamped[1]) <= 1.0);
  const double logstd[2] = {0.0, 0.0};
  const double raw[2] = {c.raw[0], c.raw[1]};
  CHECK(c.log_prob == doctest::Approx(nn::diag_gaussian_log_prob(raw, mean, logstd)));
}

TEST_CASE("ppo: first step gradient equals the vanilla policy gradient") {
  std::mt19937_64 rng(6);
  auto p = small_params(3, 6);
  const FlatBatch b = random_batch(p, 12, rng);
  nn::NetworkParams grads = nn::NetworkParams::zeros(p.shape);
  const double loss = ppo_loss_and_grad(b, p, 0.1, grads);
  CHECK(loss == doctest::Approx(-b.advantages.mean()));
  CHECK(ppo_surrogate(b, p, 0.1) == doctest::Approx(b.advantages.mean()));
  // grads hold d(-surrogate); compare with d(-vanilla) by finite differences.
  auto neg_vanilla = [&] { return -vanilla_surrogate(b, p); };
  auto ps = p.policy_group();
  auto gs = std::as_const(grads).policy_group();
  double worst = 0.0;
  for (std::size_t k = 0; k < ps.size(); ++k) {
    worst = std::max(worst, crowdiv::testing::max_gradient_error(ps[k], gs[k], neg_vanilla, 30, rng));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("ppo: clipped surrogate gradient matches finite differences away from kinks") {
  std::mt19937_64 rng(7);
  auto p = small_params(3, 7);
  const FlatBatch b = random_batch(p, 12, rng);
  // Move the policy so some ratios leave the clip interval.
  for (auto s : p.policy_group()) {
    for (double& x : s) x += 0.05 * std::normal_distribution<double>(0.0, 1.0)(rng);
  }
  nn::NetworkParams grads = nn::NetworkParams::zeros(p.shape);
  ppo_loss_and_grad(b, p, 0.1, grads);
  auto loss = [&] { return -ppo_surrogate(b, p, 0.1); };
  auto ps = p.policy_group();
  auto gs = std::as_const(grads).policy_group();
  double worst = 0.0;
  for (std::size_t k = 0; k < ps.size(); ++k) {
    worst = std::max(worst, crowdiv::testing::max_gradient_error(ps[k], gs[k], loss, 30, rng));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("ppo update: zero advantages leave params unchanged") {
  std::mt19937_64 rng(8);
  auto p = small_params(3, 8);
  FlatBatch b = random_batch(p, 16, rng);
  b.advantages.setZero();
  TrainConfig cfg = tiny_config();
  std::size_t n = 0;
  for (auto s : p.policy_group()) n += s.size();
  nn::AdamState adam(n, 1e-3);
  const auto before = p;
  Rng r(1);
  ppo_policy_update(b, p, adam, cfg, r);
  const auto pa = before.all_spans();
  const auto pb = std::as_const(p).all_spans();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(std::equal(pa[i].begin(), pa[i].end(), pb[i].begin()));
}

TEST_CASE("ppo update: single transition ascent and advantage-scale invariance") {
  std::mt19937_64 rng(9);
  auto p = small_params(3, 9);
  FlatBatch one = random_batch(p, 1, rng);
  one.advantages(0) = 1.0;
  TrainConfig cfg = tiny_config();
  cfg.normalize_advantages = false;
  cfg.epochs_pi = 1;
  std::size_t n = 0;
  for (auto s : p.policy_group()) n += s.size();
  nn::AdamState adam(n, 1e-5);
  const double before = ppo_surrogate(one, p, cfg.clip_eps);
  Rng r(1);
  ppo_policy_update(one, p, adam, cfg, r);
  CHECK(ppo_surrogate(one, p, cfg.clip_eps) > before);

  FlatBatch b = random_batch(p, 16, rng);
  FlatBatch scaled = b;
  scaled.advantages *= 7.3;
  TrainConfig norm = tiny_config();
  auto p1 = p, p2 = p;
  nn::AdamState a1(n, 1e-3), a2(n, 1e-3);
  Rng r1(2), r2(2);
  ppo_policy_update(b, p1, a1, norm, r1);
  ppo_policy_update(scaled, p2, a2, norm, r2);
  const auto s1 = std::as_const(p1).policy_group();
  const auto s2 = std::as_const(p2).policy_group();
  double diff = 0.0;
  for (std::size_t i = 0; i < s1.size(); ++i) {
    for (std::size_t k = 0; k < s1[i].size(); ++k) diff = std::max(diff, std::abs(s1[i][k] - s2[i][k]));
  }
  CHECK(diff < 1e-9);
}

TEST_CASE("value loss: zero gradient at the returns, unit loss, monotone decrease") {
  std::mt19937_64 rng(10);
  auto p = small_params(2, 10);
  FlatBatch b = random_batch(p, 8, rng);
  b.returns = nn::value_forward(p, b.features, b.tokens);
  nn::NetworkParams g = nn::NetworkParams::zeros(p.shape);
  CHECK(value_loss_and_grad(b, p, g) == doctest::Approx(0.0));
  for (auto s : std::as_const(g).value_group()) {
    for (double x : s) CHECK(std::abs(x) < 1e-12);
  }

  auto zero = p;
  zero.value_head.layers().back().weight.setZero();
  zero.value_head.layers().back().bias.setZero();
  b.returns.setOnes();
  nn::NetworkParams g2 = nn::NetworkParams::zeros(p.shape);
  CHECK(value_loss_and_grad(b, zero, g2) == doctest::Approx(1.0));

  // Finite-difference check.
  b.returns = nn::Vector::Random(8);
  nn::NetworkParams g3 = nn::NetworkParams::zeros(p.shape);
  value_loss_and_grad(b, p, g3);
  auto loss = [&] {
    nn::NetworkParams scratch = nn::NetworkParams::zeros(p.shape);
    return value_loss_and_grad(b, p, scratch);
  };
  auto ps = p.value_group();
  auto gs = std::as_const(g3).value_group();
  double worst = 0.0;
  for (std::size_t k = 0; k < ps.size(); ++k) {
    worst = std::max(worst, crowdiv::testing::max_gradient_error(ps[k], gs[k], loss, 30, rng));
  }
  CHECK(worst < 1e-4);

  TrainConfig cfg = tiny_config();
  cfg.epochs_v = 1;
  cfg.minibatch_size = 8;
  std::size_t n = 0;
  for (auto s : p.value_group()) n += s.size();
  nn::AdamState adam(n, 5e-5);
  Rng r(1);
  double prev = loss();
  const double first = prev;
  int increases = 0;
  for (int i = 0; i < 100; ++i) {
    value_update(b, p, adam, cfg, r);
    const double now = loss();
    if (now > prev) ++increases;
    prev = now;
  }
  CHECK(increases == 0);
  CHECK(prev < first);
}

TEST_CASE("discriminator: separable clusters, shuffled labels, single class") {
  TrainConfig cfg = tiny_config(2);
  cfg.lr_disc = 1e-3;
  cfg.minibatch_size = 64;
  cfg.disc_noise = 0.1;
  sim::Rng init(1);
  auto p = nn::NetworkParams::initialized(cfg.shape(), init, -0.5);
  std::mt19937_64 rng(11);
  auto cluster_batch = [&](int n) {
    FlatBatch b = random_batch(p, n, rng);
    for (int r = 0; r < n; ++r) {
      const int z = b.tokens[static_cast<std::size_t>(r)];
      b.features.row(r).array() += z == 0 ? -1.0 : 1.0;
      b.executed_actions.row(r).array() = z == 0 ? 0.1 : 0.9;
    }
    return b;
  };
  nn::AdamState asa(p.disc_sa.parameter_count(), cfg.lr_disc);
  nn::AdamState as(p.disc_s.parameter_count(), cfg.lr_disc);
  Rng r(3);
  for (int i = 0; i < 30; ++i) discriminator_update(cluster_batch(256), p, asa, as, cfg, r);
  const auto held = evaluate_discriminators(cluster_batch(256), p);
  CHECK(held.sa_acc > 0.99);
  CHECK(held.s_acc > 0.99);

  TrainConfig c5 = tiny_config(5);
  c5.lr_disc = 1e-3;
  c5.minibatch_size = 64;
  sim::Rng init5(2);
  auto p5 = nn::NetworkParams::initialized(c5.shape(), init5, -0.5);
  nn::AdamState bsa(p5.disc_sa.parameter_count(), c5.lr_disc);
  nn::AdamState bs(p5.disc_s.parameter_count(), c5.lr_disc);
  std::uniform_int_distribution<int> tok(0, 4);
  for (int i = 0; i < 125; ++i) {
    FlatBatch b = random_batch(p5, 256, rng);
    for (auto& t : b.tokens) t = tok(rng);
    discriminator_update(b, p5, bsa, bs, c5, r);
  }
  FlatBatch test = random_batch(p5, 2000, rng);
  for (auto& t : test.tokens) t = tok(rng);
  const auto shuffled = evaluate_discriminators(test, p5);
  CHECK(std::abs(shuffled.sa_acc - 0.2) < 0.1);
  CHECK(std::abs(shuffled.s_acc - 0.2) < 0.1);

  TrainConfig c1 = tiny_config(1);
  sim::Rng init1(3);
  auto p1 = nn::NetworkParams::initialized(c1.shape(), init1, -0.5);
  FlatBatch b1 = random_batch(p1, 32, rng);
  const auto single = evaluate_discriminators(b1, p1);
  CHECK(single.sa_loss == doctest::Approx(0.0));
  CHECK(single.sa_acc == 1.0);
}

TEST_CASE("trainer: zero updates returns the initialized checkpoint") {
  TrainConfig c = tiny_config();
  c.total_updates = 0;
  Trainer t(c);
  const auto rows = train::train(t);
  CHECK(rows.empty());
  CHECK(t.checkpoint().update == 0);
}

TEST_CASE("trainer: stored reward equals task + alpha * intrinsic") {
  TrainConfig c = tiny_config();
  c.alpha = 0.37;
  Trainer t(c);
  const auto batch = t.collect();
  CHECK(batch.size() == static_cast<std::size_t>(c.N * c.batch_horizon));
  for (const auto& seg : batch.segments) {
    CHECK(seg.steps.size() <= static_cast<std::size_t>(c.batch_horizon));
    for (const auto& s : seg.steps) {
      CHECK(s.reward == doctest::Approx(s.task_reward + 0.37 * s.intrinsic_reward));
      CHECK(std::isfinite(s.log_prob));
    }
  }
}

TEST_CASE("trainer: M=1 intrinsic reward is identically zero") {
  TrainConfig c = tiny_config(1);
  c.total_updates = 2;
  Trainer t(c);
  for (const auto& row : train::train(t)) {
    CHECK(row.mean_intrinsic_reward == 0.0);
    CHECK(row.disc_sa_acc == 1.0);
  }
}

TEST_CASE("trainer: identical configs give identical curves and resume matches") {
  TrainConfig c = tiny_config();
  c.total_updates = 4;
  Trainer a(c), b(c);
  std::vector<std::string> ra, rb;
  for (const auto& row : train::train(a)) ra.push_back(format_curve_row(row));
  for (const auto& row : train::train(b)) rb.push_back(format_curve_row(row));
  CHECK(ra == rb);

  Trainer first(c);
  first.update();
  first.update();
  const auto bytes = ckpt::serialize(first.checkpoint());
  Trainer resumed(ckpt::deserialize(bytes));
  std::vector<std::string> rc;
  for (const auto& row : train::train(resumed)) rc.push_back(format_curve_row(row));
  REQUIRE(rc.size() == 2);
  CHECK(rc[0] == ra[2]);
  CHECK(rc[1] == ra[3]);
  CHECK(ckpt::serialize(resumed.checkpoint()) == ckpt::serialize(a.checkpoint()));
}

TEST_CASE("config: validation names the field and key values round trip") {
  TrainConfig c;
  c.gamma = 1.5;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const config::ConfigError& e) {
    CHECK(e.field() == "gamma");
  }
  TrainConfig d = tiny_config();
  d.alpha = 0.25;
  const auto kv = d.to_key_values();
  const auto back = TrainConfig::from_key_values(kv);
  CHECK(back.to_key_values() == kv);
  auto bad = kv;
  bad["no_such_key"] = "1";
  CHECK_THROWS_AS(TrainConfig::from_key_values(bad), config::ConfigError);
  auto wrong = kv;
  wrong["M"] = "abc";
  CHECK_THROWS_AS(TrainConfig::from_key_values(wrong), config::ConfigError);
  for (const char* field : {"clip_eps", "lambda", "alpha", "M", "n_beams"}) {
    auto k = kv;
    k[field] = "-1";
    try {
      TrainConfig::from_key_values(k);
      FAIL("expected ConfigError for ", field);
    } catch (const config::ConfigError& e) {
      CHECK(e.field() == field);
    }
  }
}

TEST_CASE("config text parsing") {
  std::istringstream in("# comment\ngamma = 0.9  # trailing\n\nM=2\n");
  const auto kv = config::parse_key_values(in);
  CHECK(kv.at("gamma") == "0.9");
  CHECK(kv.at("M") == "2");
  std::istringstream bad("gamma 0.9\n");
  CHECK_THROWS_AS(config::parse_key_values(bad), config::ConfigError);
  config::KeyValues o;
  config::apply_override(o, "alpha=0.5");
  CHECK(o.at("alpha") == "0.5");
  CHECK_THROWS_AS(config::apply_override(o, "alpha"), config::ConfigError);
}
