#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "crowdiv/models.hpp"
#include "crowdiv/nn.hpp"
#include "grad_check.hpp"

using namespace crowdiv;
using namespace crowdiv::nn;
using crowdiv::testing::max_gradient_error;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

NetworkShape small_shape(int m = 3) {
  NetworkShape s;
  s.k_frames = 2;
  s.n_beams = 6;
  s.num_tokens = m;
  s.embed_dim = 4;
  s.scan_hidden1 = 8;
  s.scan_hidden2 = 6;
  s.head_hidden = 5;
  s.disc_hidden = 7;
  return s;
}

// Max error over every span of a parameter group.
double group_error(std::vector<std::span<double>> params, std::vector<std::span<const double>> grads,
                   const std::function<double()>& loss, std::mt19937_64& rng) {
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    worst = std::max(worst, max_gradient_error(params[k], grads[k], loss, 40, rng));
  }
  return worst;
}

}  // namespace

TEST_CASE("DenseNet gradients match finite differences for every activation") {
  std::mt19937_64 rng(1);
  for (Activation a : {Activation::relu, Activation::tanh, Activation::identity}) {
    DenseNet net({5, 7, 3}, {a, Activation::identity});
    net.initialize(rng, 1.3, 1.0);
    const Matrix x = random_matrix(6, 5, rng);
    const Matrix c = random_matrix(6, 3, rng);
    auto loss = [&] { return (net.forward(x).array() * c.array()).sum(); };
    Tape tape;
    net.forward(x, tape);
    DenseNet grads = net.zeros_like();
    const Matrix gx = net.backward(tape, c, grads);
    auto ps = net.parameter_spans();
    auto gs = std::as_const(grads).parameter_spans();
    CHECK(group_error(ps, {gs.begin(), gs.end()}, loss, rng) < 1e-4);

    // Input gradient.
    Matrix xx = x;
    auto loss_x = [&] { return (net.forward(xx).array() * c.array()).sum(); };
    std::span<double> xs(xx.data(), static_cast<std::size_t>(xx.size()));
    std::span<const double> gxs(gx.data(), static_cast<std::size_t>(gx.size()));
    CHECK(max_gradient_error(xs, gxs, loss_x, 30, rng) < 1e-4);
  }
}

TEST_CASE("sum of squares of one layer has gradient 2W") {
  std::mt19937_64 rng(2);
  DenseNet net({3, 4}, {Activation::identity});
  net.initialize(rng, 1.0, 1.0);
  const Matrix w = net.layers()[0].weight;
  // d/dW sum(W^2) via backward on identity inputs: out = x W^T, with x = I
  // the output equals W^T, so feeding grad_output = 2 W^T gives 2W.
  Tape tape;
  const Matrix eye = Matrix::Identity(3, 3);
  net.forward(eye, tape);
  DenseNet grads = net.zeros_like();
  net.backward(tape, 2.0 * w.transpose(), grads);
  CHECK((grads.layers()[0].weight - 2.0 * w).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gradient of a constant loss is zero") {
  std::mt19937_64 rng(3);
  DenseNet net({3, 4, 2}, {Activation::tanh, Activation::identity});
  net.initialize(rng, 1.0, 1.0);
  Tape tape;
  net.forward(random_matrix(5, 3, rng), tape);
  DenseNet grads = net.zeros_like();
  net.backward(tape, Matrix::Zero(5, 2), grads);
  for (auto s : std::as_const(grads).parameter_spans()) {
    for (double v : s) CHECK(v == 0.0);
  }
}

TEST_CASE("softmax rows are distributions for arbitrary finite logits") {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 1000; ++i) {
    const Matrix p = softmax_rows(random_matrix(1, 5, rng, 50.0));
    CHECK(std::abs(p.sum() - 1.0) < 1e-12);
    CHECK(p.minCoeff() >= 0.0);
  }
  const Matrix huge = softmax_rows(Matrix::Constant(1, 3, 1e300));
  CHECK(std::abs(huge.sum() - 1.0) < 1e-12);
}

TEST_CASE("gaussian helpers") {
  const double zero[2] = {0.0, 0.0};
  CHECK(diag_gaussian_log_prob(zero, zero, zero) == doctest::Approx(-std::log(2.0 * std::numbers::pi)));
  const double m1[2] = {0.0, 0.3};
  const double m2[2] = {1.0, 0.3};
  const double one[2] = {1.0, 1.0};
  CHECK(diag_gaussian_kl(m1, one, m2, one) == doctest::Approx(0.5));
  CHECK(diag_gaussian_kl(m1, one, m1, one) == 0.0);
  const double s2[2] = {2.0, 0.5};
  // closed form: log(s2/s1) + (s1^2 + (m1-m2)^2) / (2 s2^2) - 1/2 per dim
  const double expect = (std::log(2.0) + (1.0 + 1.0) / 8.0 - 0.5) + (std::log(0.5) + 1.0 / 0.5 - 0.5);
  CHECK(diag_gaussian_kl(m1, one, m2, s2) == doctest::Approx(expect));
}

TEST_CASE("adam: zero gradient, first step magnitude, determinism") {
  std::vector<double> p{1.0, -2.0};
  std::vector<double> g{0.0, 0.0};
  AdamState st(2, 5e-5);
  std::vector<std::span<double>> ps{p};
  std::vector<std::span<const double>> gs{g};
  adam_step(ps, gs, st);
  CHECK(p[0] == 1.0);
  CHECK(p[1] == -2.0);

  std::vector<double> q{0.0};
  std::vector<double> one{1.0};
  AdamState st2(1, 5e-5);
  std::vector<std::span<double>> qs{q};
  std::vector<std::span<const double>> os{one};
  adam_step(qs, os, st2);
  // m_hat = 1, v_hat = 1: delta = -lr / (1 + eps)
  CHECK(q[0] == doctest::Approx(-5e-5 / (1.0 + 1e-8)).epsilon(1e-12));

  std::vector<double> a{0.5, 0.5}, b{0.5, 0.5};
  AdamState sa(2, 1e-3), sb(2, 1e-3);
  std::vector<double> grad{0.3, -1.2};
  for (int i = 0; i < 20; ++i) {
    std::vector<std::span<double>> as{a}, bs{b};
    std::vector<std::span<const double>> gg{grad};
    adam_step(as, gg, sa);
    adam_step(bs, gg, sb);
  }
  CHECK(a == b);

  AdamState wrong(3, 1e-3);
  CHECK_THROWS(adam_step(ps, gs, wrong));
}

TEST_CASE("policy and value gradients match finite differences") {
  std::mt19937_64 rng(5);
  const NetworkShape s = small_shape();
  NetworkParams p = NetworkParams::initialized(s, rng, -0.5);
  // A larger output layer keeps the squashed means away from the flat tails
  // of the 0.01-scale initialization.
  p.policy_head.layers().back().weight *= 50.0;
  const Matrix x = random_matrix(7, s.feature_dim(), rng, 0.5);
  const std::vector<int> tokens{0, 1, 2, 0, 2, 1, 1};
  const Matrix c = random_matrix(7, 2, rng);
  const Eigen::Vector2d d(0.7, -0.3);
  auto loss = [&] {
    const auto out = policy_forward(p, x, tokens);
    return (out.mean.array() * c.array()).sum() + d.dot(out.log_std);
  };
  PolicyTape tape;
  policy_forward(p, x, tokens, &tape);
  NetworkParams grads = NetworkParams::zeros(s);
  policy_backward(p, tape, c, d, grads);
  CHECK(group_error(p.policy_group(), std::as_const(grads).policy_group(), loss, rng) < 1e-4);

  const Vector cv = random_matrix(7, 1, rng).col(0);
  auto vloss = [&] { return value_forward(p, x, tokens).dot(cv); };
  ValueTape vt;
  value_forward(p, x, tokens, &vt);
  NetworkParams vg = NetworkParams::zeros(s);
  value_backward(p, vt, cv, vg);
  CHECK(group_error(p.value_group(), std::as_const(vg).value_group(), vloss, rng) < 1e-4);
}

TEST_CASE("token embedding gradients touch only tokens present in the batch") {
  std::mt19937_64 rng(6);
  const NetworkShape s = small_shape(4);
  NetworkParams p = NetworkParams::initialized(s, rng, -0.5);
  const Matrix x = random_matrix(3, s.feature_dim(), rng);
  const std::vector<int> tokens{1, 3, 1};
  PolicyTape tape;
  policy_forward(p, x, tokens, &tape);
  NetworkParams grads = NetworkParams::zeros(s);
  policy_backward(p, tape, Matrix::Ones(3, 2), Eigen::Vector2d::Zero(), grads);
  CHECK(grads.embedding.row(0).cwiseAbs().maxCoeff() == 0.0);
  CHECK(grads.embedding.row(2).cwiseAbs().maxCoeff() == 0.0);
  CHECK(grads.embedding.row(1).cwiseAbs().maxCoeff() > 0.0);
  CHECK(grads.embedding.row(3).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("discriminator cross-entropy gradient") {
  std::mt19937_64 rng(7);
  const NetworkShape s = small_shape(4);
  NetworkParams p = NetworkParams::initialized(s, rng, -0.5);
  p.disc_s.layers().back().weight *= 100.0;
  const Matrix x = random_matrix(9, s.feature_dim(), rng);
  const std::vector<int> labels{0, 1, 2, 3, 0, 1, 2, 3, 3};
  DenseNet grads = p.disc_s.zeros_like();
  discriminator_cross_entropy(p.disc_s, x, labels, &grads);
  auto loss = [&] { return discriminator_cross_entropy(p.disc_s, x, labels).loss; };
  auto gs = std::as_const(grads).parameter_spans();
  CHECK(group_error(p.disc_s.parameter_spans(), {gs.begin(), gs.end()}, loss, rng) < 1e-4);

  // At a uniform output the final-bias gradient of a single sample is softmax - onehot.
  DenseNet zero_out = p.disc_s;
  zero_out.layers().back().weight.setZero();
  zero_out.layers().back().bias.setZero();
  const Matrix one = x.topRows(1);
  const Matrix probs = discriminator_forward(zero_out, one);
  for (Eigen::Index k = 0; k < 4; ++k) CHECK(probs(0, k) == doctest::Approx(0.25));
  const int label = 2;
  DenseNet g1 = zero_out.zeros_like();
  discriminator_cross_entropy(zero_out, one, std::span(&label, 1), &g1);
  for (Eigen::Index k = 0; k < 4; ++k) {
    CHECK(g1.layers().back().bias(k) == doctest::Approx(0.25 - (k == label ? 1.0 : 0.0)));
  }
}

TEST_CASE("policy forward is pure and token dependent") {
  std::mt19937_64 rng(8);
  const NetworkShape s = small_shape(2);
  int differing = 0;
  for (int trial = 0; trial < 100; ++trial) {
    NetworkParams p = NetworkParams::initialized(s, rng, -0.5);
    const Matrix x = random_matrix(1, s.feature_dim(), rng);
    const std::vector<int> t0{0}, t1{1};
    const auto a = policy_forward(p, x, t0);
    const auto b = policy_forward(p, x, t0);
    REQUIRE(a.mean == b.mean);
    const auto c = policy_forward(p, x, t1);
    if ((a.mean - c.mean).cwiseAbs().maxCoeff() > 1e-12) ++differing;
    for (Eigen::Index k = 0; k < 1; ++k) {
      CHECK(a.mean(k, 0) >= 0.0);
      CHECK(a.mean(k, 0) <= s.v_max);
      CHECK(std::abs(a.mean(k, 1)) <= s.w_max);
    }
  }
  CHECK(differing == 100);
}

TEST_CASE("policy rejects bad shapes and tokens") {
  std::mt19937_64 rng(9);
  const NetworkShape s = small_shape(2);
  NetworkParams p = NetworkParams::initialized(s, rng, -0.5);
  const Matrix x = random_matrix(1, s.feature_dim(), rng);
  const std::vector<int> bad{2};
  CHECK_THROWS(policy_forward(p, x, bad));
  const std::vector<int> ok{0};
  CHECK_THROWS(policy_forward(p, random_matrix(1, s.feature_dim() + 1, rng), ok));
}

TEST_CASE("initialized discriminators start near uniform") {
  std::mt19937_64 rng(10);
  const NetworkShape s = small_shape(5);
  NetworkParams p = NetworkParams::initialized(s, rng, -0.5);
  const Matrix probs = discriminator_forward(p.disc_s, random_matrix(20, s.feature_dim(), rng));
  CHECK((probs.array() - 0.2).abs().maxCoeff() < 0.05);
}
