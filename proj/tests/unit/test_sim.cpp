#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "crowdiv/env.hpp"
#include "crowdiv/sim.hpp"

using namespace crowdiv;
using namespace crowdiv::sim;

namespace {

World open_world() {
  World w;
  w.bounds = {{-100.0, -100.0}, {100.0, 100.0}};
  w.agents.resize(1);
  return w;
}

// Forward Euler on the unicycle with a tiny step.
Pose euler_oracle(Pose p, double v, double w, double dt, double h = 1e-5) {
  const int n = static_cast<int>(std::lround(dt / h));
  double x = p.x, y = p.y, th = p.heading;
  for (int i = 0; i < n; ++i) {
    // midpoint heading keeps the oracle second-order accurate
    const double mid = th + 0.5 * w * h;
    x += v * h * std::cos(mid);
    y += v * h * std::sin(mid);
    th += w * h;
  }
  return {x, y, wrap_angle(th)};
}

// Marches along the ray in 1 mm steps until inside any circle.
double ray_march(Vec2 origin, Vec2 dir, std::span<const Circle> circles, double max_range) {
  for (double t = 0.0; t <= max_range; t += 1e-3) {
    const Vec2 p = origin + dir * t;
    for (const auto& c : circles) {
      if ((p - c.center).norm() <= c.radius) return t;
    }
  }
  return max_range;
}

}  // namespace

TEST_CASE("integrate_unicycle: straight line and pure rotation") {
  const Pose a = integrate_unicycle({0, 0, 0}, 1.0, 0.0, 0.1);
  CHECK(a.x == doctest::Approx(0.1));
  CHECK(a.y == doctest::Approx(0.0));
  CHECK(a.heading == doctest::Approx(0.0));

  const Pose b = integrate_unicycle({0, 0, 0}, 0.0, std::numbers::pi, 0.5);
  CHECK(b.x == doctest::Approx(0.0));
  CHECK(b.y == doctest::Approx(0.0));
  CHECK(b.heading == doctest::Approx(std::numbers::pi / 2));
}

TEST_CASE("integrate_unicycle: arc matches fine Euler oracle") {
  const Pose p = integrate_unicycle({0, 0, 0}, 1.0, 1.0, 0.1);
  const Pose o = euler_oracle({0, 0, 0}, 1.0, 1.0, 0.1);
  CHECK(std::abs(p.x - o.x) < 1e-6);
  CHECK(std::abs(p.y - o.y) < 1e-6);
  CHECK(p.x == doctest::Approx(0.0998334).epsilon(1e-5));
  CHECK(p.y == doctest::Approx(0.0049958).epsilon(1e-4));

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> h(-std::numbers::pi, std::numbers::pi);
  for (int i = 0; i < 200; ++i) {
    const Pose start{u(rng) * 5, u(rng) * 5, h(rng)};
    const double v = std::abs(u(rng));
    const double w = u(rng);
    const Pose e = integrate_unicycle(start, v, w, 0.1);
    const Pose o = euler_oracle(start, v, w, 0.1);
    CHECK(std::hypot(e.x - o.x, e.y - o.y) < 1e-6);
  }
}

TEST_CASE("heading stays wrapped under repeated rotation") {
  Pose p{0, 0, 0};
  for (int i = 0; i < 10000; ++i) {
    p = integrate_unicycle(p, 0.0, 3.0, 0.1);
    REQUIRE(p.heading > -std::numbers::pi);
    REQUIRE(p.heading <= std::numbers::pi);
  }
  CHECK(wrap_angle(-std::numbers::pi) == doctest::Approx(std::numbers::pi));
}

TEST_CASE("lidar: single circle, empty room, nearest hit") {
  World w = open_world();
  w.circles.push_back({{3.0, 0.0}, 0.5});
  auto r = cast_rays(w, 0, 8, 10.0);
  CHECK(r[0] == doctest::Approx(2.5));
  CHECK(r[4] == doctest::Approx(10.0));

  World room;
  room.agents.resize(1);
  room.agents[0].pose = {10.0, 10.0, 0.3};
  for (double x : cast_rays(room, 0, 72, 10.0)) CHECK(x == doctest::Approx(10.0));

  World two = open_world();
  two.circles = {{{5.0, 0.0}, 0.5}, {{3.0, 0.0}, 0.5}};
  const auto rr = cast_rays(two, 0, 4, 10.0);
  CHECK(rr[0] == doctest::Approx(2.5));
  CHECK(std::abs(rr[0] - ray_march({0, 0}, {1, 0}, two.circles, 10.0)) < 1.5e-3);
}

TEST_CASE("lidar: random circles match closed form and ray march") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-6.0, 6.0);
  std::uniform_real_distribution<double> rad(0.2, 1.0);
  std::uniform_real_distribution<double> h(-std::numbers::pi, std::numbers::pi);
  int hits = 0;
  for (int i = 0; i < 1000; ++i) {
    World w = open_world();
    w.agents[0].pose = {0.0, 0.0, h(rng)};
    Circle c{{u(rng), u(rng)}, rad(rng)};
    if (c.center.norm() <= c.radius + 0.01) continue;
    w.circles.push_back(c);
    const auto r = cast_rays(w, 0, 1, 10.0);
    const Vec2 d = unit_from_angle(w.agents[0].pose.heading);
    // closed form: smallest positive root of |t d - c|^2 = r^2
    const double b = dot(d, c.center);
    const double disc = b * b - (c.center.squared_norm() - c.radius * c.radius);
    double expect = 10.0;
    if (disc >= 0.0) {
      const double t = b - std::sqrt(disc);
      if (t > 0.0) expect = std::min(10.0, t);
    }
    if (expect < 10.0) ++hits;
    CHECK(std::abs(r[0] - expect) < 1e-9);
    if (i % 50 == 0) {
      CHECK(std::abs(r[0] - ray_march({0, 0}, d, w.circles, 10.0)) < 1.5e-3);
    }
  }
  CHECK(hits > 50);
}

TEST_CASE("lidar: invisible agents are skipped, noise stays in range") {
  World w = open_world();
  w.agents.resize(2);
  w.agents[1].pose = {2.0, 0.0, 0.0};
  CHECK(cast_rays(w, 0, 1, 10.0)[0] == doctest::Approx(1.75));
  w.agents[1].visible = false;
  CHECK(cast_rays(w, 0, 1, 10.0)[0] == doctest::Approx(10.0));

  Rng rng(1);
  w.agents[1].visible = true;
  for (int i = 0; i < 100; ++i) {
    const auto s = lidar_scan(w, 0, 36, 10.0, 0.5, rng);
    REQUIRE(s.n_beams() == 36);
    for (double r : s.ranges) {
      REQUIRE(r >= 0.01);
      REQUIRE(r <= 10.0);
    }
  }
}

TEST_CASE("step_world: goal, wall collision, no events") {
  SimConfig cfg;
  cfg.n_beams = 36;
  RewardConfig rc;

  World g;
  g.agents.resize(1);
  g.agents[0].pose = {10.0, 10.0, 0.0};
  g.agents[0].goal = {10.3, 10.0};
  Command stop{0.0, 0.0};
  auto ev = step_world(g, std::span(&stop, 1), rc, cfg);
  CHECK(ev.agents[0].reached_goal);
  CHECK_FALSE(ev.agents[0].collided);
  CHECK(g.time() == doctest::Approx(0.1));

  World wall;
  wall.agents.resize(1);
  wall.agents[0].pose = {17.0, 10.0, 0.0};
  wall.agents[0].goal = {2.0, 2.0};
  Command fwd{1.0, 0.0};
  bool collided = false;
  for (int i = 0; i < 40 && !collided; ++i) {
    ev = step_world(wall, std::span(&fwd, 1), rc, cfg);
    collided = ev.agents[0].collided;
    if (collided) CHECK(20.0 - wall.agents[0].pose.x < 0.5 + 1e-9);
  }
  CHECK(collided);

  World apart;
  apart.agents.resize(2);
  apart.agents[0].pose = {7.5, 10.0, std::numbers::pi};
  apart.agents[1].pose = {12.5, 10.0, 0.0};
  apart.agents[0].goal = {2.0, 10.0};
  apart.agents[1].goal = {18.0, 10.0};
  std::vector<Command> cmds{{0.5, 0.0}, {0.5, 0.0}};
  ev = step_world(apart, cmds, rc, cfg);
  for (const auto& e : ev.agents) CHECK_FALSE(e.terminal());

  std::vector<Command> wrong(3);
  CHECK_THROWS_AS(step_world(apart, wrong, rc, cfg), SimError);
}

TEST_CASE("step_world: commands are clamped to the action box") {
  SimConfig cfg;
  cfg.n_beams = 8;
  World w;
  w.agents.resize(1);
  w.agents[0].pose = {10.0, 10.0, 0.0};
  w.agents[0].goal = {2.0, 2.0};
  Command c{5.0, -7.0};
  step_world(w, std::span(&c, 1), RewardConfig{}, cfg);
  CHECK(w.agents[0].linear_vel == doctest::Approx(1.0));
  CHECK(w.agents[0].angular_vel == doctest::Approx(-1.0));
  Command back{-1.0, 0.0};
  step_world(w, std::span(&back, 1), RewardConfig{}, cfg);
  CHECK(w.agents[0].linear_vel == doctest::Approx(0.0));
}

TEST_CASE("compute_reward cases") {
  RewardConfig rc;
  AgentState prev, next;
  prev.goal = next.goal = {0.0, 0.0};
  prev.pose = {5.0, 0.0, 0.0};
  next.pose = {4.8, 0.0, 0.0};
  AgentEvent none;
  CHECK(compute_reward(prev, next, none, rc) == doctest::Approx(0.5));
  AgentEvent goal;
  goal.reached_goal = true;
  CHECK(compute_reward(prev, next, goal, rc) == 15.0);
  AgentEvent col;
  col.collided = true;
  CHECK(compute_reward(prev, next, col, rc) == -15.0);

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (int i = 0; i < 500; ++i) {
    prev.pose = {u(rng), u(rng), 0.0};
    next.pose = {u(rng), u(rng), 0.0};
    const double d0 = prev.pose.position().norm();
    const double d1 = next.pose.position().norm();
    CHECK((compute_reward(prev, next, none, rc) > 0.0) == (d1 < d0));
  }
}

TEST_CASE("build_observation: goal polar and frame padding") {
  AgentState a;
  a.pose = {0.0, 0.0, 0.0};
  a.goal = {2.0, 0.0};
  LidarScan s{{5.0, 10.0}, 10.0};
  std::vector<LidarScan> hist{s};
  auto o = build_observation(hist, a, 3);
  CHECK(o.goal_distance == doctest::Approx(2.0));
  CHECK(o.goal_bearing == doctest::Approx(0.0));
  REQUIRE(o.scan_stack.size() == 6);
  CHECK(o.scan_stack == std::vector<double>{0.5, 1.0, 0.5, 1.0, 0.5, 1.0});

  a.goal = {0.0, 2.0};
  o = build_observation(hist, a, 3);
  CHECK(o.goal_distance == doctest::Approx(2.0));
  CHECK(o.goal_bearing == doctest::Approx(std::numbers::pi / 2));

  hist.push_back(LidarScan{{1.0, 2.0}, 10.0});
  o = build_observation(hist, a, 3);
  CHECK(o.scan_stack == std::vector<double>{0.5, 1.0, 0.5, 1.0, 0.1, 0.2});
  CHECK_THROWS_AS(build_observation(std::span<const LidarScan>(), a, 3), SimError);
}

TEST_CASE("spawn_episode: clearance, goal distance, determinism") {
  SpawnConfig cfg;
  cfg.n_agents = 5;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const World w = spawn_episode(cfg, rng);
    REQUIRE(w.agents.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
      const auto& a = w.agents[i];
      CHECK((a.pose.position() - a.goal).norm() >= 10.0);
      CHECK(w.bounds.contains(a.pose.position()));
      CHECK(w.bounds.contains(a.goal));
      for (std::size_t j = i + 1; j < 5; ++j) {
        CHECK((a.pose.position() - w.agents[j].pose.position()).norm() >= 1.5);
      }
    }
  }
  cfg.n_agents = 1;
  Rng r1(9), r2(9);
  const World a = spawn_episode(cfg, r1);
  const World b = spawn_episode(cfg, r2);
  CHECK(a.agents[0].pose.x == b.agents[0].pose.x);
  CHECK(a.agents[0].goal == b.agents[0].goal);

  cfg.n_agents = 400;
  Rng r3(1);
  CHECK_THROWS_AS(spawn_episode(cfg, r3), SimError);
}

TEST_CASE("step_world is bit-identical for identical inputs") {
  SpawnConfig cfg;
  cfg.n_agents = 4;
  cfg.sim.n_beams = 36;
  Rng r1(3), r2(3);
  World a = spawn_episode(cfg, r1);
  World b = spawn_episode(cfg, r2);
  std::vector<Command> cmds{{0.7, 0.3}, {1.0, -0.2}, {0.2, 1.0}, {0.5, 0.0}};
  for (int i = 0; i < 50; ++i) {
    const auto ea = step_world(a, cmds, RewardConfig{}, cfg.sim);
    const auto eb = step_world(b, cmds, RewardConfig{}, cfg.sim);
    for (std::size_t k = 0; k < 4; ++k) {
      REQUIRE(a.agents[k].pose.x == b.agents[k].pose.x);
      REQUIRE(a.agents[k].pose.y == b.agents[k].pose.y);
      REQUIRE(a.agents[k].pose.heading == b.agents[k].pose.heading);
      REQUIRE(ea.agents[k].terminal() == eb.agents[k].terminal());
    }
  }
}

TEST_CASE("CrowdEnv: features have the documented layout") {
  SimConfig sim;
  sim.n_beams = 12;
  sim.noise_std = 0.0;
  SpawnConfig sc;
  sc.n_agents = 2;
  sc.sim = sim;
  Rng rng(4);
  CrowdEnv env(sim, RewardConfig{}, spawn_episode(sc, rng));
  env.reset_sensors();
  const auto f = env.features(0);
  REQUIRE(static_cast<int>(f.size()) == env.feature_dim());
  for (int i = 0; i < sim.k_frames * sim.n_beams; ++i) {
    CHECK(f[static_cast<std::size_t>(i)] > 0.0);
    CHECK(f[static_cast<std::size_t>(i)] <= 1.0);
  }
  const auto& a = env.world().agents[0];
  CHECK(f[36] == doctest::Approx((a.goal - a.pose.position()).norm() / sim.max_range));
  std::vector<Command> cmds{{1.0, 0.5}, {0.0, 0.0}};
  env.step(cmds);
  CHECK(env.history(0).size() == 2);
  CHECK(env.features(0)[38] == doctest::Approx(1.0));
  CHECK(env.features(0)[39] == doctest::Approx(0.5));
}
