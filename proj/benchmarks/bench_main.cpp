#include <benchmark/benchmark.h>

#include "crowdiv/eval.hpp"
#include "crowdiv/trainer.hpp"

using namespace crowdiv;

namespace {

sim::World crowd(int n, std::uint64_t seed) {
  sim::Rng rng(seed);
  sim::SpawnConfig spawn;
  spawn.n_agents = n;
  return sim::spawn_episode(spawn, rng);
}

train::TrainConfig desk_config() {
  train::TrainConfig c;
  c.N = 4;
  c.M = 4;
  c.sim_cfg.n_beams = 72;
  c.scan_hidden1 = 128;
  c.scan_hidden2 = 64;
  c.head_hidden = 64;
  c.batch_horizon = 64;
  c.minibatch_size = 64;
  return c;
}

}  // namespace

void BM_CastRays(benchmark::State& state) {
  const auto world = crowd(5, 1);
  const int beams = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(sim::cast_rays(world, 0, beams, 10.0));
  state.SetItemsProcessed(state.iterations() * beams);
}
BENCHMARK(BM_CastRays)->Arg(72)->Arg(512);

void BM_PolicyForward(benchmark::State& state) {
  train::TrainConfig c;
  c.sim_cfg.n_beams = static_cast<int>(state.range(0));
  if (state.range(0) == 72) c = desk_config();
  sim::Rng rng(2);
  const auto p = nn::NetworkParams::initialized(c.shape(), rng, -0.5);
  const int batch = static_cast<int>(state.range(1));
  nn::Matrix x = nn::Matrix::Random(batch, c.shape().feature_dim());
  std::vector<int> tokens(static_cast<std::size_t>(batch), 1);
  for (auto _ : state) benchmark::DoNotOptimize(nn::policy_forward(p, x, tokens));
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_PolicyForward)->Args({72, 1})->Args({72, 256})->Args({512, 1})->Args({512, 256});

void BM_DeskUpdate(benchmark::State& state) {
  train::Trainer t(desk_config());
  for (auto _ : state) benchmark::DoNotOptimize(t.update());
}
BENCHMARK(BM_DeskUpdate)->Unit(benchmark::kMillisecond);

void BM_EnvStep(benchmark::State& state) {
  const auto c = desk_config();
  sim::CrowdEnv env(c.sim_cfg, c.reward_cfg, crowd(5, 3));
  env.reset_sensors();
  std::vector<sim::Command> cmd(env.size(), sim::Command{0.0, 0.3});
  for (auto _ : state) benchmark::DoNotOptimize(env.step(cmd));
}
BENCHMARK(BM_EnvStep);
BENCHMARK_MAIN();
