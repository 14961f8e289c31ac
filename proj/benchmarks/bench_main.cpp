#include <benchmark/benchmark.h>

#include <numeric>

#include "tpamtl/data/data.hpp"
#include "tpamtl/diff/ops.hpp"
#include "tpamtl/eval/eval.hpp"
#include "tpamtl/model/network.hpp"

using namespace tpamtl;

namespace {

data::DatasetSplit temporal(std::size_t steps, std::size_t n) {
  data::SyntheticSpec spec;
  spec.num_tasks = 3;
  spec.num_features = 4;
  spec.timesteps = steps;
  spec.task_counts = {n};
  spec.links = {{0, 1, 1}};
  spec.seed = 5;
  spec.train_fraction = 0.8;
  spec.valid_fraction = 0.1;
  return data::generate_temporal_tasks(spec);
}

model::ModelConfig config(std::size_t hidden) {
  model::ModelConfig c;
  c.num_tasks = 3;
  c.num_features = 4;
  c.hidden_size = hidden;
  c.mc_samples = 4;
  return c;
}

void BM_ForwardBackward(benchmark::State& state) {
  const auto T = static_cast<std::size_t>(state.range(0));
  const auto split = temporal(T, 200);
  std::vector<std::size_t> idx(32);
  std::iota(idx.begin(), idx.end(), 0);
  const auto batch = model::make_batch(split.train, idx);
  model::TpAmtlNetwork net(config(16), 1);
  diff::RngStream rng(2);
  for (auto _ : state) {
    net.parameters().zero_grad();
    const auto result = net.forward(batch, model::Phase::train, rng);
    const auto loss = model::total_loss(result, batch, net.parameters(), 1e-4);
    loss.backward();
    benchmark::DoNotOptimize(loss.item());
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_ForwardBackward)->RangeMultiplier(2)->Range(4, 32)->Complexity()->Unit(benchmark::kMillisecond);

// Streaming inference over a whole sequence, one step at a time.
void BM_OnlineSequence(benchmark::State& state) {
  const auto T = static_cast<std::size_t>(state.range(0));
  const auto split = temporal(T, 50);
  std::vector<std::size_t> idx(8);
  std::iota(idx.begin(), idx.end(), 0);
  const auto batch = model::make_batch(split.train, idx);
  model::TpAmtlNetwork net(config(16), 1);
  for (auto _ : state) {
    auto online = net.online(batch.batch, diff::RngStream(3));
    for (std::size_t t = 0; t < T; ++t) {
      auto p = online.step(diff::slice_rows(batch.inputs, t * batch.batch, batch.batch));
      benchmark::DoNotOptimize(p);
    }
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_OnlineSequence)->RangeMultiplier(2)->Range(4, 64)->Complexity(benchmark::oNSquared)->Unit(benchmark::kMillisecond);

// The same predictions recomputed from scratch on every prefix.
void BM_PrefixRecompute(benchmark::State& state) {
  const auto T = static_cast<std::size_t>(state.range(0));
  const auto split = temporal(T, 50);
  std::vector<model::Episode> episodes(split.train.begin(), split.train.begin() + 8);
  model::TpAmtlNetwork net(config(16), 1);
  for (auto _ : state) {
    for (std::size_t t = 1; t <= T; ++t) {
      auto prefix = episodes;
      for (auto& e : prefix) e.length = t, e.features.resize(t * 4);
      diff::RngStream rng(3);
      auto p = model::predict_proba(net, model::make_batch(prefix), rng);
      benchmark::DoNotOptimize(p);
    }
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_PrefixRecompute)->RangeMultiplier(2)->Range(4, 32)->Complexity()->Unit(benchmark::kMillisecond);

void BM_Auroc(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  diff::RngStream rng(9);
  std::vector<double> scores(n), labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = rng.uniform() < 0.3 ? 1 : 0;
    scores[i] = rng.normal() + labels[i];
  }
  for (auto _ : state) benchmark::DoNotOptimize(eval::auroc(scores, labels));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Auroc)->RangeMultiplier(4)->Range(256, 65536)->Complexity(benchmark::oNLogN);

}  // namespace

BENCHMARK_MAIN();
