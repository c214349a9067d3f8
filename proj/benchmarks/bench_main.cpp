#include <benchmark/benchmark.h>

#include "coeforge/attack.hpp"
#include "coeforge/corpus.hpp"
#include "coeforge/defense.hpp"

using namespace coeforge;

namespace {

// Acceptance-sized model and corpus; weights are untrained since only speed matters here.
struct Fixture {
  CorpusSplit corpus = generate_corpus(CorpusOptions{});
  ModelParams params = [this] {
    ModelShape s;
    s.vocab = static_cast<int>(corpus.vocab.size());
    return ModelParams::initialize(s, 0);
  }();
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

void BM_ForwardLogits(benchmark::State& state) {
  auto& f = fixture();
  const MixedSequence in = prompt_sequence(f.corpus.malicious_train[0].query);
  for (auto _ : state) benchmark::DoNotOptimize(forward_logits(in, f.params));
}
BENCHMARK(BM_ForwardLogits);

void BM_GreedyDecode(benchmark::State& state) {
  auto& f = fixture();
  const MixedSequence in = prompt_sequence(f.corpus.malicious_train[0].query);
  for (auto _ : state) benchmark::DoNotOptimize(greedy_decode(in, 12, f.params));
}
BENCHMARK(BM_GreedyDecode);

void BM_AttackSteps(benchmark::State& state) {
  auto& f = fixture();
  AttackConfig cfg;
  cfg.M = static_cast<int>(state.range(0));
  Rng rng(1);
  const auto batch = sample_malicious_batch(f.corpus, 4, rng);
  for (auto _ : state) benchmark::DoNotOptimize(optimize_perturbations(batch, f.params, cfg, rng));
}
BENCHMARK(BM_AttackSteps)->Arg(1)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_DefenseStep(benchmark::State& state) {
  auto& f = fixture();
  Rng rng(2);
  const auto batch = sample_malicious_batch(f.corpus, 4, rng);
  const auto benign = sample_benign_batch(f.corpus, 4, rng);
  const PerturbationPair pair = init_perturbations(f.params, 8, rng);
  ModelParams p = f.params;
  Adam opt(1e-3);
  for (auto _ : state) benchmark::DoNotOptimize(defense_step(p, batch, benign, pair, 0.1, opt));
}
BENCHMARK(BM_DefenseStep)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
