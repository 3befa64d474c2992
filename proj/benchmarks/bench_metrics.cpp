#include <benchmark/benchmark.h>

#include <scrl/evaluator.hpp>
#include <scrl/rng.hpp>

using namespace scrl;

namespace {

// Ranking plus CMC / mAP / mINP for a square query x gallery problem.
void BM_RankAndScore(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0)), dim = 256, ids = n / 10;
  Rng rng(1);
  std::vector<double> q(static_cast<std::size_t>(n) * dim), g(q.size());
  for (auto& x : q) x = rng.normal();
  for (auto& x : g) x = rng.normal();
  std::vector<int> ql(n), gl(n);
  for (int i = 0; i < n; ++i) ql[i] = gl[i] = i % ids;
  for (auto _ : state) {
    const auto r = rank_vectors(q, g, dim);
    benchmark::DoNotOptimize(cmc_curve(r, ql, gl, 20));
    benchmark::DoNotOptimize(mean_ap(r, ql, gl));
    benchmark::DoNotOptimize(m_inp(r, ql, gl));
  }
}
BENCHMARK(BM_RankAndScore)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);

}  // namespace
