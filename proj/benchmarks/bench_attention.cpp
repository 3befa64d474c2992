#include <benchmark/benchmark.h>

#include <scrl/attention.hpp>
#include <scrl/backbone.hpp>

using namespace scrl;

namespace {

// One cross-attention module on a batch of C x H x W maps; the range gives H,
// with W = H / 2 as at the final stage.
void BM_CrossAttention(benchmark::State& state) {
  const int h = static_cast<int>(state.range(0)), w = h / 2, c = 256;
  torch::manual_seed(0);
  ResidualCrossAttention m(CrossAttentionOptions{c, 0, 1.0});
  m->eval();
  const auto q = torch::randn({8, c, h, w}), kv = torch::randn({8, c, h, w});
  torch::NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(m->forward(q, kv, q));
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_CrossAttention)->Arg(8)->Arg(16)->Arg(24)->Unit(benchmark::kMillisecond);

void BM_GeM(benchmark::State& state) {
  const auto x = torch::rand({64, 256, 16, 8});
  for (auto _ : state) benchmark::DoNotOptimize(gem_pool(x, 3.0));
}
BENCHMARK(BM_GeM)->Unit(benchmark::kMicrosecond);

}  // namespace
