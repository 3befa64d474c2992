#include <benchmark/benchmark.h>

#include <scrl/losses.hpp>

using namespace scrl;

namespace {

// Weighted-regularization triplet with backward, batch of P identities x 8.
void BM_WrtForwardBackward(benchmark::State& state) {
  const int p = static_cast<int>(state.range(0)), n = p * 8;
  torch::manual_seed(0);
  const auto labels = torch::arange(p).repeat_interleave(8);
  for (auto _ : state) {
    auto f = torch::randn({n, 256}).set_requires_grad(true);
    auto loss = wrt_loss(f, labels);
    loss.backward();
    benchmark::DoNotOptimize(f.grad());
  }
}
BENCHMARK(BM_WrtForwardBackward)->Arg(8)->Arg(32)->Unit(benchmark::kMicrosecond);

}  // namespace
