#include <benchmark/benchmark.h>

#include <vector>

#include "spade/metrics.hpp"
#include "spade/ops.hpp"
#include "spade/random.hpp"

namespace {

spade::Tensor random_matrix(spade::Rng& rng, std::size_t rows, std::size_t cols, bool grad) {
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = rng.normal();
    return spade::Tensor::from({rows, cols}, std::move(v), grad);
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    spade::Rng rng(1);
    const auto a = random_matrix(rng, n, n, false);
    const auto b = random_matrix(rng, n, n, false);
    for (auto _ : state) benchmark::DoNotOptimize(spade::matmul(a, b));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(32, 256);

void BM_MatmulBackward(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    spade::Rng rng(2);
    auto a = random_matrix(rng, n, n, true);
    auto b = random_matrix(rng, n, n, true);
    for (auto _ : state) {
        spade::backward(spade::sum(spade::matmul(a, b)));
        a.clear_grad();
        b.clear_grad();
    }
}
BENCHMARK(BM_MatmulBackward)->RangeMultiplier(2)->Range(32, 256);

void BM_EditDistance(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    spade::Rng rng(3);
    std::vector<std::int32_t> a(n), b(n);
    for (auto& x : a) x = static_cast<std::int32_t>(rng.uniform_int(8));
    for (auto& x : b) x = static_cast<std::int32_t>(rng.uniform_int(8));
    for (auto _ : state) benchmark::DoNotOptimize(spade::edit_distance(a, b));
    state.SetComplexityN(static_cast<std::int64_t>(n));
}
BENCHMARK(BM_EditDistance)->RangeMultiplier(4)->Range(16, 1024)->Complexity(benchmark::oNSquared);

}  // namespace
