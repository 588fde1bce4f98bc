#include <benchmark/benchmark.h>

#include <vector>

#include "spade/compress.hpp"
#include "spade/metrics.hpp"
#include "spade/model.hpp"
#include "spade/taskgen.hpp"
#include "spade/training.hpp"

namespace {

spade::ModelConfig bench_config(std::size_t layers) {
    spade::ModelConfig c;
    c.n_layers = layers;
    c.seed = 5;
    return c;
}

spade::PackedBatch bench_batch(std::size_t n) {
    const auto corpus = spade::make_corpus(spade::TaskConfig{}, n, spade::Split::train);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return spade::pack_batch(corpus, idx);
}

void BM_ForwardBackward(benchmark::State& state) {
    auto params = spade::init_params(bench_config(static_cast<std::size_t>(state.range(0))));
    const auto batch = bench_batch(8);
    const auto weights = params.parameters();
    for (auto _ : state) {
        const auto trace = spade::forward(params, batch.inputs, batch.layout);
        spade::backward(spade::cross_entropy(trace.logits, batch.targets, batch.target_mask));
        for (auto w : weights) w.clear_grad();
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch.tokens()));
}
BENCHMARK(BM_ForwardBackward)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);

// Greedy decoding throughput of the full-depth model against a half-depth
// student built by dropping every other layer.
void BM_Generate(benchmark::State& state) {
    const std::size_t depth = 8;
    const auto teacher = spade::init_params(bench_config(depth));
    const bool half = state.range(0) != 0;
    const auto params = half ? spade::copy_retained(teacher, spade::make_plan(depth, {0, 2, 4, 6})) : teacher;
    const auto corpus = spade::make_corpus(spade::TaskConfig{}, 4, spade::Split::eval);
    std::vector<spade::TokenSeq> prompts;
    for (const auto& s : corpus) prompts.push_back(spade::query_prompt(s, spade::Vocabulary{}));
    const std::size_t max_new = 16;
    for (auto _ : state) {
        for (const auto& p : prompts) benchmark::DoNotOptimize(spade::generate_greedy(params, p, -1, max_new));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(prompts.size() * max_new));
    state.SetLabel(half ? "L/2 layers" : "L layers");
}
BENCHMARK(BM_Generate)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
