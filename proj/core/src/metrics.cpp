#include "spade/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

namespace spade {

std::size_t edit_distance(std::span<const std::int32_t> hyp, std::span<const std::int32_t> ref) {
    std::vector<std::size_t> prev(ref.size() + 1), cur(ref.size() + 1);
    std::iota(prev.begin(), prev.end(), std::size_t{0});
    for (std::size_t i = 1; i <= hyp.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= ref.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[ref.size()];
}

double error_rate(const ErrorCounts& counts) {
    if (counts.reference_tokens == 0) throw std::invalid_argument("error_rate: total reference length is zero");
    return static_cast<double>(counts.edits) / static_cast<double>(counts.reference_tokens);
}

double error_rate(std::span<const std::pair<TokenSeq, TokenSeq>> hyp_ref_pairs) {
    ErrorCounts c;
    for (const auto& [hyp, ref] : hyp_ref_pairs) {
        c.edits += edit_distance(hyp, ref);
        c.reference_tokens += ref.size();
    }
    return error_rate(c);
}

std::size_t scoring_budget(const Sample& sample) { return 2 * sample.y2.size(); }

ErrorCounts score_sample(const ModelParams& params, const Sample& sample, const Vocabulary& vocab,
                         const LayerSet& skip) {
    const auto prompt = query_prompt(sample, vocab);
    const std::size_t room = params.config.max_seq_len - std::min(params.config.max_seq_len, prompt.size());
    const auto hyp = generate_greedy(params, prompt, vocab.eos(), std::min(scoring_budget(sample), room), skip);
    return {edit_distance(hyp, sample.y2), sample.y2.size()};
}

double corpus_error_rate(const ModelParams& params, const Corpus& corpus, const Vocabulary& vocab,
                         const LayerSet& skip, std::size_t workers) {
    std::vector<ErrorCounts> per_sample(corpus.size());
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto run = [&](std::atomic<std::size_t>& next) {
        try {
            for (std::size_t i = next++; i < corpus.size(); i = next++) {
                per_sample[i] = score_sample(params, corpus[i], vocab, skip);
            }
        } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            next = corpus.size();
        }
    };
    std::atomic<std::size_t> next{0};
    workers = std::max<std::size_t>(1, std::min(workers, corpus.size()));
    if (workers == 1) {
        run(next);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back([&] { run(next); });
    }
    if (failure) std::rethrow_exception(failure);
    ErrorCounts total;
    for (const auto& c : per_sample) {
        total.edits += c.edits;
        total.reference_tokens += c.reference_tokens;
    }
    return error_rate(total);
}

double measure_throughput(const ModelParams& params, std::span<const TokenSeq> prompts, std::size_t max_new,
                          std::int32_t stop_token, std::size_t repeats) {
    if (prompts.empty()) throw std::invalid_argument("measure_throughput: no prompts");
    if (repeats == 0) throw std::invalid_argument("measure_throughput: repeats must be positive");
    for (const auto& p : prompts) (void)generate_greedy(params, p, stop_token, max_new);
    double best = 0.0;
    for (std::size_t r = 0; r < repeats; ++r) {
        std::size_t generated = 0;
        const auto start = std::chrono::steady_clock::now();
        for (const auto& p : prompts) generated += generate_greedy(params, p, stop_token, max_new).size();
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (generated == 0) throw std::runtime_error("measure_throughput: no tokens were generated");
        best = std::max(best, static_cast<double>(generated) / std::max(seconds, 1e-9));
    }
    return best;
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["name"] = name;
    j["error_rate"] = error_rate;
    j["n_samples"] = n_samples;
    j["tokens_per_second"] = tokens_per_second;
    j["param_count"] = param_count;
    j["param_bytes"] = param_bytes;
    j["depth"] = depth;
    return j.dump();
}

EvalReport EvalReport::from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    EvalReport r;
    r.name = j.value("name", std::string{});
    r.error_rate = j.at("error_rate").get<double>();
    r.n_samples = j.at("n_samples").get<std::size_t>();
    r.tokens_per_second = j.at("tokens_per_second").get<double>();
    r.param_count = j.at("param_count").get<std::size_t>();
    r.param_bytes = j.at("param_bytes").get<std::size_t>();
    r.depth = j.at("depth").get<std::size_t>();
    return r;
}

}  // namespace spade
