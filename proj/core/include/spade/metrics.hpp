#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "spade/model.hpp"
#include "spade/taskgen.hpp"

namespace spade {

/// Levenshtein distance over token ids.
std::size_t edit_distance(std::span<const std::int32_t> hyp, std::span<const std::int32_t> ref);

struct ErrorCounts {
    std::size_t edits = 0;
    std::size_t reference_tokens = 0;
};

/// Pooled (micro-averaged) rate: sum of distances over sum of reference lengths.
double error_rate(std::span<const std::pair<TokenSeq, TokenSeq>> hyp_ref_pairs);
double error_rate(const ErrorCounts& counts);

/// Generation budget used when scoring: stop at EOS or at twice the reference.
std::size_t scoring_budget(const Sample& sample);

/// Greedy continuation of the query prompt, scored against y2.
ErrorCounts score_sample(const ModelParams& params, const Sample& sample, const Vocabulary& vocab,
                         const LayerSet& skip = {});
/// Token error rate (TER, the WER analog) of the model on a corpus. Samples
/// are spread over `workers` threads; the pooled result does not depend on it.
double corpus_error_rate(const ModelParams& params, const Corpus& corpus, const Vocabulary& vocab,
                         const LayerSet& skip = {}, std::size_t workers = 1);

/// Generated tokens per second of greedy decoding over all prompts, after one
/// untimed warmup pass; the fastest of `repeats` timed passes is reported.
/// stop_token < 0 generates exactly max_new per prompt.
double measure_throughput(const ModelParams& params, std::span<const TokenSeq> prompts, std::size_t max_new,
                          std::int32_t stop_token = -1, std::size_t repeats = 5);

struct EvalReport {
    std::string name;
    double error_rate = 0.0;
    std::size_t n_samples = 0;
    double tokens_per_second = 0.0;
    std::size_t param_count = 0;
    std::size_t param_bytes = 0;
    std::size_t depth = 0;

    std::string to_json() const;
    static EvalReport from_json(const std::string& text);
    bool operator==(const EvalReport&) const = default;
};

}  // namespace spade
