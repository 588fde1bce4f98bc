#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "spade/model.hpp"

namespace spade {

/// Content ids are [0, content); the three control tokens follow.
struct Vocabulary {
    std::size_t content = 64;

    std::int32_t bos() const { return static_cast<std::int32_t>(content); }
    std::int32_t sep() const { return static_cast<std::int32_t>(content + 1); }
    std::int32_t eos() const { return static_cast<std::int32_t>(content + 2); }
    std::size_t size() const { return content + 3; }
};

struct TaskConfig {
    std::size_t content_vocab = 64;
    std::size_t min_len = 8;
    std::size_t max_len = 16;
    std::size_t n_speakers = 64;
    std::size_t max_seq_len = 128;
    std::uint64_t train_seed = 1;
    std::uint64_t eval_seed = 2;
    bool include_y1_in_loss = false;

    void validate() const;
    Vocabulary vocabulary() const { return {content_vocab}; }
    /// Longest packed sequence this config can produce.
    std::size_t max_packed_len() const { return 4 * max_len + 5; }
    bool operator==(const TaskConfig&) const = default;
};

enum class Split { train, eval };

/// One reference/query pair sharing a hidden shift ("speaker").
struct Sample {
    TokenSeq x1, y1, x2, y2;
    std::size_t speaker_id = 0;
    /// [BOS] x1 [SEP] y1 [SEP] x2 [SEP] y2 [EOS]
    TokenSeq packed;
    /// Marks the y2 positions of `packed` (and y1 when configured).
    std::vector<std::uint8_t> loss_mask;
};

using Corpus = std::vector<Sample>;

/// y_t = (x_t + s) mod content_vocab with s uniform over the speaker family.
Sample make_sample(const TaskConfig& task, std::uint64_t seed);
/// Rebuilds packed/loss_mask from the four segments.
Sample assemble_sample(const TaskConfig& task, TokenSeq x1, TokenSeq y1, TokenSeq x2, TokenSeq y2,
                       std::size_t speaker_id);
Corpus make_corpus(const TaskConfig& task, std::size_t n, Split split);

/// [BOS] x1 [SEP] y1 [SEP] x2 [SEP]: what the model sees before producing y2.
TokenSeq query_prompt(const Sample& sample, const Vocabulary& vocab);

/// JSON lines: {"speaker":s,"x1":[..],"y1":[..],"x2":[..],"y2":[..]}
std::string corpus_to_text(const Corpus& corpus);
Corpus corpus_from_text(const TaskConfig& task, const std::string& text);
void save_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus load_corpus(const TaskConfig& task, const std::filesystem::path& path);

}  // namespace spade
