#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "spade/ops.hpp"
#include "spade/taskgen.hpp"

namespace spade {

/// Several packed samples laid end to end for teacher forcing. Row p of the
/// inputs predicts targets[p]; target_mask selects the supervised rows (the
/// y2 tokens and the EOS that closes them, plus y1 when configured).
struct PackedBatch {
    std::vector<std::int32_t> inputs;
    std::vector<std::int32_t> targets;
    std::vector<std::uint8_t> target_mask;
    SeqLayout layout;

    std::size_t tokens() const { return inputs.size(); }
};

PackedBatch pack_batch(const Corpus& corpus, std::span<const std::size_t> indices);

/// Deterministic epoch-wise shuffled minibatch indices.
class BatchStream {
  public:
    BatchStream(std::size_t corpus_size, std::size_t batch_size, std::uint64_t seed);
    std::vector<std::size_t> next();

  private:
    void reshuffle();
    std::size_t corpus_size_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::uint64_t epoch_ = 0;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

struct TrainConfig {
    std::size_t steps = 1000;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    std::size_t warmup_steps = 50;
    double min_lr_ratio = 0.1;
    double grad_clip = 1.0;
    std::size_t log_every = 25;
    std::size_t eval_every = 0;  // 0: evaluate only after the last step
    std::uint64_t order_seed = 0;

    /// Linear warmup, then cosine decay to min_lr_ratio * learning_rate.
    double lr_at(std::size_t step) const;
    bool operator==(const TrainConfig&) const = default;
};

}  // namespace spade
