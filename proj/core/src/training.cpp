#include "spade/training.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "spade/random.hpp"

namespace spade {

PackedBatch pack_batch(const Corpus& corpus, std::span<const std::size_t> indices) {
    if (indices.empty()) throw std::invalid_argument("pack_batch: no samples");
    PackedBatch b;
    std::vector<std::size_t> lengths;
    for (auto i : indices) {
        const auto& s = corpus.at(i);
        const std::size_t n = s.packed.size();
        for (std::size_t p = 0; p + 1 < n; ++p) {
            b.inputs.push_back(s.packed[p]);
            b.targets.push_back(s.packed[p + 1]);
            b.target_mask.push_back(s.loss_mask[p + 1] || p + 2 == n ? 1 : 0);
        }
        lengths.push_back(n - 1);
    }
    b.layout = SeqLayout::from_lengths(lengths);
    return b;
}

BatchStream::BatchStream(std::size_t corpus_size, std::size_t batch_size, std::uint64_t seed)
    : corpus_size_(corpus_size), batch_size_(batch_size), seed_(seed) {
    if (corpus_size == 0 || batch_size == 0) throw std::invalid_argument("batch stream: empty corpus or batch");
    order_.resize(corpus_size);
    reshuffle();
}

void BatchStream::reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(derive_seed(seed_, epoch_));
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.uniform_int(i)]);
    cursor_ = 0;
    ++epoch_;
}

std::vector<std::size_t> BatchStream::next() {
    std::vector<std::size_t> out;
    while (out.size() < batch_size_) {
        if (cursor_ == order_.size()) reshuffle();
        out.push_back(order_[cursor_++]);
    }
    return out;
}

double TrainConfig::lr_at(std::size_t step) const {
    if (warmup_steps > 0 && step < warmup_steps) {
        return learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    }
    const std::size_t decay = steps > warmup_steps ? steps - warmup_steps : 1;
    const double progress = std::min(1.0, static_cast<double>(step - std::min(step, warmup_steps)) / static_cast<double>(decay));
    const double cosine = 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
    return learning_rate * (min_lr_ratio + (1.0 - min_lr_ratio) * cosine);
}

}  // namespace spade
