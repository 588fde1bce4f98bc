#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "spade/tensor.hpp"

namespace spade {

/// Row ranges of a packed [N x d] activation matrix; one entry per sequence.
/// Attention never crosses a segment boundary.
struct SeqLayout {
    std::vector<std::size_t> offsets;
    std::vector<std::size_t> lengths;

    static SeqLayout single(std::size_t length) { return {{0}, {length}}; }
    static SeqLayout from_lengths(std::span<const std::size_t> lengths);
    std::size_t total_rows() const;
    std::size_t num_segments() const { return lengths.size(); }
    /// Offset of segment s inside a flat per-segment [T_s x T_s] block array.
    std::size_t square_offset(std::size_t segment) const;
    std::size_t total_square() const;
};

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x [N x in] * w [in x out] + bias [out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// Elementwise and reductions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// sum_i weights[i] * terms[i], each term a scalar.
Tensor weighted_sum(std::span<const Tensor> terms, std::span<const double> weights);
Tensor gelu(const Tensor& x);

/// Softmax along `axis`; rejects non-finite input.
Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalises over the last dimension, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Rows of `table` selected by `ids`, optionally offset by rows of a second
/// table indexed by the position inside each segment.
Tensor embed(const Tensor& table, std::span<const std::int32_t> ids);
Tensor embed_positions(const Tensor& table, const SeqLayout& layout);

/// Causal multi-head attention probabilities. q, k are [N x d]; the result
/// is a flat array with, per segment, heads blocks of [T x T] in row-major
/// order. Entries above the diagonal are exactly zero.
Tensor causal_attention_probs(const Tensor& q, const Tensor& k, const SeqLayout& layout,
                              std::size_t n_heads);
/// probs (as above) applied to v [N x d] per head.
Tensor attention_apply(const Tensor& probs, const Tensor& v, const SeqLayout& layout,
                       std::size_t n_heads);
/// Head mean of attention probabilities: flat per-segment [T x T] blocks.
Tensor head_average(const Tensor& probs, const SeqLayout& layout, std::size_t n_heads);

/// Mean negative log-likelihood of `targets` over rows where mask is set.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask);

/// Mean over selected elements of (x - target)^2; target carries no gradient.
/// An empty element mask selects every element.
Tensor mse_to_target(const Tensor& x, std::span<const double> target,
                     std::span<const std::uint8_t> element_mask = {});

/// Mean over masked rows of KL(p || lambda p + (1 - lambda) softmax(logits)),
/// with p given as fixed row distributions.
Tensor skew_kl_logits(const Tensor& student_logits, std::span<const double> teacher_probs,
                      std::span<const std::uint8_t> mask, double lambda);

}  // namespace spade
