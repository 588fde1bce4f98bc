#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "spade/ops.hpp"
#include "spade/tensor.hpp"

namespace spade {

using TokenSeq = std::vector<std::int32_t>;
using LayerSet = std::set<std::size_t>;

struct ModelConfig {
    std::size_t vocab_size = 67;
    std::size_t d_model = 128;
    std::size_t n_heads = 4;
    std::size_t n_layers = 8;
    std::size_t d_ff = 512;
    std::size_t max_seq_len = 128;
    std::uint64_t seed = 0;

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;
    std::size_t head_dim() const { return d_model / n_heads; }
    bool operator==(const ModelConfig&) const = default;
};

/// One pre-norm block: x += attn(ln1(x)); x += ffn(ln2(x)).
struct LayerParams {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor w1, b1, w2, b2;

    std::vector<std::pair<std::string, Tensor>> named() const;
};

struct ModelParams {
    ModelConfig config;
    Tensor token_embedding;     // [V x d]
    Tensor position_embedding;  // [T_max x d]
    std::vector<LayerParams> layers;
    Tensor final_gain, final_bias;
    Tensor output_projection;   // [d x V]

    /// Every tensor under a stable dotted name, in serialisation order.
    std::vector<std::pair<std::string, Tensor>> named_tensors() const;
    std::vector<Tensor> parameters() const;
    /// Independent copy; the result shares no storage with this.
    ModelParams deep_copy() const;
};

/// 0.02 N(0,1) weights, residual output projections further scaled by
/// 1/sqrt(2 n_layers); zero biases, unit gains. Deterministic in config.seed.
ModelParams init_params(const ModelConfig& config);

/// Assembles params from named tensors (checkpoint loading). Throws if a
/// tensor is missing or has the wrong shape for the config.
ModelParams params_from_named(const ModelConfig& config, std::vector<std::pair<std::string, Tensor>> named);

std::size_t param_count(const ModelParams& params);
std::size_t param_bytes(const ModelParams& params);

struct LayerTrace {
    std::size_t layer_index = 0;
    Tensor input;      // residual stream entering the block  [N x d]
    Tensor output;     // residual stream leaving the block   [N x d]
    Tensor attention;  // flat per-segment [heads x T x T]
};

struct ForwardTrace {
    std::vector<std::int32_t> tokens;
    SeqLayout layout;
    std::size_t n_heads = 0;
    Tensor embedded;  // x^0 [N x d]
    std::vector<LayerTrace> layers;
    Tensor logits;    // [N x V]

    std::vector<std::size_t> executed_layers() const;
    /// Trace entry for a teacher-side layer index, or nullptr if skipped.
    const LayerTrace* find_layer(std::size_t layer_index) const;
};

/// Teacher-forced pass over one or more packed sequences. Skipped layers leave
/// the residual stream untouched and produce no trace entry.
ForwardTrace forward(const ModelParams& params, std::span<const std::int32_t> tokens, const SeqLayout& layout,
                     const LayerSet& skip = {});
ForwardTrace forward(const ModelParams& params, std::span<const std::int32_t> tokens, const LayerSet& skip = {});

/// Incremental inference with a key/value cache. Reads parameter values only,
/// so several sessions may share one ModelParams across threads.
class DecodeSession {
  public:
    DecodeSession(const ModelParams& params, LayerSet skip = {});

    /// Appends tokens and returns next-token logits after the last one.
    std::vector<double> extend(std::span<const std::int32_t> tokens);
    std::size_t length() const { return length_; }

  private:
    const ModelParams& params_;
    std::vector<std::size_t> active_;
    std::vector<Buffer> keys_, values_;  // per active layer, [T_max x d]
    std::size_t length_ = 0;
};

/// Argmax decoding (lowest id wins ties). Stops before emitting stop_token,
/// or after max_new tokens. A negative stop_token disables stopping.
TokenSeq generate_greedy(const ModelParams& params, std::span<const std::int32_t> prompt, std::int32_t stop_token,
                         std::size_t max_new, const LayerSet& skip = {});

}  // namespace spade
