#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "spade/checkpoint.hpp"
#include "spade/compress.hpp"
#include "support.hpp"

using namespace spade;
using namespace spade::testing;

namespace {

std::vector<double> to_vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

double max_gap(const Tensor& a, const Tensor& b) {
    double g = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) g = std::max(g, std::abs(a.at(i) - b.at(i)));
    return g;
}

ModelParams jittered(std::uint64_t seed, std::size_t layers = 3) {
    auto p = init_params(tiny_config(seed, layers));
    jitter(p, seed + 1, 0.3);
    return p;
}

}  // namespace

TEST(ModelConfig, Validation) {
    auto c = tiny_config();
    c.n_layers = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.n_heads = 3;  // 8 not divisible by 3
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_NO_THROW(tiny_config().validate());
}

TEST(Init, DeterministicInSeed) {
    const auto a = init_params(tiny_config(1));
    const auto b = init_params(tiny_config(1));
    const auto c = init_params(tiny_config(2));
    EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
    EXPECT_NE(to_vec(a.token_embedding), to_vec(c.token_embedding));
}

TEST(Init, ScalesAndResidualProjections) {
    ModelConfig c;
    c.n_layers = 8;
    c.seed = 3;
    const auto p = init_params(c);
    auto stddev = [](const Tensor& t) {
        double s = 0.0;
        for (double v : t.values()) s += v * v;
        return std::sqrt(s / static_cast<double>(t.numel()));
    };
    EXPECT_NEAR(stddev(p.layers[0].wq), 0.02, 0.001);
    EXPECT_NEAR(stddev(p.layers[0].w1), 0.02, 0.001);
    EXPECT_NEAR(stddev(p.layers[0].wo), 0.02 / 4.0, 0.0005);
    EXPECT_NEAR(stddev(p.layers[0].w2), 0.02 / 4.0, 0.0005);
    for (double v : p.layers[0].bq.values()) EXPECT_EQ(v, 0.0);
    for (double v : p.layers[0].ln1_gain.values()) EXPECT_EQ(v, 1.0);
}

TEST(ParamCount, ClosedForm) {
    // V=64, d=32, h=4, L=2, d_ff=128, T=256.
    // Embeddings 64*32 + 256*32; per layer 4*32*32 + 2*32*128 + 9*32 + 128;
    // final norm 2*32; output projection 32*64.
    ModelConfig c{64, 32, 4, 2, 128, 256, 0};
    const auto p = init_params(c);
    EXPECT_EQ(param_count(p), 37760u);
    EXPECT_EQ(param_bytes(p), 37760u * 8u);
}

TEST(ParamCount, HalvingDepthRemovesWholeBlocks) {
    ModelConfig c;  // d 128, d_ff 512, 8 layers
    const std::size_t block = 4 * 128 * 128 + 2 * 128 * 512 + 9 * 128 + 512;
    const auto full = init_params(c);
    c.n_layers = 4;
    const auto half = init_params(c);
    EXPECT_EQ(param_count(full) - param_count(half), 4 * block);
    EXPECT_EQ(param_count(full), 1619968u);
}

TEST(Forward, ShapesAndExecutedLayers) {
    const auto p = jittered(1);
    Rng rng(1);
    const auto tokens = random_tokens(rng, 9, p.config.vocab_size);
    const auto tr = forward(p, tokens, LayerSet{1});
    EXPECT_EQ(tr.logits.shape(), (Shape{9, p.config.vocab_size}));
    EXPECT_EQ(tr.executed_layers(), (std::vector<std::size_t>{0, 2}));
    EXPECT_EQ(tr.find_layer(1), nullptr);
    ASSERT_NE(tr.find_layer(2), nullptr);
    EXPECT_EQ(tr.find_layer(2)->attention.numel(), p.config.n_heads * 9 * 9);
}

TEST(Forward, RejectsBadInput) {
    const auto p = jittered(1);
    const std::vector<std::int32_t> bad{0, static_cast<std::int32_t>(p.config.vocab_size)};
    EXPECT_THROW(forward(p, bad), std::invalid_argument);
    const std::vector<std::int32_t> too_long(p.config.max_seq_len + 1, 0);
    EXPECT_THROW(forward(p, too_long), std::invalid_argument);
    const std::vector<std::int32_t> ok{0, 1};
    EXPECT_THROW(forward(p, ok, LayerSet{7}), std::invalid_argument);
}

TEST(Forward, SkipAllLayersIsHeadOnEmbeddings) {
    const auto p = jittered(2);
    Rng rng(2);
    const auto tokens = random_tokens(rng, 7, p.config.vocab_size);
    const auto tr = forward(p, tokens, LayerSet{0, 1, 2});
    const auto x0 = add(embed(p.token_embedding, tokens), embed_positions(p.position_embedding, SeqLayout::single(7)));
    const auto expect = matmul(layer_norm(x0, p.final_gain, p.final_bias), p.output_projection);
    EXPECT_EQ(to_vec(tr.logits), to_vec(expect));
}

TEST(Forward, ZeroBlockEqualsSkippedBlock) {
    auto p = jittered(3);
    for (auto& [name, t] : p.layers[1].named()) {
        for (auto& v : t.mutable_values()) v = 0.0;
    }
    Rng rng(3);
    const auto tokens = random_tokens(rng, 10, p.config.vocab_size);
    EXPECT_LT(max_gap(forward(p, tokens).logits, forward(p, tokens, LayerSet{1}).logits), 1e-9);
}

TEST(Forward, SkippedLayerPassesStreamThrough) {
    const auto p = jittered(4, 5);
    Rng rng(4);
    const auto tokens = random_tokens(rng, 8, p.config.vocab_size);
    const auto tr = forward(p, tokens, LayerSet{3});
    EXPECT_EQ(to_vec(tr.find_layer(4)->input), to_vec(tr.find_layer(2)->output));
}

TEST(Forward, SkippingDoesNotChangeEarlierLayers) {
    const auto p = jittered(5, 4);
    Rng rng(5);
    const auto tokens = random_tokens(rng, 8, p.config.vocab_size);
    const auto full = forward(p, tokens);
    const auto skipped = forward(p, tokens, LayerSet{2});
    for (std::size_t l = 0; l < 2; ++l) {
        EXPECT_EQ(to_vec(full.layers[l].output), to_vec(skipped.layers[l].output));
        EXPECT_EQ(to_vec(full.layers[l].attention), to_vec(skipped.layers[l].attention));
    }
}

TEST(Forward, ResidualTelescoping) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto p = jittered(seed, 4);
        Rng rng(seed);
        const auto tokens = random_tokens(rng, 12, p.config.vocab_size);
        const auto tr = forward(p, tokens, seed % 2 ? LayerSet{1} : LayerSet{});
        auto recon = to_vec(tr.embedded);
        for (const auto& l : tr.layers)
            for (std::size_t i = 0; i < recon.size(); ++i) recon[i] += l.output.at(i) - l.input.at(i);
        const auto& last = tr.layers.back().output;
        for (std::size_t i = 0; i < recon.size(); ++i) ASSERT_NEAR(recon[i], last.at(i), 1e-8);
    }
}

TEST(Forward, ResidualContributionIsTheBlock) {
    // x^l - x^{l-1} must equal f_l(x^{l-1}) recomputed from the ops.
    const auto p = jittered(6, 2);
    Rng rng(6);
    const auto tokens = random_tokens(rng, 9, p.config.vocab_size);
    const auto tr = forward(p, tokens);
    const auto& L = p.layers[1];
    const auto layout = SeqLayout::single(9);
    const auto x = tr.layers[1].input;
    const auto h = layer_norm(x, L.ln1_gain, L.ln1_bias);
    const auto probs =
        causal_attention_probs(linear(h, L.wq, L.bq), linear(h, L.wk, L.bk), layout, p.config.n_heads);
    const auto x1 = add(x, linear(attention_apply(probs, linear(h, L.wv, L.bv), layout, p.config.n_heads), L.wo, L.bo));
    const auto f = linear(gelu(linear(layer_norm(x1, L.ln2_gain, L.ln2_bias), L.w1, L.b1)), L.w2, L.b2);
    const auto expect = add(x1, f);
    EXPECT_LT(max_gap(expect, tr.layers[1].output), 1e-9);
    EXPECT_LT(max_gap(probs, tr.layers[1].attention), 1e-12);
}

TEST(Forward, Causality) {
    const auto p = jittered(7);
    Rng rng(7);
    auto tokens = random_tokens(rng, 12, p.config.vocab_size);
    const auto base = forward(p, tokens).logits;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        auto changed = tokens;
        changed[t] = (changed[t] + 1) % static_cast<std::int32_t>(p.config.vocab_size);
        const auto other = forward(p, changed).logits;
        const std::size_t v = p.config.vocab_size;
        for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
            double gap = 0.0;
            for (std::size_t k = 0; k < v; ++k) gap = std::max(gap, std::abs(base.at(pos * v + k) - other.at(pos * v + k)));
            if (pos < t) EXPECT_EQ(gap, 0.0) << "position " << pos << " saw token " << t;
            if (pos == t) EXPECT_GT(gap, 0.0);
        }
    }
}

TEST(Forward, PackedBatchMatchesSeparateSequences) {
    const auto p = jittered(8);
    Rng rng(8);
    const auto a = random_tokens(rng, 5, p.config.vocab_size);
    const auto b = random_tokens(rng, 9, p.config.vocab_size);
    std::vector<std::int32_t> packed(a);
    packed.insert(packed.end(), b.begin(), b.end());
    const std::vector<std::size_t> lengths{5, 9};
    const auto joint = forward(p, packed, SeqLayout::from_lengths(lengths)).logits;
    const auto la = forward(p, a).logits;
    const auto lb = forward(p, b).logits;
    for (std::size_t i = 0; i < la.numel(); ++i) EXPECT_NEAR(joint.at(i), la.at(i), 1e-12);
    for (std::size_t i = 0; i < lb.numel(); ++i) EXPECT_NEAR(joint.at(la.numel() + i), lb.at(i), 1e-12);
}

TEST(Decode, IncrementalLogitsMatchFullForward) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto p = jittered(seed + 20, 3);
        Rng rng(seed);
        const auto tokens = random_tokens(rng, 14, p.config.vocab_size);
        const LayerSet skip = seed % 2 ? LayerSet{1} : LayerSet{};
        const auto full = forward(p, tokens, skip).logits;
        DecodeSession session(p, skip);
        const std::size_t v = p.config.vocab_size;
        auto logits = session.extend(std::span(tokens).first(4));
        for (std::size_t k = 0; k < v; ++k) EXPECT_NEAR(logits[k], full.at(3 * v + k), 1e-10);
        for (std::size_t t = 4; t < tokens.size(); ++t) {
            logits = session.extend(std::span(tokens).subspan(t, 1));
            for (std::size_t k = 0; k < v; ++k) ASSERT_NEAR(logits[k], full.at(t * v + k), 1e-10);
        }
        EXPECT_EQ(session.length(), tokens.size());
    }
}

TEST(Generate, StopTokenBiasGivesEmptyContinuation) {
    auto p = jittered(9);
    const std::int32_t stop = 4;
    auto proj = p.output_projection.mutable_values();
    const std::size_t v = p.config.vocab_size;
    // Constant feature after the final norm: make the stop column dominate via the bias.
    for (auto& g : p.final_gain.mutable_values()) g = 0.0;
    for (auto& b : p.final_bias.mutable_values()) b = 1.0;
    for (std::size_t r = 0; r < p.config.d_model; ++r) proj[r * v + stop] = 10.0;
    const std::vector<std::int32_t> prompt{1, 2, 3};
    EXPECT_TRUE(generate_greedy(p, prompt, stop, 5).empty());
    EXPECT_EQ(generate_greedy(p, prompt, -1, 5), (TokenSeq(5, stop)));
}

TEST(Generate, DeterministicAndBounded) {
    const auto p = jittered(10);
    const std::vector<std::int32_t> prompt{1, 2, 3};
    const auto a = generate_greedy(p, prompt, -1, 6);
    EXPECT_EQ(a.size(), 6u);
    EXPECT_EQ(a, generate_greedy(p, prompt, -1, 6));
    EXPECT_THROW(generate_greedy(p, prompt, -1, p.config.max_seq_len), std::invalid_argument);
    EXPECT_THROW(generate_greedy(p, std::vector<std::int32_t>{}, -1, 1), std::invalid_argument);
    // Output equals argmax of teacher-forced logits on the generated prefix.
    std::vector<std::int32_t> seq(prompt);
    seq.insert(seq.end(), a.begin(), a.end() - 1);
    const auto logits = forward(p, seq).logits;
    const std::size_t v = p.config.vocab_size;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const std::size_t row = prompt.size() - 1 + i;
        std::size_t best = 0;
        for (std::size_t k = 1; k < v; ++k)
            if (logits.at(row * v + k) > logits.at(row * v + best)) best = k;
        EXPECT_EQ(static_cast<std::size_t>(a[i]), best);
    }
}

TEST(Generate, TiesResolveToLowestId) {
    auto p = jittered(11);
    for (auto& w : p.output_projection.mutable_values()) w = 0.0;
    const std::vector<std::int32_t> prompt{1};
    EXPECT_EQ(generate_greedy(p, prompt, -1, 3), (TokenSeq{0, 0, 0}));
}

TEST(Checkpoint, RoundTripIsBitExact) {
    const auto p = jittered(12, 2);
    const auto bytes = serialize_checkpoint(p);
    const auto q = deserialize_checkpoint(bytes);
    EXPECT_EQ(q.config, p.config);
    EXPECT_EQ(serialize_checkpoint(q), bytes);
    for (std::size_t i = 0; i < p.parameters().size(); ++i)
        EXPECT_EQ(to_vec(p.parameters()[i]), to_vec(q.parameters()[i]));
    const auto path = std::filesystem::temp_directory_path() / "spade_ckpt_roundtrip.ckpt";
    save_checkpoint(path, p);
    EXPECT_EQ(model_fingerprint(load_checkpoint(path)), model_fingerprint(p));
    std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruptInput) {
    const auto bytes = serialize_checkpoint(jittered(13, 1));
    EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), std::runtime_error);
    EXPECT_THROW(deserialize_checkpoint("NOTACKPT" + bytes.substr(8)), std::runtime_error);
    auto wrong_version = bytes;
    wrong_version[8] = 99;
    EXPECT_THROW(deserialize_checkpoint(wrong_version), std::runtime_error);
}

TEST(Params, DeepCopyIsIndependent) {
    const auto p = jittered(14, 1);
    auto q = p.deep_copy();
    q.layers[0].wq.mutable_values()[0] += 1.0;
    EXPECT_NE(p.layers[0].wq.at(0), q.layers[0].wq.at(0));
}
