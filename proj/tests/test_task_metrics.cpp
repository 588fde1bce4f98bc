#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "checks.hpp"
#include "spade/metrics.hpp"
#include "spade/taskgen.hpp"
#include "support.hpp"

using namespace spade;
using namespace spade::testing;

TEST(TaskConfig, Validation) {
    TaskConfig t;
    EXPECT_NO_THROW(t.validate());
    auto bad = t;
    bad.content_vocab = 1;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = t;
    bad.n_speakers = 1;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = t;
    bad.eval_seed = bad.train_seed;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = t;
    bad.max_len = 40;  // 4 * 40 + 5 > 128
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = t;
    bad.min_len = 9;
    bad.max_len = 8;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(TaskGen, ShiftExample) {
    TaskConfig t;
    t.content_vocab = 4;
    t.n_speakers = 2;
    t.min_len = 1;
    t.max_len = 3;
    const auto s = assemble_sample(t, {2}, {3}, {0, 1, 3}, {1, 2, 0}, 1);
    const auto v = t.vocabulary();
    EXPECT_EQ(s.packed, (TokenSeq{v.bos(), 2, v.sep(), 3, v.sep(), 0, 1, 3, v.sep(), 1, 2, 0, v.eos()}));
    EXPECT_EQ(s.loss_mask, (std::vector<std::uint8_t>{0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 0}));
    t.include_y1_in_loss = true;
    const auto s2 = assemble_sample(t, {2}, {3}, {0, 1, 3}, {1, 2, 0}, 1);
    EXPECT_EQ(s2.loss_mask, (std::vector<std::uint8_t>{0, 0, 0, 1, 0, 0, 0, 0, 0, 1, 1, 1, 0}));
}

TEST(TaskGen, SamplesObeyTheShiftAndLayout) {
    TaskConfig t;
    const auto v = t.vocabulary();
    for (std::uint64_t seed = 0; seed < 500; ++seed) {
        const auto s = make_sample(t, seed);
        ASSERT_LT(s.speaker_id, t.n_speakers);
        ASSERT_EQ(s.x1.size(), s.y1.size());
        ASSERT_EQ(s.x2.size(), s.y2.size());
        ASSERT_GE(s.x1.size(), t.min_len);
        ASSERT_LE(s.x2.size(), t.max_len);
        for (std::size_t i = 0; i < s.x2.size(); ++i) {
            ASSERT_EQ(static_cast<std::size_t>(s.y2[i]), (static_cast<std::size_t>(s.x2[i]) + s.speaker_id) % 64);
        }
        for (std::size_t i = 0; i < s.x1.size(); ++i) {
            ASSERT_EQ(static_cast<std::size_t>(s.y1[i]), (static_cast<std::size_t>(s.x1[i]) + s.speaker_id) % 64);
        }
        ASSERT_LE(s.packed.size(), t.max_seq_len);
        // Mask audit: exactly the y2 positions, which hold y2 verbatim.
        const std::size_t start = s.packed.size() - 1 - s.y2.size();
        for (std::size_t p = 0; p < s.packed.size(); ++p) {
            const bool in_y2 = p >= start && p < s.packed.size() - 1;
            ASSERT_EQ(s.loss_mask[p] != 0, in_y2);
            if (in_y2) ASSERT_EQ(s.packed[p], s.y2[p - start]);
        }
        ASSERT_EQ(s.packed.front(), v.bos());
        ASSERT_EQ(s.packed.back(), v.eos());
    }
}

TEST(TaskGen, IdentitySpeaker) {
    TaskConfig t;
    bool seen = false;
    for (std::uint64_t seed = 0; seed < 2000 && !seen; ++seed) {
        const auto s = make_sample(t, seed);
        if (s.speaker_id == 0) {
            EXPECT_EQ(s.y1, s.x1);
            EXPECT_EQ(s.y2, s.x2);
            seen = true;
        }
    }
    EXPECT_TRUE(seen);
}

TEST(TaskGen, DeterministicCorpora) {
    TaskConfig t;
    EXPECT_EQ(corpus_to_text(make_corpus(t, 50, Split::eval)), corpus_to_text(make_corpus(t, 50, Split::eval)));
    EXPECT_NE(corpus_to_text(make_corpus(t, 50, Split::eval)), corpus_to_text(make_corpus(t, 50, Split::train)));
    EXPECT_THROW(make_corpus(t, 0, Split::train), std::invalid_argument);
    // Prefix stability: a larger corpus starts with the smaller one.
    const auto small = make_corpus(t, 10, Split::train);
    const auto large = make_corpus(t, 20, Split::train);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(small[i].packed, large[i].packed);
}

TEST(TaskGen, TrainEvalOverlapIsRare) {
    TaskConfig t;
    const auto train = make_corpus(t, 20000, Split::train);
    const auto eval = make_corpus(t, 1000, Split::eval);
    std::set<std::pair<std::size_t, TokenSeq>> seen;
    for (const auto& s : train) seen.emplace(s.speaker_id, s.x2);
    std::size_t overlap = 0;
    for (const auto& s : eval) overlap += seen.count({s.speaker_id, s.x2});
    EXPECT_LT(static_cast<double>(overlap) / static_cast<double>(eval.size()), 0.01);
}

TEST(TaskGen, CorpusTextRoundTrip) {
    TaskConfig t;
    t.include_y1_in_loss = true;
    const auto c = make_corpus(t, 30, Split::train);
    const auto back = corpus_from_text(t, corpus_to_text(c));
    ASSERT_EQ(back.size(), c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        EXPECT_EQ(back[i].packed, c[i].packed);
        EXPECT_EQ(back[i].loss_mask, c[i].loss_mask);
        EXPECT_EQ(back[i].speaker_id, c[i].speaker_id);
    }
    const auto path = std::filesystem::temp_directory_path() / "spade_corpus_roundtrip.jsonl";
    save_corpus(path, c);
    EXPECT_EQ(corpus_to_text(load_corpus(t, path)), corpus_to_text(c));
    std::filesystem::remove(path);
}

TEST(TaskGen, CorpusParseErrorsNameTheLine) {
    TaskConfig t;
    const auto good = corpus_to_text(make_corpus(t, 2, Split::train));
    try {
        corpus_from_text(t, good + "{\"speaker\": 1, \"x1\": [1]}\n");
        FAIL() << "expected a parse error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
    }
    // Inconsistent record: y2 is not the shift of x2.
    EXPECT_THROW(corpus_from_text(t, "{\"speaker\":1,\"x1\":[1],\"y1\":[2],\"x2\":[3],\"y2\":[3]}\n"), std::runtime_error);
}

TEST(QueryPrompt, StopsAfterThirdSeparator) {
    TaskConfig t;
    const auto s = make_sample(t, 4);
    const auto p = query_prompt(s, t.vocabulary());
    EXPECT_EQ(p.size(), s.packed.size() - s.y2.size() - 1);
    EXPECT_TRUE(std::equal(p.begin(), p.end(), s.packed.begin()));
    EXPECT_EQ(p.back(), t.vocabulary().sep());
}

TEST(EditDistance, KnownCases) {
    using V = std::vector<std::int32_t>;
    EXPECT_EQ(edit_distance(V{}, V{}), 0u);
    EXPECT_EQ(edit_distance(V{1, 2, 3}, V{}), 3u);
    EXPECT_EQ(edit_distance(V{}, V{1, 2}), 2u);
    EXPECT_EQ(edit_distance(V{1, 2, 3}, V{1, 2, 3}), 0u);
    EXPECT_EQ(edit_distance(V{1, 2, 3}, V{1, 3}), 1u);
    EXPECT_EQ(edit_distance(V{1, 2, 3}, V{3, 2, 1}), 2u);
    // "kitten" -> "sitting"
    EXPECT_EQ(edit_distance(V{10, 8, 19, 19, 4, 13}, V{18, 8, 19, 19, 8, 13, 6}), 3u);
}

TEST(EditDistance, AgreesWithAlignmentOracle) {
    EXPECT_EQ(edit_distance_disagreements(1000, 12, 21), 0u);
}

TEST(EditDistance, MetricProperties) {
    Rng rng(2);
    for (int i = 0; i < 300; ++i) {
        const auto a = random_tokens(rng, rand_dim(rng, 0, 8), 3);
        const auto b = random_tokens(rng, rand_dim(rng, 0, 8), 3);
        const auto c = random_tokens(rng, rand_dim(rng, 0, 8), 3);
        EXPECT_EQ(edit_distance(a, b), edit_distance(b, a));
        EXPECT_LE(edit_distance(a, c), edit_distance(a, b) + edit_distance(b, c));
        EXPECT_GE(edit_distance(a, b), a.size() > b.size() ? a.size() - b.size() : b.size() - a.size());
    }
}

TEST(ErrorRate, PooledOverReferenceTokens) {
    using P = std::pair<TokenSeq, TokenSeq>;
    // 1 edit over 4 tokens and 2 edits over 2 tokens: pooled 3/6, not the mean of 0.25 and 1.0.
    const std::vector<P> pairs{{{1, 2, 3, 9}, {1, 2, 3, 4}}, {{}, {5, 6}}};
    EXPECT_DOUBLE_EQ(error_rate(pairs), 0.5);
    const std::vector<P> empty_refs{{{1}, {}}};
    EXPECT_THROW(error_rate(empty_refs), std::invalid_argument);
    // Insertions can push the rate above 1.
    const std::vector<P> long_hyp{{{1, 2, 3}, {1}}};
    EXPECT_DOUBLE_EQ(error_rate(long_hyp), 2.0);
}

TEST(ErrorRate, CorpusRateIndependentOfWorkers) {
    TaskConfig t;
    t.min_len = 2;
    t.max_len = 4;
    t.n_speakers = 4;
    t.content_vocab = 8;
    t.max_seq_len = 24;
    auto cfg = tiny_config(3);
    cfg.vocab_size = t.vocabulary().size();
    auto p = init_params(cfg);
    jitter(p, 4, 0.5);
    const auto corpus = make_corpus(t, 24, Split::eval);
    const double one = corpus_error_rate(p, corpus, t.vocabulary(), {}, 1);
    EXPECT_EQ(one, corpus_error_rate(p, corpus, t.vocabulary(), {}, 3));
    EXPECT_GT(one, 0.0);
}

TEST(EvalReport, JsonRoundTrip) {
    EvalReport r{"teacher", 0.0125, 128, 1234.5, 1619968, 1619968 * 8, 8};
    EXPECT_EQ(EvalReport::from_json(r.to_json()), r);
    EXPECT_THROW(EvalReport::from_json("{\"name\":\"x\"}"), std::exception);
}

TEST(Throughput, CountsGeneratedTokens) {
    auto p = init_params(tiny_config(5));
    std::vector<TokenSeq> prompts{{1, 2}, {3}};
    EXPECT_GT(measure_throughput(p, prompts, 4), 0.0);
    EXPECT_THROW(measure_throughput(p, std::vector<TokenSeq>{}, 4), std::invalid_argument);
    EXPECT_THROW(measure_throughput(p, prompts, 4, -1, 0), std::invalid_argument);
}
