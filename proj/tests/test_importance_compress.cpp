#include <gtest/gtest.h>

#include <filesystem>

#include "checks.hpp"
#include "spade/checkpoint.hpp"
#include "spade/compress.hpp"
#include "spade/distill.hpp"
#include "spade/importance.hpp"
#include "support.hpp"

using namespace spade;
using namespace spade::testing;

namespace {

TaskConfig small_task() {
    TaskConfig t;
    t.content_vocab = 6;
    t.n_speakers = 2;
    t.min_len = 2;
    t.max_len = 3;
    t.max_seq_len = 24;
    return t;
}

ModelParams small_model(std::uint64_t seed, std::size_t layers) {
    auto cfg = tiny_config(seed, layers);
    cfg.vocab_size = small_task().vocabulary().size();
    cfg.d_model = 16;
    cfg.d_ff = 32;
    return init_params(cfg);
}

ImportanceProfile profile_of(std::vector<double> wli, std::vector<double> cli) {
    ImportanceProfile p;
    p.wli = std::move(wli);
    p.cli = std::move(cli);
    p.base_error_rate = 0.125;
    p.fingerprint = {"0123456789abcdef", 5, 64};
    return p;
}

}  // namespace

TEST(Cosine, SyntheticDoubles) {
    const std::vector<double> x{1.0, 2.0, -3.0, 0.5, 0.0, 4.0};
    std::vector<double> neg(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) neg[i] = -x[i];
    CosineAccumulator a;
    a.add(x, neg, 3);
    EXPECT_NEAR(a.mean(), 2.0, 1e-15);

    CosineAccumulator o;
    o.add(std::vector<double>{1.0, 0.0, 0.0, 1.0}, std::vector<double>{0.0, 3.0, -2.0, 0.0}, 2);
    EXPECT_NEAR(o.mean(), 1.0, 1e-15);

    CosineAccumulator same;
    same.add(x, x, 3);
    EXPECT_NEAR(same.mean(), 0.0, 1e-15);

    CosineAccumulator zeros;
    zeros.add(std::vector<double>{0.0, 0.0}, std::vector<double>{1.0, 1.0}, 2);
    EXPECT_THROW(zeros.mean(), std::runtime_error);
}

TEST(Importance, ZeroedLayerHasNoEffect) {
    auto p = small_model(1, 3);
    jitter(p, 2, 0.3);
    for (auto& [name, t] : p.layers[1].named())
        for (auto& v : t.mutable_values()) v = 0.0;
    const auto eval = make_corpus(small_task(), 16, Split::eval);
    const auto prof = build_profile(p, eval);
    EXPECT_EQ(prof.wli[1], prof.base_error_rate);
    EXPECT_NEAR(prof.cli[1], 0.0, 1e-15);
    EXPECT_EQ(prof.cli, cli_scores(p, eval));
    EXPECT_EQ(prof.cli[2], cli_score(p, eval, 2));
    EXPECT_EQ(prof.wli[0], wli_score(p, eval, 0));
    EXPECT_THROW(wli_score(p, eval, 3), std::invalid_argument);
    EXPECT_THROW(build_profile(p, Corpus{}), std::invalid_argument);
}

TEST(Importance, OnlyWorkingLayerWinsWli) {
    // Train a one-layer model, then embed its block at index 2 of a four-layer
    // model whose other blocks are zero: only that layer should matter.
    const auto task = small_task();
    const auto train = make_corpus(task, 2048, Split::train);
    TrainConfig tc;
    tc.steps = 300;
    tc.batch_size = 16;
    tc.learning_rate = 3e-3;
    tc.warmup_steps = 20;
    tc.log_every = 100;
    const auto trained = train_supervised(small_model(3, 1), train, tc).params;

    auto deep = small_model(3, 4);
    deep.token_embedding = trained.token_embedding;
    deep.position_embedding = trained.position_embedding;
    deep.final_gain = trained.final_gain;
    deep.final_bias = trained.final_bias;
    deep.output_projection = trained.output_projection;
    for (std::size_t l = 0; l < 4; ++l)
        for (auto& [name, t] : deep.layers[l].named())
            for (auto& v : t.mutable_values()) v = 0.0;
    deep.layers[2] = trained.layers[0];

    const auto prof = build_profile(deep, make_corpus(task, 64, Split::eval), {2, 0});
    const auto best = std::max_element(prof.wli.begin(), prof.wli.end()) - prof.wli.begin();
    EXPECT_EQ(best, 2);
    EXPECT_GT(prof.wli[2], prof.base_error_rate);
    for (std::size_t l : {0, 1, 3}) EXPECT_EQ(prof.wli[l], prof.base_error_rate);
}

TEST(Importance, ProfileDeterministicAcrossWorkers) {
    auto p = small_model(4, 3);
    jitter(p, 5, 0.3);
    const auto eval = make_corpus(small_task(), 20, Split::eval);
    const auto a = build_profile(p, eval, {1, 9});
    const auto b = build_profile(p, eval, {4, 9});
    EXPECT_EQ(a, b);
    EXPECT_EQ(profile_to_text(a), profile_to_text(b));
    EXPECT_EQ(a.fingerprint.model_hash, model_fingerprint(p));
    EXPECT_EQ(a.fingerprint.n_samples, 20u);
}

TEST(Importance, ProfileTextRoundTrip) {
    const auto p = profile_of({0.5, 0.25, 1.0 / 3.0}, {0.1, 0.7, 0.2});
    const auto text = profile_to_text(p);
    EXPECT_EQ(profile_from_text(text), p);
    const auto path = std::filesystem::temp_directory_path() / "spade_profile.csv";
    save_profile(path, p);
    EXPECT_EQ(load_profile(path), p);
    std::filesystem::remove(path);
}

TEST(Importance, ProfileParseErrorsNameTheLine) {
    const auto text = profile_to_text(profile_of({0.5, 0.25}, {0.1, 0.7}));
    auto broken = text;
    broken.replace(broken.find("1,0.25"), 6, "1,abc");
    try {
        profile_from_text(broken);
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos) << e.what();
    }
    EXPECT_THROW(profile_from_text("layer_index,wli,cli\n0,1,2\n"), std::runtime_error);
}

TEST(Spearman, KnownValues) {
    const std::vector<double> a{1, 2, 3, 4};
    const std::vector<double> b{10, 20, 30, 40};
    const std::vector<double> c{4, 3, 2, 1};
    EXPECT_NEAR(spearman(a, b), 1.0, 1e-15);
    EXPECT_NEAR(spearman(a, c), -1.0, 1e-15);
    // Ties take average ranks: ranks (0.5, 0.5, 2, 3) vs (0, 1, 2, 3).
    const std::vector<double> t{5, 5, 6, 7};
    EXPECT_NEAR(spearman(t, a), 0.9486832980505138, 1e-12);
    EXPECT_THROW(spearman(std::vector<double>{1}, std::vector<double>{1}), std::invalid_argument);
}

TEST(Plan, DynamicTargetsForHalvedDepth) {
    const auto plan = make_plan(8, {0, 3, 4, 7});
    EXPECT_EQ(plan.distill_target, (std::vector<std::size_t>{2, 3, 6, 7}));
    EXPECT_EQ(plan.dropped, (std::vector<std::size_t>{1, 2, 5, 6}));
    EXPECT_EQ(target_layer(plan, 0, TargetMode::dynamic), 2u);
    EXPECT_EQ(target_layer(plan, 2, TargetMode::same_index), 4u);
}

TEST(Plan, RandomPlansObeyMappingRules) { EXPECT_EQ(mapping_violations(2000, 3), 0u); }

TEST(Plan, IdentityPlanTargetsItself) {
    const auto plan = make_plan(5, {0, 1, 2, 3, 4});
    EXPECT_EQ(plan.distill_target, plan.retained);
    EXPECT_TRUE(plan.dropped.empty());
}

TEST(Plan, ValidationErrors) {
    EXPECT_THROW(make_plan(4, {}), std::invalid_argument);
    EXPECT_THROW(make_plan(4, {1, 1}), std::invalid_argument);
    EXPECT_THROW(make_plan(4, {2, 1}), std::invalid_argument);
    EXPECT_THROW(make_plan(4, {4}), std::invalid_argument);
    auto plan = make_plan(4, {0, 2});
    plan.distill_target = {0, 3};
    EXPECT_THROW(validate_plan(plan), std::invalid_argument);
    plan = make_plan(4, {0, 2});
    plan.dropped = {1};
    EXPECT_THROW(validate_plan(plan), std::invalid_argument);
}

TEST(Plan, SelectionByCriterion) {
    const auto prof = profile_of({0.9, 0.1, 0.5, 0.2, 0.8, 0.3}, {0.1, 0.9, 0.8, 0.7, 0.2, 0.3});
    EXPECT_EQ(select_prune_set(prof, 3, Criterion::wli).retained, (std::vector<std::size_t>{0, 2, 4}));
    EXPECT_EQ(select_prune_set(prof, 3, Criterion::cli).retained, (std::vector<std::size_t>{1, 2, 3}));
    EXPECT_THROW(select_prune_set(prof, 0, Criterion::wli), std::invalid_argument);
    EXPECT_THROW(select_prune_set(prof, 6, Criterion::wli), std::invalid_argument);
}

TEST(Plan, TiesKeepEarlierLayers) {
    const auto prof = profile_of({0.5, 0.5, 0.5, 0.5}, {0.0, 0.0, 0.0, 0.0});
    EXPECT_EQ(select_prune_set(prof, 2, Criterion::wli).retained, (std::vector<std::size_t>{0, 1}));
}

TEST(Plan, JsonRoundTrip) {
    const auto plan = make_plan(8, {0, 3, 4, 7});
    EXPECT_EQ(plan_from_json(plan_to_json(plan)), plan);
    EXPECT_THROW(plan_from_json("{\"teacher_depth\":4,\"retained\":[3,1]}"), std::exception);
    EXPECT_EQ(criterion_from_string(to_string(Criterion::cli)), Criterion::cli);
    EXPECT_THROW(criterion_from_string("random"), std::invalid_argument);
}

TEST(CopyRetained, LayersAreBitExactCopies) {
    auto teacher = small_model(6, 5);
    jitter(teacher, 7, 0.3);
    const auto plan = make_plan(5, {1, 4});
    const auto student = copy_retained(teacher, plan);
    EXPECT_EQ(student.config.n_layers, 2u);
    const auto sn = student.layers[1].named();
    const auto tn = teacher.layers[4].named();
    for (std::size_t i = 0; i < sn.size(); ++i) {
        EXPECT_TRUE(std::equal(sn[i].second.values().begin(), sn[i].second.values().end(),
                               tn[i].second.values().begin()));
        EXPECT_FALSE(sn[i].second.same_node(tn[i].second));
    }
    EXPECT_THROW(copy_retained(teacher, make_plan(4, {0, 1})), std::invalid_argument);
}

TEST(CopyRetained, StudentMatchesTeacherWithSkips) { EXPECT_LT(pruning_equivalence_gap(20, 8), 1e-9); }
