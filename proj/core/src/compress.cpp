#include "spade/compress.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "spade/text_format.hpp"

namespace spade {

std::string to_string(Criterion c) { return c == Criterion::wli ? "wli" : "cli"; }

Criterion criterion_from_string(const std::string& s) {
    if (s == "wli") return Criterion::wli;
    if (s == "cli") return Criterion::cli;
    throw std::invalid_argument("unknown pruning criterion '" + s + "' (expected wli or cli)");
}

PrunePlan make_plan(std::size_t teacher_depth, std::vector<std::size_t> retained) {
    PrunePlan plan;
    plan.teacher_depth = teacher_depth;
    plan.retained = std::move(retained);
    for (std::size_t l = 0; l < teacher_depth; ++l) {
        if (!std::binary_search(plan.retained.begin(), plan.retained.end(), l)) plan.dropped.push_back(l);
    }
    for (std::size_t j = 0; j < plan.retained.size(); ++j) {
        plan.distill_target.push_back(j + 1 < plan.retained.size() ? plan.retained[j + 1] - 1 : teacher_depth - 1);
    }
    validate_plan(plan);
    return plan;
}

PrunePlan select_prune_set(const ImportanceProfile& profile, std::size_t keep, Criterion criterion) {
    const auto& scores = criterion == Criterion::wli ? profile.wli : profile.cli;
    const std::size_t depth = scores.size();
    if (keep < 1 || keep >= depth) {
        throw std::invalid_argument("keep must lie in [1, " + std::to_string(depth) + "), got " + std::to_string(keep));
    }
    std::vector<std::size_t> order(depth);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<std::size_t> retained(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
    std::sort(retained.begin(), retained.end());
    return make_plan(depth, std::move(retained));
}

void validate_plan(const PrunePlan& plan) {
    auto fail = [](const std::string& why) { throw std::invalid_argument("invalid prune plan: " + why); };
    const std::size_t depth = plan.teacher_depth;
    if (depth == 0) fail("teacher depth is zero");
    if (plan.retained.empty()) fail("no retained layers");
    if (!std::is_sorted(plan.retained.begin(), plan.retained.end())) fail("retained indices are not sorted ascending");
    if (std::adjacent_find(plan.retained.begin(), plan.retained.end()) != plan.retained.end()) {
        fail("retained indices contain duplicates");
    }
    if (plan.retained.back() >= depth) fail("retained index out of range");
    std::vector<int> seen(depth, 0);
    for (auto r : plan.retained) ++seen[r];
    for (auto d : plan.dropped) {
        if (d >= depth) fail("dropped index out of range");
        ++seen[d];
    }
    for (std::size_t l = 0; l < depth; ++l) {
        if (seen[l] != 1) fail("retained and dropped do not partition [0, " + std::to_string(depth) + ")");
    }
    if (plan.distill_target.size() != plan.retained.size()) fail("one distillation target per student layer required");
    for (std::size_t j = 0; j < plan.retained.size(); ++j) {
        const bool last = j + 1 == plan.retained.size();
        const std::size_t expected = last ? depth - 1 : plan.retained[j + 1] - 1;
        if (plan.distill_target[j] != expected) {
            fail(last ? "final student layer must target teacher layer " + std::to_string(depth - 1)
                      : "student layer " + std::to_string(j) + " must target the layer before the next retained one (" +
                            std::to_string(expected) + ")");
        }
    }
}

ModelParams copy_retained(const ModelParams& teacher, const PrunePlan& plan) {
    validate_plan(plan);
    if (plan.teacher_depth != teacher.config.n_layers) {
        throw std::invalid_argument("prune plan depth " + std::to_string(plan.teacher_depth) +
                                    " does not match teacher depth " + std::to_string(teacher.config.n_layers));
    }
    const ModelParams copy = teacher.deep_copy();
    ModelParams student;
    student.config = teacher.config;
    student.config.n_layers = plan.retained.size();
    student.token_embedding = copy.token_embedding;
    student.position_embedding = copy.position_embedding;
    for (auto r : plan.retained) student.layers.push_back(copy.layers[r]);
    student.final_gain = copy.final_gain;
    student.final_bias = copy.final_bias;
    student.output_projection = copy.output_projection;
    return student;
}

std::string plan_to_json(const PrunePlan& plan) {
    nlohmann::json j;
    j["teacher_depth"] = plan.teacher_depth;
    j["retained"] = plan.retained;
    j["dropped"] = plan.dropped;
    j["distill_target"] = plan.distill_target;
    return j.dump();
}

PrunePlan plan_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    PrunePlan plan;
    plan.teacher_depth = j.at("teacher_depth").get<std::size_t>();
    plan.retained = j.at("retained").get<std::vector<std::size_t>>();
    plan.dropped = j.at("dropped").get<std::vector<std::size_t>>();
    plan.distill_target = j.at("distill_target").get<std::vector<std::size_t>>();
    validate_plan(plan);
    return plan;
}

void save_plan(const std::filesystem::path& path, const PrunePlan& plan) { write_text_file(path, plan_to_json(plan) + "\n"); }

PrunePlan load_plan(const std::filesystem::path& path) { return plan_from_json(read_text_file(path)); }

}  // namespace spade
