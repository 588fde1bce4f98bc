#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "spade/importance.hpp"
#include "spade/model.hpp"

namespace spade {

enum class Criterion { wli, cli };

std::string to_string(Criterion c);
Criterion criterion_from_string(const std::string& s);

/// Which teacher layers survive, and which teacher layer each surviving
/// (student) layer is aligned to during healing.
struct PrunePlan {
    std::size_t teacher_depth = 0;
    std::vector<std::size_t> retained;        // ascending teacher indices
    std::vector<std::size_t> dropped;         // complement of retained
    std::vector<std::size_t> distill_target;  // per student layer

    std::size_t student_depth() const { return retained.size(); }
    bool operator==(const PrunePlan&) const = default;
};

/// Builds a plan from a retained set. Each student layer j targets the last
/// teacher layer before the next retained one; the final student layer
/// targets teacher layer depth - 1.
PrunePlan make_plan(std::size_t teacher_depth, std::vector<std::size_t> retained);

/// Keeps the `keep` highest-scoring layers under the criterion; on equal
/// scores the earlier layer is kept.
PrunePlan select_prune_set(const ImportanceProfile& profile, std::size_t keep, Criterion criterion);

/// Throws std::invalid_argument naming the first violated invariant.
void validate_plan(const PrunePlan& plan);

/// Student whose layer j is a bit-exact copy of teacher layer retained[j];
/// embeddings, final norm, and output projection are copied verbatim.
ModelParams copy_retained(const ModelParams& teacher, const PrunePlan& plan);

/// {"teacher_depth":L,"retained":[..],"dropped":[..],"distill_target":[..]}
std::string plan_to_json(const PrunePlan& plan);
PrunePlan plan_from_json(const std::string& text);
void save_plan(const std::filesystem::path& path, const PrunePlan& plan);
PrunePlan load_plan(const std::filesystem::path& path);

}  // namespace spade
