#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "spade/compress.hpp"
#include "spade/distill.hpp"
#include "spade/importance.hpp"
#include "spade/metrics.hpp"
#include "spade/model.hpp"
#include "spade/taskgen.hpp"

namespace spade {

struct ExperimentPaths {
    std::filesystem::path train_corpus = "train_corpus.jsonl";
    std::filesystem::path eval_corpus = "eval_corpus.jsonl";
    std::filesystem::path teacher = "teacher.ckpt";
    std::filesystem::path teacher_log = "teacher_log.jsonl";
    std::filesystem::path profile = "profile.csv";
    std::filesystem::path student = "student.ckpt";
    std::filesystem::path plan = "plan.json";
    std::filesystem::path healed = "healed.ckpt";
    std::filesystem::path heal_log = "heal_log.jsonl";
    bool operator==(const ExperimentPaths&) const = default;
};

/// Everything one pipeline run needs. All randomness comes from `seed`,
/// expanded into named sub-seeds (model init, data splits, batch order).
struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::size_t workers = 1;
    ModelConfig model;  // vocab_size and seed are derived
    TaskConfig task;    // train/eval seeds and max_seq_len are derived
    std::size_t train_samples = 65536;
    std::size_t eval_samples = 128;
    TrainConfig teacher_train;
    std::size_t keep = 4;
    Criterion criterion = Criterion::wli;
    DistillConfig distill;
    std::size_t throughput_prompts = 16;
    std::size_t throughput_new_tokens = 16;
    ExperimentPaths paths;

    /// Model config with vocabulary and init seed filled in.
    ModelConfig model_config() const;
    /// Task config with split seeds filled in.
    TaskConfig task_config() const;
    TrainConfig teacher_train_config() const;
    DistillConfig distill_config() const;
    void validate() const;

    /// Relative paths are resolved against `dir`.
    void resolve_paths(const std::filesystem::path& dir);

    std::string to_json() const;
    static ExperimentConfig from_json(const std::string& text);
    static ExperimentConfig load(const std::filesystem::path& path);
    bool operator==(const ExperimentConfig&) const = default;
};

/// Writes the train and eval corpora.
void cmd_gen_corpus(const ExperimentConfig& config, std::ostream& log);

/// Trains the teacher with cross-entropy on the train corpus; writes the
/// checkpoint and training log. Returns the final eval TER.
double cmd_train_teacher(const ExperimentConfig& config, std::ostream& log);

ImportanceProfile cmd_importance(const ExperimentConfig& config, std::ostream& log);

struct PruneOutcome {
    PrunePlan plan;
    std::size_t teacher_params = 0;
    std::size_t student_params = 0;
    double max_logit_gap = 0.0;  // student vs teacher-with-skip self-check
};

/// keep == teacher depth produces an identity plan and a warning.
PruneOutcome cmd_prune(const ExperimentConfig& config, std::ostream& log);

TrainResult cmd_heal(const ExperimentConfig& config, std::ostream& log);

EvalReport cmd_eval(const ExperimentConfig& config, const std::filesystem::path& checkpoint,
                    const std::filesystem::path& report_path, const std::string& name, std::ostream& log);

}  // namespace spade
