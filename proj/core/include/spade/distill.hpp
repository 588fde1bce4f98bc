#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spade/compress.hpp"
#include "spade/model.hpp"
#include "spade/taskgen.hpp"
#include "spade/training.hpp"

namespace spade {

/// Where a student layer's latent and attention targets come from.
/// dynamic: the last teacher layer before the next retained one.
/// same_index: the teacher layer the student layer was copied from.
enum class TargetMode { dynamic, same_index };

std::string to_string(TargetMode m);
TargetMode target_mode_from_string(const std::string& s);

struct LossTerms {
    bool ce = true;
    bool logit = true;
    bool latent = true;
    bool attention = true;
    bool embedding = true;
    bool operator==(const LossTerms&) const = default;
};

struct DistillConfig {
    double alpha = 0.25;
    double skew_lambda = 0.1;
    LossTerms terms;
    TargetMode target_mode = TargetMode::dynamic;
    TrainConfig train;

    void validate() const;
    /// Weight on each of the four distillation terms: (1 - alpha) / 4.
    double distill_weight() const { return (1.0 - alpha) / 4.0; }
    bool operator==(const DistillConfig&) const = default;
};

struct LossBreakdown {
    double total = 0.0;
    double ce = 0.0;
    double logit = 0.0;
    double latent = 0.0;
    double attention = 0.0;
    double embedding = 0.0;
};

/// KL(p || lambda p + (1 - lambda) q) for two distributions.
double skew_kl(std::span<const double> p, std::span<const double> q, double lambda);

/// Teacher layer index aligned with student layer j.
std::size_t target_layer(const PrunePlan& plan, std::size_t student_layer, TargetMode mode);

/// Mean over student layers of the MSE between the student layer output and
/// its target teacher layer output. Teacher side carries no gradient.
Tensor latent_loss(const ForwardTrace& student, const ForwardTrace& teacher, const PrunePlan& plan, TargetMode mode);
/// As latent_loss, on head-averaged attention probabilities over causal entries.
Tensor attention_loss(const ForwardTrace& student, const ForwardTrace& teacher, const PrunePlan& plan,
                      TargetMode mode);
/// MSE between the embedded input streams (token + position embeddings).
Tensor embedding_loss(const ForwardTrace& student, const ForwardTrace& teacher);

struct CompositeLoss {
    Tensor total;
    LossBreakdown breakdown;
};

/// alpha * CE + (1 - alpha) / 4 * (logit + latent + attention + embedding);
/// disabled terms contribute zero.
CompositeLoss composite_loss(const ModelParams& student, const ModelParams& teacher, const PackedBatch& batch,
                             const PrunePlan& plan, const DistillConfig& config);

struct TrainLogRecord {
    std::size_t step = 0;
    std::size_t tokens_seen = 0;
    double learning_rate = 0.0;
    LossBreakdown loss;
    std::optional<double> eval_error_rate;

    std::string to_json() const;
    static TrainLogRecord from_json(const std::string& line);
};

std::string log_to_text(std::span<const TrainLogRecord> log);
std::vector<TrainLogRecord> log_from_text(const std::string& text);

struct TrainResult {
    ModelParams params;
    std::vector<TrainLogRecord> log;
    std::size_t tokens_seen = 0;
};

/// Periodic evaluation hook: returns a token error rate for the current model.
using EvalFn = std::function<double(const ModelParams&)>;

/// Called with each log record as soon as it is produced.
using LogFn = std::function<void(const TrainLogRecord&)>;

/// Plain cross-entropy training of a model from its current weights.
TrainResult train_supervised(const ModelParams& initial, const Corpus& corpus, const TrainConfig& config,
                             const EvalFn& evaluate = {}, const LogFn& on_log = {});

/// Healing: trains a copy of `student` against the frozen teacher with the
/// composite loss. The inputs are left untouched.
TrainResult heal(const ModelParams& student, const ModelParams& teacher, const PrunePlan& plan, const Corpus& corpus,
                 const DistillConfig& config, const EvalFn& evaluate = {}, const LogFn& on_log = {});

}  // namespace spade
